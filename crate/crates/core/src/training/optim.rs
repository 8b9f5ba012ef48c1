use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

/// Extracts the gradients of `params` from a backward pass.
pub fn collect_grads(params: &ParamStore, store: &GradStore) -> Grads {
    params
        .vars
        .iter()
        .filter_map(|(name, v)| store.get(v.as_tensor()).map(|g| (name.clone(), g.detach())))
        .collect()
}

/// Adds `scale * other` into `acc`.
pub fn accumulate(acc: &mut Grads, other: Grads, scale: f64) -> Result<()> {
    for (name, g) in other {
        let g = (g * scale)?;
        let next = match acc.remove(&name) {
            Some(a) => (a + g)?,
            None => g,
        };
        acc.insert(name, next);
    }
    Ok(())
}

use crate::checkpoint::OptimizerState;
use crate::nn::ParamStore;
use crate::{Error, Result};

/// Adam with decoupled weight decay. Decay applies to parameters of rank
/// two or more; norms, biases and embeddings of rank one are exempt.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, v) in &params.vars {
            moments.insert(name.clone(), (v.zeros_like()?, v.zeros_like()?));
        }
        Ok(Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments,
        })
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            step: self.step,
            moments: self.moments.clone(),
        }
    }

    pub fn restore(&mut self, state: &OptimizerState) -> Result<()> {
        for (name, (m, v)) in &mut self.moments {
            let (sm, sv) = state
                .moments
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks `{name}`")))?;
            if sm.dims() != m.dims() {
                return Err(Error::Checkpoint(format!("optimizer state for `{name}` has the wrong shape")));
            }
            *m = sm.to_dtype(m.dtype())?;
            *v = sv.to_dtype(v.dtype())?;
        }
        self.step = state.step;
        Ok(())
    }

    /// Applies one update with learning rate `lr`, first scaling every
    /// gradient by `grad_scale`.
    pub fn update(&mut self, params: &ParamStore, grads: &Grads, lr: f64, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in &params.vars {
            let Some(g) = grads.get(name) else {
                continue;
            };
            let g = (g.detach() * grad_scale)?;
            let (m, v) = self.moments.get_mut(name).expect("moments for every parameter");
            *m = ((&*m * self.beta1)? + (&g * (1.0 - self.beta1))?)?.detach();
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let mut delta = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            if var.rank() >= 2 && self.weight_decay > 0.0 {
                delta = (delta + (var.as_tensor() * self.weight_decay)?)?;
            }
            var.set(&(var.as_tensor() - (delta * lr)?)?.detach())?;
        }
        Ok(())
    }
}

/// Global L2 norm of all parameter gradients.
pub fn grad_norm(grads: &Grads) -> Result<f64> {
    let mut total = 0.0;
    for g in grads.values() {
        total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(total.sqrt())
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total`.
pub fn learning_rate(iteration: usize, total: usize, warmup: usize, base_lr: f64) -> f64 {
    if iteration < warmup {
        return base_lr * (iteration + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((iteration - warmup) as f64 / span as f64).min(1.0);
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}
