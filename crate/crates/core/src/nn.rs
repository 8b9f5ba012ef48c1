//! Small layer library on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted path so they can be
//! iterated in a stable order for the optimizer and checkpoints.
//! Initialization draws from a seeded ChaCha stream, never from the
//! device RNG.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::{Error, Result};

/// Named trainable parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

struct BuilderInner {
    store: ParamStore,
    rng: ChaCha8Rng,
}

/// Creates parameters under a path prefix.
#[derive(Clone)]
pub struct ParamBuilder {
    inner: Rc<RefCell<BuilderInner>>,
    prefix: String,
    pub dtype: DType,
    pub device: Device,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Rc::new(RefCell::new(BuilderInner {
                store: ParamStore::default(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            prefix: String::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            inner: self.inner.clone(),
            prefix,
            dtype: self.dtype,
            device: self.device.clone(),
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn make(&self, name: &str, dims: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let path = self.path(name);
        let mut inner = self.inner.borrow_mut();
        assert!(
            !inner.store.vars.contains_key(&path),
            "parameter {path} created twice"
        );
        inner.store.vars.insert(path, var.clone());
        Ok(var)
    }

    pub fn normal(&self, name: &str, dims: &[usize], std: f64) -> Result<Var> {
        let n: usize = dims.iter().product();
        let dist = Normal::new(0.0, std).expect("std is finite and positive");
        let values = {
            let mut inner = self.inner.borrow_mut();
            (0..n).map(|_| dist.sample(&mut inner.rng)).collect()
        };
        self.make(name, dims, values)
    }

    pub fn uniform(&self, name: &str, dims: &[usize], bound: f64) -> Result<Var> {
        let n: usize = dims.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let values = {
            let mut inner = self.inner.borrow_mut();
            (0..n).map(|_| dist.sample(&mut inner.rng)).collect()
        };
        self.make(name, dims, values)
    }

    pub fn constant(&self, name: &str, dims: &[usize], value: f64) -> Result<Var> {
        let n: usize = dims.iter().product();
        self.make(name, dims, vec![value; n])
    }

    pub fn from_values(&self, name: &str, dims: &[usize], values: Vec<f64>) -> Result<Var> {
        self.make(name, dims, values)
    }

    /// Consumes the builder's parameters. Other clones of the builder keep
    /// working but will start from an empty store.
    pub fn into_store(self) -> ParamStore {
        std::mem::take(&mut self.inner.borrow_mut().store)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Ok(Self {
            weight: pb.uniform("weight", &[out_dim, in_dim], bound)?,
            bias: pb.constant("bias", &[out_dim], 0.0)?,
        })
    }

    pub fn new_with_std(pb: &ParamBuilder, in_dim: usize, out_dim: usize, std: f64) -> Result<Self> {
        Ok(Self {
            weight: pb.normal("weight", &[out_dim, in_dim], std)?,
            bias: pb.constant("bias", &[out_dim], 0.0)?,
        })
    }

    /// `x` is `(..., in_dim)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor();
        let y = match x.rank() {
            2 => x.matmul(&w.t()?)?,
            _ => x.broadcast_matmul(&w.t()?)?,
        };
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }

    pub fn zero(&self) -> Result<()> {
        self.weight.set(&self.weight.zeros_like()?)?;
        self.bias.set(&self.bias.zeros_like()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.constant("gamma", &[dim], 1.0)?,
            beta: pb.constant("beta", &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    /// Normalizes over the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &ParamBuilder, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&pb.pp("fc1"), in_dim, hidden)?,
            fc2: Linear::new(&pb.pp("fc2"), hidden, out_dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Multi-head attention over 2-D token matrices `(tokens, channels)`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        assert!(dim % heads == 0, "channels {dim} not divisible by {heads} heads");
        Ok(Self {
            q: Linear::new(&pb.pp("q"), dim, dim)?,
            k: Linear::new(&pb.pp("k"), dim, dim)?,
            v: Linear::new(&pb.pp("v"), dim, dim)?,
            out: Linear::new(&pb.pp("out"), dim, dim)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (t, c) = x.dims2()?;
        Ok(x.reshape((t, self.heads, c / self.heads))?
            .transpose(0, 1)?
            .contiguous()?)
    }

    /// `bias`, when given, is added to the `(queries, keys)` logits of every head.
    pub fn forward(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (tq, c) = query.dims2()?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(key)?)?;
        let v = self.split_heads(&self.v.forward(value)?)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let mut logits = (q.matmul(&k.t()?)? * scale)?;
        if let Some(b) = bias {
            logits = logits.broadcast_add(b)?;
        }
        let attn = softmax_last_dim(&logits)?;
        let ctx = attn.matmul(&v)?.transpose(0, 1)?.reshape((tq, c))?;
        self.out.forward(&ctx)
    }
}

/// 2-D convolution over `(batch, channels, height, width)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
    /// Pad by replicating edge pixels instead of zeros.
    pub replicate: bool,
}

impl Conv2d {
    pub fn new(
        pb: &ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        Ok(Self {
            weight: pb.normal(
                "weight",
                &[out_ch, in_ch, kernel, kernel],
                (2.0 / fan_in as f64).sqrt(),
            )?,
            bias: pb.constant("bias", &[out_ch], 0.0)?,
            stride,
            padding: kernel / 2,
            replicate: false,
        })
    }

    pub fn replicate_padding(mut self) -> Self {
        self.replicate = true;
        self
    }

    /// `x` is `(1, C, H, W)`. Lowered to one matrix product over
    /// unfolded patches.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (out_ch, in_ch, k, _) = self.weight.dims4()?;
        let (_, c, h, w) = x.dims4()?;
        if c != in_ch {
            return Err(Error::Shape(format!("conv expects {in_ch} channels, got {c}")));
        }
        let p = self.padding;
        let s = self.stride;
        let x = x.squeeze(0)?;
        let padded = if p == 0 {
            x
        } else if self.replicate {
            x.pad_with_same(1, p, p)?.pad_with_same(2, p, p)?
        } else {
            x.pad_with_zeros(1, p, p)?.pad_with_zeros(2, p, p)?
        };
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let ho = (hp - k) / s + 1;
        let wo = (wp - k) / s + 1;
        let weight = self.weight.reshape((out_ch, in_ch * k * k))?;
        let cols = if k == 1 && s == 1 {
            padded.reshape((c, ho * wo))?
        } else {
            // Extra row/column so every tap can be subsampled by reshaping.
            let padded = if s > 1 {
                padded.pad_with_zeros(1, 0, s)?.pad_with_zeros(2, 0, s)?
            } else {
                padded
            };
            let mut taps = Vec::with_capacity(k * k);
            for ky in 0..k {
                for kx in 0..k {
                    let t = padded.narrow(1, ky, ho * s)?.narrow(2, kx, wo * s)?;
                    let t = if s > 1 {
                        t.reshape((c, ho, s, wo, s))?.narrow(2, 0, 1)?.narrow(4, 0, 1)?
                    } else {
                        t
                    };
                    taps.push(t.reshape((c, ho * wo))?);
                }
            }
            Tensor::stack(&taps, 1)?.reshape((c * k * k, ho * wo))?
        };
        let y = weight.matmul(&cols)?.broadcast_add(&self.bias.reshape((out_ch, 1))?)?;
        Ok(y.reshape((1, out_ch, ho, wo))?)
    }
}

/// Fixed 2-D sine/cosine position encoding, `(height * width, channels)`.
///
/// Half the channels encode the row, half the column; each half interleaves
/// sine and cosine at geometrically spaced frequencies.
pub fn sine_position_encoding(
    height: usize,
    width: usize,
    channels: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    assert!(channels % 4 == 0, "position channels must be divisible by 4");
    let half = channels / 2;
    let two_pi = std::f64::consts::TAU;
    let mut values = Vec::with_capacity(height * width * channels);
    for y in 0..height {
        for x in 0..width {
            let coords = [
                (y as f64 + 0.5) / height as f64 * two_pi,
                (x as f64 + 0.5) / width as f64 * two_pi,
            ];
            for c in coords {
                for i in 0..half / 2 {
                    let freq = 10000f64.powf(2.0 * i as f64 / half as f64);
                    values.push((c / freq * 8.0).sin());
                    values.push((c / freq * 8.0).cos());
                }
            }
        }
    }
    Ok(Tensor::from_vec(values, (height * width, channels), device)?.to_dtype(dtype)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Numerically stable `log(sigmoid(x))`.
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    // log σ(x) = min(x, 0) - log(1 + exp(-|x|))
    let neg_abs = x.abs()?.neg()?;
    let softplus = (neg_abs.exp()? + 1.0)?.log()?;
    Ok((x.minimum(0.0)? - softplus)?)
}

/// Softmax over the last dimension, built from differentiable primitives.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Flattens every element of a tensor to `f64`.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
