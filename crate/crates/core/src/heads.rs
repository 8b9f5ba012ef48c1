//! Prediction heads: masks from query/pixel dot products, classes from
//! query/prototype dot products, and boxes refined layer by layer.

use candle_core::{Tensor, Var, D};

use crate::nn::{sigmoid, to_f64_vec, LayerNorm, Linear, Mlp, ParamBuilder};
use crate::{Error, Result};

pub const BOX_EPS: f64 = 1e-4;

/// Mask logits `Q · X_Mᵀ`, `(rows, H*W)`.
pub fn mask_logits(queries: &Tensor, mask_feature: &Tensor) -> Result<Tensor> {
    let (_, c) = queries.dims2()?;
    let (_, cm) = mask_feature.dims2()?;
    if c != cm {
        return Err(Error::Shape(format!(
            "queries have {c} channels, mask feature has {cm}"
        )));
    }
    Ok(queries.matmul(&mask_feature.t()?)?)
}

/// `M_S = σ(Q_S · X_Mᵀ)`.
pub fn predict_semantic(semantic: &Tensor, mask_feature: &Tensor) -> Result<Tensor> {
    sigmoid(&mask_logits(semantic, mask_feature)?)
}

/// `M_I = σ(Q_I · X_Mᵀ)`.
pub fn predict_instance(instance: &Tensor, mask_feature: &Tensor) -> Result<Tensor> {
    sigmoid(&mask_logits(instance, mask_feature)?)
}

/// Class logits `Q_I · P_ᵀ` against `M + 1` prototypes (no-object last).
pub fn class_logits(instance: &Tensor, prototypes: &Tensor) -> Result<Tensor> {
    Ok(instance.matmul(&prototypes.t()?)?)
}

/// `Y_I = softmax(Q_I · Pᵀ)` row-wise.
pub fn classify(instance: &Tensor, prototypes: &Tensor) -> Result<Tensor> {
    Ok(crate::nn::softmax_last_dim(&class_logits(instance, prototypes)?)?)
}

pub fn inverse_sigmoid(x: &Tensor) -> Result<Tensor> {
    let x = x.clamp(BOX_EPS, 1.0 - BOX_EPS)?;
    Ok((x.log()? - x.affine(-1.0, 1.0)?.log()?)?)
}

/// Layer 0 takes `previous = None` and returns `σ(delta)`; later layers
/// return `σ(σ⁻¹(previous) + delta)`.
pub fn predict_boxes(delta: &Tensor, previous: Option<&Tensor>) -> Result<Tensor> {
    match previous {
        None => sigmoid(delta),
        Some(prev) => sigmoid(&(inverse_sigmoid(prev)? + delta)?),
    }
}

/// Outputs of the heads for one decoder layer. Masks and classes are
/// stored as logits; the probability views are derived.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    /// `(M, H*W)`.
    pub semantic_logits: Tensor,
    /// `(N, H*W)`.
    pub instance_logits: Tensor,
    /// `(N, M + 1)`, no-object last.
    pub class_logits: Tensor,
    /// `(N, 4)` as `(cx, cy, w, h)` in `(0, 1)`.
    pub boxes: Tensor,
    pub spatial_shape: (usize, usize),
}

impl PredictionSet {
    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.semantic_logits.dim(0)?)
    }

    pub fn num_queries(&self) -> Result<usize> {
        Ok(self.instance_logits.dim(0)?)
    }

    pub fn semantic_masks(&self) -> Result<Tensor> {
        sigmoid(&self.semantic_logits)
    }

    pub fn instance_masks(&self) -> Result<Tensor> {
        sigmoid(&self.instance_logits)
    }

    pub fn class_probs(&self) -> Result<Tensor> {
        Ok(crate::nn::softmax_last_dim(&self.class_logits)?)
    }

    /// Per-query maximum probability over the `M` real classes.
    pub fn class_scores(&self) -> Result<Vec<f64>> {
        let m = self.num_classes()?;
        let p = self.class_probs()?.detach().narrow(D::Minus1, 0, m)?;
        to_f64_vec(&p.max(D::Minus1)?)
    }

    pub fn detach(&self) -> PredictionSet {
        PredictionSet {
            semantic_logits: self.semantic_logits.detach(),
            instance_logits: self.instance_logits.detach(),
            class_logits: self.class_logits.detach(),
            boxes: self.boxes.detach(),
            spatial_shape: self.spatial_shape,
        }
    }
}

/// Learnable parts of the heads, shared by every decoder layer.
#[derive(Debug, Clone)]
pub struct Heads {
    norm: LayerNorm,
    mask_embed: Mlp,
    class_instance: Linear,
    class_prototype: Linear,
    pub no_object: Var,
    box_init: Mlp,
    box_delta: Mlp,
}

impl Heads {
    pub fn new(pb: &ParamBuilder, c: usize) -> Result<Self> {
        let box_delta = Mlp::new(&pb.pp("box_delta"), c, c, 4)?;
        box_delta.fc2.zero()?;
        Ok(Self {
            norm: LayerNorm::new(&pb.pp("norm"), c)?,
            mask_embed: Mlp::new(&pb.pp("mask_embed"), c, c, c)?,
            class_instance: Linear::new(&pb.pp("class_instance"), c, c)?,
            class_prototype: Linear::new(&pb.pp("class_prototype"), c, c)?,
            no_object: pb.normal("no_object", &[1, c], 0.02)?,
            box_init: Mlp::new(&pb.pp("box_init"), c, c, 4)?,
            box_delta,
        })
    }

    /// Runs every head. `previous_boxes` is `None` before the first
    /// decoder layer.
    pub fn predict(
        &self,
        semantic: &Tensor,
        instance: &Tensor,
        mask_feature: &Tensor,
        spatial_shape: (usize, usize),
        previous_boxes: Option<&Tensor>,
    ) -> Result<PredictionSet> {
        let s = self.norm.forward(semantic)?;
        let i = self.norm.forward(instance)?;
        let semantic_logits = mask_logits(&self.mask_embed.forward(&s)?, mask_feature)?;
        let instance_logits = mask_logits(&self.mask_embed.forward(&i)?, mask_feature)?;
        let protos = Tensor::cat(&[&s, self.no_object.as_tensor()], 0)?;
        let class_logits = class_logits(
            &self.class_instance.forward(&i)?,
            &self.class_prototype.forward(&protos)?,
        )?;
        let boxes = match previous_boxes {
            None => predict_boxes(&self.box_init.forward(&i)?, None)?,
            Some(prev) => predict_boxes(&self.box_delta.forward(&i)?, Some(&prev.detach()))?,
        };
        Ok(PredictionSet {
            semantic_logits,
            instance_logits,
            class_logits,
            boxes,
            spatial_shape,
        })
    }
}
