//! Mask, box and class losses, and the per-layer training objective.

use std::fmt;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::datamodel::SegSample;
use crate::heads::PredictionSet;
use crate::matching::{match_predictions, MatchResult};
use crate::nn::{log_sigmoid, log_softmax_last_dim, sigmoid};
use crate::{Error, Result};

pub const FOCAL_GAMMA: i32 = 2;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    #[serde(rename = "lambda_focal")]
    pub focal: f64,
    #[serde(rename = "lambda_dice")]
    pub dice: f64,
    #[serde(rename = "lambda_smooth_l1")]
    pub smooth_l1: f64,
    #[serde(rename = "lambda_diou")]
    pub diou: f64,
    #[serde(rename = "lambda_semantic")]
    pub semantic: f64,
    #[serde(rename = "lambda_instance")]
    pub instance: f64,
    #[serde(rename = "lambda_boxes")]
    pub boxes: f64,
    #[serde(rename = "lambda_class")]
    pub class: f64,
    /// Cross-entropy weight of queries labeled no-object.
    #[serde(rename = "no_object_weight")]
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            focal: 10.0,
            dice: 1.0,
            smooth_l1: 1.0,
            diou: 1.0,
            semantic: 5.0,
            instance: 5.0,
            boxes: 1.0,
            class: 1.0,
            no_object: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.focal,
            self.dice,
            self.smooth_l1,
            self.diou,
            self.semantic,
            self.instance,
            self.boxes,
            self.class,
            self.no_object,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Ground truth of one image at mask-feature resolution.
#[derive(Debug, Clone)]
pub struct Targets {
    pub classes: Vec<usize>,
    /// Binary instance masks, `(G, P)`; `None` when there are no instances.
    pub masks: Option<Tensor>,
    /// Same values as `masks`, row by row.
    pub mask_values: Vec<Vec<f64>>,
    pub boxes: Vec<[f64; 4]>,
    /// Binary per-class semantic masks, `(M, P)`.
    pub semantic: Tensor,
    pub spatial_shape: (usize, usize),
}

impl Targets {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Pools the sample's rasters to `spatial_shape`; a pooled pixel is
    /// foreground when at least half the block is.
    pub fn from_sample(sample: &SegSample, spatial_shape: (usize, usize), dtype: DType, device: &Device) -> Result<Self> {
        let (h, w) = spatial_shape;
        let (sh, sw) = (sample.height(), sample.width());
        if sh % h != 0 || sw % w != 0 || sh / h != sw / w {
            return Err(Error::Shape(format!(
                "sample of {sh}x{sw} cannot be pooled to {h}x{w}"
            )));
        }
        let f = sh / h;
        let pool = |m: &crate::raster::Mask| -> Vec<f64> {
            m.block_average(f).iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect()
        };
        let mask_values: Vec<Vec<f64>> = sample.instances.iter().map(|i| pool(&i.mask)).collect();
        let masks = if mask_values.is_empty() {
            None
        } else {
            let flat: Vec<f64> = mask_values.iter().flatten().copied().collect();
            Some(Tensor::from_vec(flat, (mask_values.len(), h * w), device)?.to_dtype(dtype)?)
        };
        let m = sample.dataset.num_classes();
        let sem: Vec<f64> = (0..m)
            .flat_map(|c| pool(&sample.semantic.class_mask(c as u32)))
            .collect();
        Ok(Self {
            classes: sample.instances.iter().map(|i| i.class_index).collect(),
            masks,
            mask_values,
            boxes: sample.instances.iter().map(|i| i.bbox.to_array()).collect(),
            semantic: Tensor::from_vec(sem, (m, h * w), device)?.to_dtype(dtype)?,
            spatial_shape,
        })
    }
}

/// Sigmoid focal loss averaged over pixels, one value per row.
pub fn sigmoid_focal_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let p = sigmoid(logits)?;
    let not_t = targets.affine(-1.0, 1.0)?;
    let ce = ((targets * log_sigmoid(logits)?)? + (&not_t * log_sigmoid(&logits.neg()?)?)?)?.neg()?;
    let p_t = ((&p * targets)? + (p.affine(-1.0, 1.0)? * &not_t)?)?;
    let modulation = p_t.affine(-1.0, 1.0)?.powf(FOCAL_GAMMA as f64)?;
    let alpha_t = targets.affine(2.0 * FOCAL_ALPHA - 1.0, 1.0 - FOCAL_ALPHA)?;
    Ok((alpha_t * ce)?.mul(&modulation)?.mean(D::Minus1)?)
}

/// `1 − (2·Σ p·t + ε) / (Σ p + Σ t + ε)`, one value per row.
pub fn dice_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let p = sigmoid(logits)?;
    let num = ((&p * targets)?.sum(D::Minus1)? * 2.0)? + DICE_EPS;
    let den = ((p.sum(D::Minus1)? + targets.sum(D::Minus1)?)? + DICE_EPS)?;
    Ok(num?.div(&den)?.affine(-1.0, 1.0)?)
}

fn zero(like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), like.dtype(), like.device())?)
}

/// `λ_f·focal + λ_d·dice`, averaged over rows; zero when there are no rows.
pub fn mask_loss(logits: &Tensor, targets: &Tensor, w: &LossWeights) -> Result<Tensor> {
    if logits.dim(0)? == 0 {
        return zero(logits);
    }
    let per_row = ((sigmoid_focal_loss(logits, targets)? * w.focal)? + (dice_loss(logits, targets)? * w.dice)?)?;
    Ok(per_row.mean(0)?)
}

/// Semantic mask loss over all `M` classes.
pub fn loss_semantic(logits: &Tensor, targets: &Tensor, w: &LossWeights) -> Result<Tensor> {
    mask_loss(logits, targets, w)
}

/// Instance mask loss over matched rows.
pub fn loss_instance(matched_logits: &Tensor, matched_targets: &Tensor, w: &LossWeights) -> Result<Tensor> {
    mask_loss(matched_logits, matched_targets, w)
}

/// Corner coordinates of `(cx, cy, w, h)` boxes as four `(P,)` tensors.
fn corners(b: &Tensor) -> Result<[Tensor; 4]> {
    let c = |i| b.narrow(1, i, 1).and_then(|t| t.squeeze(1));
    let (cx, cy, w, h) = (c(0)?, c(1)?, c(2)?, c(3)?);
    Ok([
        (&cx - (&w * 0.5)?)?,
        (&cy - (&h * 0.5)?)?,
        (&cx + (&w * 0.5)?)?,
        (&cy + (&h * 0.5)?)?,
    ])
}

/// Distance-IoU of paired boxes, `(P,)`.
pub fn diou(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let [px0, py0, px1, py1] = corners(pred)?;
    let [gx0, gy0, gx1, gy1] = corners(gt)?;
    let iw = (px1.minimum(&gx1)? - px0.maximum(&gx0)?)?.relu()?;
    let ih = (py1.minimum(&gy1)? - py0.maximum(&gy0)?)?.relu()?;
    let inter = (iw * ih)?;
    let area_p = ((&px1 - &px0)? * (&py1 - &py0)?)?;
    let area_g = ((&gx1 - &gx0)? * (&gy1 - &gy0)?)?;
    let union = ((area_p + area_g)? - &inter)?;
    let iou = (inter / union)?;
    let dcx = (((&px0 + &px1)? - (&gx0 + &gx1)?)? * 0.5)?;
    let dcy = (((&py0 + &py1)? - (&gy0 + &gy1)?)? * 0.5)?;
    let rho2 = (dcx.sqr()? + dcy.sqr()?)?;
    let cw = (px1.maximum(&gx1)? - px0.minimum(&gx0)?)?;
    let ch = (py1.maximum(&gy1)? - py0.minimum(&gy0)?)?;
    let c2 = (cw.sqr()? + ch.sqr()?)?;
    Ok((iou - (rho2 / c2)?)?)
}

/// Smooth L1 with `β = 1`, summed over the four coordinates, `(P,)`.
pub fn smooth_l1(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let a = (pred - gt)?.abs()?;
    let quad = (a.minimum(1.0)?.sqr()? * 0.5)?;
    let lin = (a - 1.0)?.relu()?;
    Ok((quad + lin)?.sum(D::Minus1)?)
}

/// `λ_sl1·smoothL1 + λ_diou·(1 − DIoU)` averaged over pairs.
pub fn loss_box(pred: &Tensor, gt: &Tensor, w: &LossWeights) -> Result<Tensor> {
    if pred.dim(0)? == 0 {
        return zero(pred);
    }
    let d = diou(pred, gt)?.affine(-1.0, 1.0)?;
    Ok(((smooth_l1(pred, gt)? * w.smooth_l1)? + (d * w.diou)?)?.mean(0)?)
}

/// Scalar versions of the box terms for one pair: `(smoothL1, 1 − DIoU)`.
pub fn box_pair_terms(pred: &[f64; 4], gt: &[f64; 4]) -> (f64, f64) {
    let sl1: f64 = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| {
            let d = (a - b).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum();
    let xy = |b: &[f64; 4]| [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0];
    let (p, g) = (xy(pred), xy(gt));
    let iw = (p[2].min(g[2]) - p[0].max(g[0])).max(0.0);
    let ih = (p[3].min(g[3]) - p[1].max(g[1])).max(0.0);
    let inter = iw * ih;
    let union = pred[2] * pred[3] + gt[2] * gt[3] - inter;
    let rho2 = (pred[0] - gt[0]).powi(2) + (pred[1] - gt[1]).powi(2);
    let c2 = (p[2].max(g[2]) - p[0].min(g[0])).powi(2) + (p[3].max(g[3]) - p[1].min(g[1])).powi(2);
    (sl1, 1.0 - (inter / union - rho2 / c2))
}

/// Weighted cross-entropy. `labels[i]` is a class index or `M` for
/// no-object; no-object rows carry weight `w.no_object`.
pub fn loss_class(logits: &Tensor, labels: &[usize], w: &LossWeights) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if n == 0 {
        return zero(logits);
    }
    let mut onehot = vec![0.0; n * k];
    let mut weights = vec![0.0; n];
    for (i, &l) in labels.iter().enumerate() {
        let wt = if l == k - 1 { w.no_object } else { 1.0 };
        onehot[i * k + l] = wt;
        weights[i] = wt;
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return zero(logits);
    }
    let onehot = Tensor::from_vec(onehot, (n, k), logits.device())?.to_dtype(logits.dtype())?;
    let ce = (log_softmax_last_dim(logits)? * onehot)?.sum_all()?.neg()?;
    Ok((ce / total)?)
}

/// Weighted terms of one layer.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LayerLoss {
    pub semantic: f64,
    pub instance: f64,
    pub boxes: f64,
    pub class: f64,
}

impl LayerLoss {
    pub fn total(&self) -> f64 {
        self.semantic + self.instance + self.boxes + self.class
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub layers: Vec<LayerLoss>,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        self.layers.iter().map(LayerLoss::total).sum()
    }

    pub fn sum(&self) -> LayerLoss {
        self.layers.iter().fold(LayerLoss::default(), |a, l| LayerLoss {
            semantic: a.semantic + l.semantic,
            instance: a.instance + l.instance,
            boxes: a.boxes + l.boxes,
            class: a.class + l.class,
        })
    }

    pub fn add(&mut self, other: &LossReport) {
        if self.layers.len() < other.layers.len() {
            self.layers.resize(other.layers.len(), LayerLoss::default());
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.semantic += b.semantic;
            a.instance += b.instance;
            a.boxes += b.boxes;
            a.class += b.class;
        }
    }

    pub fn scale(&mut self, f: f64) {
        for l in &mut self.layers {
            l.semantic *= f;
            l.instance *= f;
            l.boxes *= f;
            l.class *= f;
        }
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.sum();
        write!(
            f,
            "loss={:.6} semantic={:.6} instance={:.6} box={:.6} class={:.6}",
            self.total(),
            s.semantic,
            s.instance,
            s.boxes,
            s.class
        )?;
        for (k, l) in self.layers.iter().enumerate() {
            write!(f, " l{k}={:.6}", l.total())?;
        }
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn rows(t: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
    Ok(t.index_select(&Tensor::from_vec(idx, ids.len(), t.device())?, 0)?)
}

/// Loss of one prediction set. `active` lists the queries eligible for
/// matching and classification; when fewer than the ground-truth count
/// are active, every query is eligible.
pub fn layer_loss(
    pred: &PredictionSet,
    active: &[usize],
    targets: &Targets,
    w: &LossWeights,
) -> Result<(Tensor, LayerLoss, MatchResult)> {
    let n = pred.num_queries()?;
    let all: Vec<usize>;
    let queries = if active.len() >= targets.len() {
        active
    } else {
        all = (0..n).collect();
        &all
    };
    let m = match_predictions(pred, targets, queries, w)?;
    let l_s = loss_semantic(&pred.semantic_logits, &targets.semantic, w)?;
    let (l_i, l_b) = match &targets.masks {
        Some(masks) if !m.pairs.is_empty() => {
            let q: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
            let g: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
            let gt_boxes: Vec<f64> = g.iter().flat_map(|&i| targets.boxes[i]).collect();
            let gt_boxes = Tensor::from_vec(gt_boxes, (g.len(), 4), pred.boxes.device())?
                .to_dtype(pred.boxes.dtype())?;
            (
                loss_instance(&rows(&pred.instance_logits, &q)?, &rows(masks, &g)?, w)?,
                loss_box(&rows(&pred.boxes, &q)?, &gt_boxes, w)?,
            )
        }
        _ => (zero(&pred.instance_logits)?, zero(&pred.boxes)?),
    };
    let num_classes = pred.num_classes()?;
    let labels: Vec<usize> = queries
        .iter()
        .map(|q| {
            m.pairs
                .iter()
                .find(|p| p.0 == *q)
                .map_or(num_classes, |p| targets.classes[p.1])
        })
        .collect();
    let l_c = loss_class(&rows(&pred.class_logits, queries)?, &labels, w)?;

    let terms = [
        (l_s * w.semantic)?,
        (l_i * w.instance)?,
        (l_b * w.boxes)?,
        (l_c * w.class)?,
    ];
    let report = LayerLoss {
        semantic: scalar(&terms[0])?,
        instance: scalar(&terms[1])?,
        boxes: scalar(&terms[2])?,
        class: scalar(&terms[3])?,
    };
    let total = ((&terms[0] + &terms[1])? + (&terms[2] + &terms[3])?)?;
    Ok((total, report, m))
}

/// Sum of [`layer_loss`] over every prediction set, each matched
/// independently.
pub fn total_loss(
    predictions: &[PredictionSet],
    active: &[Vec<usize>],
    targets: &Targets,
    w: &LossWeights,
) -> Result<(Tensor, LossReport)> {
    let mut total: Option<Tensor> = None;
    let mut report = LossReport::default();
    for (p, a) in predictions.iter().zip(active) {
        let (t, r, _) = layer_loss(p, a, targets, w)?;
        total = Some(match total {
            None => t,
            Some(acc) => (acc + t)?,
        });
        report.layers.push(r);
    }
    let total = total.ok_or_else(|| Error::Invalid("no prediction sets".into()))?;
    Ok((total, report))
}
