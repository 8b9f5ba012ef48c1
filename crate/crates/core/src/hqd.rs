//! Hybrid query decoder.
//!
//! Each layer runs a joint self-attention block over `[Q_S; Q_I]`, two
//! independent multi-scale decoders (one per query kind) that visit the
//! feature levels coarsest first, and a second joint block. Cross-attention
//! is restricted to the previous layer's predicted masks, and instance
//! queries whose class score falls below a per-layer threshold are frozen
//! for that layer.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{MaskFeature, MultiScaleFeatures};
use crate::heads::{Heads, PredictionSet};
use crate::nn::{sine_position_encoding, sigmoid, to_f64_vec, LayerNorm, Mlp, MultiHeadAttention, ParamBuilder};
use crate::{Error, Result};

pub const MASKED_BIAS: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HqdConfig {
    /// Number of decoder layers `K`.
    pub layers: usize,
    /// Feature levels visited by each multi-scale decoder.
    pub levels: usize,
    pub heads: usize,
    pub t_max: f64,
    pub iqs_enabled: bool,
    pub query_interaction: bool,
    pub masked_attention: bool,
}

impl Default for HqdConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            levels: 4,
            heads: 4,
            t_max: 0.01,
            iqs_enabled: true,
            query_interaction: true,
            masked_attention: true,
        }
    }
}

impl HqdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.levels != 4 {
            return Err(Error::Config(format!(
                "decoder must visit 4 feature levels, got {}",
                self.levels
            )));
        }
        if !(0.0..1.0).contains(&self.t_max) {
            return Err(Error::Config(format!("t_max {} outside [0, 1)", self.t_max)));
        }
        Ok(())
    }

    /// `T_k = T_max / 2^(K - k)` for `k` in `1..=K`.
    pub fn threshold(&self, k: usize) -> f64 {
        assert!((1..=self.layers).contains(&k), "layer {k} outside 1..={}", self.layers);
        self.t_max / 2f64.powi((self.layers - k) as i32)
    }

    pub fn thresholds(&self) -> Vec<f64> {
        (1..=self.layers).map(|k| self.threshold(k)).collect()
    }
}

/// Indices of instance queries active at layer `k`, ascending. A zero
/// threshold keeps every query.
pub fn select_instance_queries(scores: &[f64], k: usize, config: &HqdConfig) -> Vec<usize> {
    if !config.iqs_enabled {
        return (0..scores.len()).collect();
    }
    let t = config.threshold(k);
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| if t == 0.0 { s >= t } else { s > t })
        .map(|(i, _)| i)
        .collect()
}

/// Per-query attention masks, one `(M + N, H_l * W_l)` tensor per level
/// holding 1 where attention is allowed.
#[derive(Debug, Clone)]
pub struct AttentionMasks {
    pub levels: Vec<Tensor>,
}

impl AttentionMasks {
    pub fn open(rows: usize, spatial_shapes: &[(usize, usize)], dtype: DType, device: &Device) -> Result<Self> {
        let levels = spatial_shapes
            .iter()
            .map(|&(h, w)| Ok(Tensor::ones((rows, h * w), dtype, device)?))
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    pub fn to_bools(&self, level: usize) -> Result<Vec<Vec<bool>>> {
        let (r, n) = self.levels[level].dims2()?;
        let v = to_f64_vec(&self.levels[level])?;
        Ok((0..r).map(|i| v[i * n..(i + 1) * n].iter().map(|&x| x > 0.5).collect()).collect())
    }

    fn bias(&self, level: usize, rows: Option<&Tensor>) -> Result<Tensor> {
        let m = match rows {
            Some(idx) => self.levels[level].index_select(idx, 0)?,
            None => self.levels[level].clone(),
        };
        Ok(m.affine(-MASKED_BIAS, MASKED_BIAS)?)
    }
}

/// Masks from previous predictions: probabilities are box-averaged to each
/// level and thresholded at 0.5. A query whose mask is empty at a level
/// attends everywhere at that level.
pub fn masked_attention_masks(
    previous: &PredictionSet,
    spatial_shapes: &[(usize, usize)],
) -> Result<AttentionMasks> {
    let (mh, mw) = previous.spatial_shape;
    let logits = Tensor::cat(&[&previous.semantic_logits, &previous.instance_logits], 0)?.detach();
    let rows = logits.dim(0)?;
    let probs = to_f64_vec(&sigmoid(&logits)?)?;
    let dtype = logits.dtype();
    let device = logits.device().clone();
    let mut levels = Vec::with_capacity(spatial_shapes.len());
    for &(h, w) in spatial_shapes {
        if mh % h != 0 || mw % w != 0 {
            return Err(Error::Shape(format!(
                "mask of {mh}x{mw} cannot be pooled to level {h}x{w}"
            )));
        }
        let (fy, fx) = (mh / h, mw / w);
        let mut out = Vec::with_capacity(rows * h * w);
        for r in 0..rows {
            let p = &probs[r * mh * mw..(r + 1) * mh * mw];
            let start = out.len();
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for dy in 0..fy {
                        let row = (y * fy + dy) * mw + x * fx;
                        s += p[row..row + fx].iter().sum::<f64>();
                    }
                    out.push(if s / (fy * fx) as f64 >= 0.5 { 1.0 } else { 0.0 });
                }
            }
            if out[start..].iter().all(|&v| v == 0.0) {
                out[start..].iter_mut().for_each(|v| *v = 1.0);
            }
        }
        levels.push(Tensor::from_vec(out, (rows, h * w), &device)?.to_dtype(dtype)?);
    }
    Ok(AttentionMasks { levels })
}

/// Decoder inputs derived once per image from the encoder output.
#[derive(Debug, Clone)]
pub struct DecoderMemory {
    /// Attention values, coarsest first.
    pub values: Vec<Tensor>,
    /// Values plus sine position encoding and level embedding.
    pub keys: Vec<Tensor>,
    pub spatial_shapes: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct AttentionSublayer {
    norm: LayerNorm,
    attn: MultiHeadAttention,
}

impl AttentionSublayer {
    fn new(pb: &ParamBuilder, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&pb.pp("norm"), c)?,
            attn: MultiHeadAttention::new(&pb.pp("attn"), c, heads)?,
        })
    }

    fn self_attend(&self, x: &Tensor, pos: &Tensor) -> Result<Tensor> {
        let h = self.norm.forward(x)?;
        let qk = (&h + pos)?;
        Ok((x + self.attn.forward(&qk, &qk, &h, None)?)?)
    }

    fn cross_attend(&self, x: &Tensor, pos: &Tensor, key: &Tensor, value: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let h = self.norm.forward(x)?;
        let q = (&h + pos)?;
        Ok((x + self.attn.forward(&q, key, value, bias)?)?)
    }

    fn zero_output(&self) -> Result<()> {
        self.attn.out.zero()
    }
}

#[derive(Debug, Clone)]
struct FfnSublayer {
    norm: LayerNorm,
    ffn: Mlp,
}

impl FfnSublayer {
    fn new(pb: &ParamBuilder, c: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&pb.pp("norm"), c)?,
            ffn: Mlp::new(&pb.pp("ffn"), c, 2 * c, c)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.ffn.forward(&self.norm.forward(x)?)?)?)
    }
}

#[derive(Debug, Clone)]
struct JointBlock {
    attn: AttentionSublayer,
    ffn: FfnSublayer,
}

impl JointBlock {
    fn new(pb: &ParamBuilder, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: AttentionSublayer::new(&pb.pp("sa"), c, heads)?,
            ffn: FfnSublayer::new(&pb.pp("ffn"), c)?,
        })
    }

    fn forward(&self, x: &Tensor, pos: &Tensor) -> Result<Tensor> {
        self.ffn.forward(&self.attn.self_attend(x, pos)?)
    }

    fn zero_output(&self) -> Result<()> {
        self.attn.zero_output()?;
        self.ffn.ffn.fc2.zero()
    }
}

/// Two self-attention sublayers, masked cross-attention to one level, FFN.
#[derive(Debug, Clone)]
struct MsdLayer {
    sa1: AttentionSublayer,
    sa2: AttentionSublayer,
    ca: AttentionSublayer,
    ffn: FfnSublayer,
}

impl MsdLayer {
    fn new(pb: &ParamBuilder, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            sa1: AttentionSublayer::new(&pb.pp("sa1"), c, heads)?,
            sa2: AttentionSublayer::new(&pb.pp("sa2"), c, heads)?,
            ca: AttentionSublayer::new(&pb.pp("ca"), c, heads)?,
            ffn: FfnSublayer::new(&pb.pp("ffn"), c)?,
        })
    }

    fn forward(&self, x: &Tensor, pos: &Tensor, key: &Tensor, value: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let x = self.sa1.self_attend(x, pos)?;
        let x = self.sa2.self_attend(&x, pos)?;
        let x = self.ca.cross_attend(&x, pos, key, value, bias)?;
        self.ffn.forward(&x)
    }

    fn zero_output(&self) -> Result<()> {
        self.sa1.zero_output()?;
        self.sa2.zero_output()?;
        self.ca.zero_output()?;
        self.ffn.ffn.fc2.zero()
    }
}

/// Queries and masks entering a decoder layer.
#[derive(Debug, Clone)]
pub struct LayerState {
    /// `(M, C)`.
    pub semantic: Tensor,
    /// `(N, C)`.
    pub instance: Tensor,
    /// Learned positional embedding of each instance query, `(N, C)`.
    pub instance_pos: Tensor,
    pub masks: AttentionMasks,
    pub active_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct HqdLayer {
    joint1: JointBlock,
    joint2: JointBlock,
    semantic_msd: Vec<MsdLayer>,
    instance_msd: Vec<MsdLayer>,
}

fn index_tensor(ids: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, ids.len(), device)?)
}

impl HqdLayer {
    pub fn new(pb: &ParamBuilder, c: usize, config: &HqdConfig) -> Result<Self> {
        let msd = |name: &str| {
            (0..config.levels)
                .map(|l| MsdLayer::new(&pb.pp(format!("{name}{l}")), c, config.heads))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            joint1: JointBlock::new(&pb.pp("joint1"), c, config.heads)?,
            joint2: JointBlock::new(&pb.pp("joint2"), c, config.heads)?,
            semantic_msd: msd("semantic_msd")?,
            instance_msd: msd("instance_msd")?,
        })
    }

    /// Zeroes every residual branch's output projection.
    pub fn zero_output_projections(&self) -> Result<()> {
        self.joint1.zero_output()?;
        self.joint2.zero_output()?;
        for l in self.semantic_msd.iter().chain(&self.instance_msd) {
            l.zero_output()?;
        }
        Ok(())
    }

    /// Returns updated `(semantic, instance)` queries. Instance rows not in
    /// `state.active_ids` are returned unchanged.
    pub fn forward(
        &self,
        state: &LayerState,
        memory: &DecoderMemory,
        config: &HqdConfig,
    ) -> Result<(Tensor, Tensor)> {
        let (m, c) = state.semantic.dims2()?;
        let n = state.instance.dim(0)?;
        let device = state.semantic.device().clone();
        for (l, (t, &(h, w))) in state.masks.levels.iter().zip(&memory.spatial_shapes).enumerate() {
            if t.dims2()? != (m + n, h * w) {
                return Err(Error::Shape(format!(
                    "attention mask at level {l} is {:?}, expected ({}, {})",
                    t.dims(),
                    m + n,
                    h * w
                )));
            }
        }
        if state.masks.levels.len() != memory.spatial_shapes.len() {
            return Err(Error::Shape("attention masks and features disagree on level count".into()));
        }

        let all_active = state.active_ids.len() == n;
        let (instance, inst_pos, mask_rows) = if all_active {
            (state.instance.clone(), state.instance_pos.clone(), None)
        } else {
            let idx = index_tensor(&state.active_ids, &device)?;
            let rows: Vec<usize> = (0..m).chain(state.active_ids.iter().map(|&i| m + i)).collect();
            (
                state.instance.index_select(&idx, 0)?,
                state.instance_pos.index_select(&idx, 0)?,
                Some(index_tensor(&rows, &device)?),
            )
        };
        let na = state.active_ids.len();
        let sem_pos = Tensor::zeros((m, c), state.semantic.dtype(), &device)?;
        let joint_pos = if na > 0 { Tensor::cat(&[&sem_pos, &inst_pos], 0)? } else { sem_pos.clone() };

        let joint = |block: &JointBlock, s: &Tensor, i: &Tensor| -> Result<(Tensor, Tensor)> {
            if !config.query_interaction {
                return Ok((s.clone(), i.clone()));
            }
            let x = if na > 0 { Tensor::cat(&[s, i], 0)? } else { s.clone() };
            let y = block.forward(&x, &joint_pos)?;
            let s = y.narrow(0, 0, m)?;
            let i = if na > 0 { y.narrow(0, m, na)? } else { i.clone() };
            Ok((s, i))
        };

        let (mut sem, mut inst) = joint(&self.joint1, &state.semantic, &instance)?;
        for (l, (sl, il)) in self.semantic_msd.iter().zip(&self.instance_msd).enumerate() {
            let bias = if config.masked_attention {
                Some(state.masks.bias(l, mask_rows.as_ref())?)
            } else {
                None
            };
            let (key, value) = (&memory.keys[l], &memory.values[l]);
            let sem_bias = bias.as_ref().map(|b| b.narrow(0, 0, m)).transpose()?;
            sem = sl.forward(&sem, &sem_pos, key, value, sem_bias.as_ref())?;
            if na > 0 {
                let inst_bias = bias.as_ref().map(|b| b.narrow(0, m, na)).transpose()?;
                inst = il.forward(&inst, &inst_pos, key, value, inst_bias.as_ref())?;
            }
        }
        let (sem, inst) = joint(&self.joint2, &sem, &inst)?;

        let instance_out = if all_active {
            inst
        } else if na == 0 {
            state.instance.clone()
        } else {
            let pruned: Vec<usize> = (0..n).filter(|i| !state.active_ids.contains(i)).collect();
            let stacked = if pruned.is_empty() {
                inst
            } else {
                let frozen = state.instance.index_select(&index_tensor(&pruned, &device)?, 0)?;
                Tensor::cat(&[&inst, &frozen], 0)?
            };
            // Row r of the output lives at position `order[r]` of `stacked`.
            let mut order = vec![0usize; n];
            for (pos, &id) in state.active_ids.iter().chain(&pruned).enumerate() {
                order[id] = pos;
            }
            stacked.index_select(&index_tensor(&order, &device)?, 0)?
        };
        Ok((sem, instance_out))
    }
}

/// Outputs of the full decoder.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Predictions before the first layer followed by one per layer.
    pub predictions: Vec<PredictionSet>,
    /// Active instance ids per entry of `predictions`; entry 0 lists all.
    pub active_ids: Vec<Vec<usize>>,
    /// Selection thresholds applied at layers `1..=K`.
    pub thresholds: Vec<f64>,
}

impl DecoderOutput {
    pub fn last(&self) -> &PredictionSet {
        self.predictions.last().expect("at least one prediction set")
    }
}

#[derive(Debug, Clone)]
pub struct HybridQueryDecoder {
    pub config: HqdConfig,
    pub layers: Vec<HqdLayer>,
    level_embed: Var,
    channels: usize,
}

impl HybridQueryDecoder {
    pub fn new(pb: &ParamBuilder, c: usize, config: HqdConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|k| HqdLayer::new(&pb.pp(format!("layer{k}")), c, &config))
            .collect::<Result<_>>()?;
        Ok(Self {
            level_embed: pb.normal("level_embed", &[config.levels, c], 0.02)?,
            layers,
            config,
            channels: c,
        })
    }

    pub fn memory(&self, features: &MultiScaleFeatures) -> Result<DecoderMemory> {
        features.validate()?;
        if features.channels()? != self.channels {
            return Err(Error::Shape(format!(
                "features have {} channels, decoder expects {}",
                features.channels()?,
                self.channels
            )));
        }
        let mut keys = Vec::with_capacity(4);
        for (l, (v, &(h, w))) in features.levels.iter().zip(&features.spatial_shapes).enumerate() {
            let pos = sine_position_encoding(h, w, self.channels, v.dtype(), v.device())?;
            let embed = self.level_embed.as_tensor().narrow(0, l, 1)?;
            keys.push((v + pos)?.broadcast_add(&embed)?);
        }
        Ok(DecoderMemory {
            values: features.levels.clone(),
            keys,
            spatial_shapes: features.spatial_shapes.clone(),
        })
    }

    pub fn forward(
        &self,
        semantic: &Tensor,
        instance: &Tensor,
        instance_pos: &Tensor,
        features: &MultiScaleFeatures,
        mask_feature: &MaskFeature,
        heads: &Heads,
    ) -> Result<DecoderOutput> {
        let memory = self.memory(features)?;
        let x_m = &mask_feature.values;
        let shape = mask_feature.spatial_shape;
        let n = instance.dim(0)?;
        let mut preds = vec![heads.predict(semantic, instance, x_m, shape, None)?];
        let mut active = vec![(0..n).collect::<Vec<_>>()];
        let (mut sem, mut inst) = (semantic.clone(), instance.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let k = i + 1;
            let prev = preds.last().expect("non-empty");
            let masks = if self.config.masked_attention {
                masked_attention_masks(prev, &memory.spatial_shapes)?
            } else {
                AttentionMasks { levels: Vec::new() }
            };
            let ids = select_instance_queries(&prev.class_scores()?, k, &self.config);
            let state = LayerState {
                semantic: sem,
                instance: inst,
                instance_pos: instance_pos.clone(),
                masks: if self.config.masked_attention {
                    masks
                } else {
                    AttentionMasks::open(semantic.dim(0)? + n, &memory.spatial_shapes, x_m.dtype(), x_m.device())?
                },
                active_ids: ids.clone(),
            };
            let (s, q) = layer.forward(&state, &memory, &self.config)?;
            let p = heads.predict(&s, &q, x_m, shape, Some(&prev.boxes))?;
            preds.push(p);
            active.push(ids);
            sem = s;
            inst = q;
        }
        Ok(DecoderOutput {
            predictions: preds,
            active_ids: active,
            thresholds: self.config.thresholds(),
        })
    }
}
