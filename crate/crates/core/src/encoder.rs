//! Convolutional pyramid encoder with per-level self-attention and a
//! top-down fusion path producing the stride-4 mask feature.

use std::collections::HashMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{sine_position_encoding, Conv2d, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamBuilder};
use crate::raster::RgbImage;
use crate::{Error, Result};

/// Strides of the four levels, coarsest first.
pub const LEVEL_STRIDES: [usize; 4] = [32, 16, 8, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: usize,
    pub stem_channels: usize,
    pub heads: usize,
    /// Levels (counted from the coarsest) that get a self-attention block.
    pub attention_levels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            stem_channels: 32,
            heads: 4,
            attention_levels: 3,
        }
    }
}

/// Four feature levels, coarsest first; level `l` is `(H_l * W_l, C)`.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub levels: Vec<Tensor>,
    pub spatial_shapes: Vec<(usize, usize)>,
}

impl MultiScaleFeatures {
    pub fn channels(&self) -> Result<usize> {
        Ok(self.levels[0].dim(1)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != 4 || self.spatial_shapes.len() != 4 {
            return Err(Error::Shape(format!(
                "expected 4 feature levels, got {}",
                self.levels.len()
            )));
        }
        let c = self.channels()?;
        for (l, (t, &(h, w))) in self.levels.iter().zip(&self.spatial_shapes).enumerate() {
            let (n, ch) = t.dims2()?;
            if ch != c {
                return Err(Error::Shape(format!(
                    "level {l} has {ch} channels, level 0 has {c}"
                )));
            }
            if n != h * w {
                return Err(Error::Shape(format!(
                    "level {l} has {n} tokens for spatial shape {h}x{w}"
                )));
            }
            if l > 0 {
                let (ph, pw) = self.spatial_shapes[l - 1];
                if h != 2 * ph || w != 2 * pw {
                    return Err(Error::Shape(format!(
                        "level {l} ({h}x{w}) is not twice level {} ({ph}x{pw})",
                        l - 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fused stride-4 feature, `(H * W, C)`.
#[derive(Debug, Clone)]
pub struct MaskFeature {
    pub values: Tensor,
    pub spatial_shape: (usize, usize),
}

#[derive(Debug, Clone)]
struct AttentionBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: Mlp,
}

impl AttentionBlock {
    fn new(pb: &ParamBuilder, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&pb.pp("norm1"), c)?,
            attn: MultiHeadAttention::new(&pb.pp("attn"), c, heads)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), c)?,
            ffn: Mlp::new(&pb.pp("ffn"), c, 2 * c, c)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, &h, None)?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

#[derive(Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    stem: Conv2d,
    /// Stride-2 downsampling stages, finest first (strides 4, 8, 16, 32).
    stages: Vec<Conv2d>,
    refine: Vec<Conv2d>,
    /// Projects the fixed position encoding into each level, coarsest first.
    position: Vec<Linear>,
    /// Self-attention blocks for the coarsest `attention_levels` levels.
    attention: Vec<AttentionBlock>,
    /// Output norm of each level, coarsest first.
    level_norm: Vec<LayerNorm>,
    /// Lateral 1x1 projections, coarsest first.
    lateral: Vec<Conv2d>,
    /// Output 3x3 convolutions after each top-down merge.
    smooth: Vec<Conv2d>,
    mask_proj: Conv2d,
    mask_norm: LayerNorm,
    pos_cache: Mutex<HashMap<(usize, usize), Tensor>>,
    dtype: DType,
    device: Device,
}

fn gelu(x: Tensor) -> Result<Tensor> {
    Ok(x.gelu()?)
}

impl Encoder {
    pub fn new(pb: &ParamBuilder, config: EncoderConfig) -> Result<Self> {
        let c = config.channels;
        let s = config.stem_channels;
        let stem = Conv2d::new(&pb.pp("stem"), 3, s, 3, 2)?;
        let mut stages = Vec::new();
        let mut refine = Vec::new();
        for i in 0..4 {
            let in_ch = if i == 0 { s } else { c };
            stages.push(Conv2d::new(&pb.pp(format!("stage{i}")), in_ch, c, 3, 2)?);
            refine.push(Conv2d::new(&pb.pp(format!("refine{i}")), c, c, 3, 1)?);
        }
        let mut position = Vec::new();
        let mut lateral = Vec::new();
        let mut smooth = Vec::new();
        let mut level_norm = Vec::new();
        for l in 0..4 {
            level_norm.push(LayerNorm::new(&pb.pp(format!("level_norm{l}")), c)?);
            position.push(Linear::new_with_std(&pb.pp(format!("pos{l}")), c, c, 0.1)?);
            lateral.push(Conv2d::new(&pb.pp(format!("lateral{l}")), c, c, 1, 1)?);
            smooth.push(Conv2d::new(&pb.pp(format!("smooth{l}")), c, c, 3, 1)?.replicate_padding());
        }
        let attention = (0..config.attention_levels.min(4))
            .map(|l| AttentionBlock::new(&pb.pp(format!("attn{l}")), c, config.heads))
            .collect::<Result<_>>()?;
        let mask_proj = Conv2d::new(&pb.pp("mask_proj"), c, c, 1, 1)?;
        let mask_norm = LayerNorm::new(&pb.pp("mask_norm"), c)?;
        Ok(Self {
            config,
            stem,
            stages,
            refine,
            position,
            attention,
            level_norm,
            lateral,
            smooth,
            mask_proj,
            mask_norm,
            pos_cache: Mutex::new(HashMap::new()),
            dtype: pb.dtype,
            device: pb.device.clone(),
        })
    }

    pub fn position_encoding(&self, h: usize, w: usize) -> Result<Tensor> {
        let mut cache = self.pos_cache.lock().expect("position cache poisoned");
        if let Some(t) = cache.get(&(h, w)) {
            return Ok(t.clone());
        }
        let t = sine_position_encoding(h, w, self.config.channels, self.dtype, &self.device)?;
        cache.insert((h, w), t.clone());
        Ok(t)
    }

    /// `image` is `(1, 3, H, W)` with both sides multiples of 32.
    pub fn encode(&self, image: &Tensor) -> Result<MultiScaleFeatures> {
        let (_, _, h, w) = image.dims4()?;
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::NotPadded {
                height: h,
                width: w,
            });
        }
        let c = self.config.channels;
        let mut x = gelu(self.stem.forward(image)?)?;
        let mut fine_to_coarse = Vec::with_capacity(4);
        for (stage, refine) in self.stages.iter().zip(&self.refine) {
            x = gelu(stage.forward(&x)?)?;
            x = (&x + gelu(refine.forward(&x)?)?)?;
            fine_to_coarse.push(x.clone());
        }
        let mut levels = Vec::with_capacity(4);
        let mut shapes = Vec::with_capacity(4);
        for (l, fmap) in fine_to_coarse.iter().rev().enumerate() {
            let (_, _, lh, lw) = fmap.dims4()?;
            let tokens = fmap.reshape((c, lh * lw))?.t()?;
            let pos = self.position[l].forward(&self.position_encoding(lh, lw)?)?;
            let mut t = (tokens + pos)?;
            if let Some(block) = self.attention.get(l) {
                t = block.forward(&t)?;
            }
            levels.push(self.level_norm[l].forward(&t)?);
            shapes.push((lh, lw));
        }
        Ok(MultiScaleFeatures {
            levels,
            spatial_shapes: shapes,
        })
    }

    /// Top-down fusion: each coarser map is upsampled x2 and added to the
    /// lateral projection of the next finer level.
    pub fn fuse(&self, features: &MultiScaleFeatures) -> Result<MaskFeature> {
        features.validate()?;
        let c = self.config.channels;
        if features.channels()? != c {
            return Err(Error::Shape(format!(
                "features have {} channels, encoder expects {c}",
                features.channels()?
            )));
        }
        let as_map = |t: &Tensor, (h, w): (usize, usize)| -> Result<Tensor> {
            Ok(t.t()?.contiguous()?.reshape((1, c, h, w))?)
        };
        let mut y: Option<Tensor> = None;
        for l in 0..4 {
            let shape = features.spatial_shapes[l];
            let lat = self.lateral[l].forward(&as_map(&features.levels[l], shape)?)?;
            let merged = match y {
                None => lat,
                Some(prev) => (prev.upsample_nearest2d(shape.0, shape.1)? + lat)?,
            };
            y = Some(gelu(self.smooth[l].forward(&merged)?)?);
        }
        let y = self.mask_proj.forward(&y.expect("four levels"))?;
        let (h, w) = features.spatial_shapes[3];
        Ok(MaskFeature {
            values: self.mask_norm.forward(&y.reshape((c, h * w))?.t()?.contiguous()?)?,
            spatial_shape: (h, w),
        })
    }
}

/// Converts an image to a normalized `(1, 3, H, W)` tensor.
pub fn image_to_tensor(image: &RgbImage, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = (image.height, image.width);
    let mut chw = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = image.pixel(y, x);
            for ch in 0..3 {
                chw[ch * h * w + y * w + x] = (p[ch] - 0.5) / 0.25;
            }
        }
    }
    Ok(Tensor::from_vec(chw, (1, 3, h, w), device)?.to_dtype(dtype)?)
}
