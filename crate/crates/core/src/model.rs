//! The full segmentation model: encoder, queries, decoder and heads.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{image_to_tensor, Encoder, EncoderConfig};
use crate::heads::Heads;
use crate::hqd::{DecoderOutput, HqdConfig, HybridQueryDecoder};
use crate::nn::{Linear, ParamBuilder, ParamStore};
use crate::queries::{embed_class_names, init_instance_queries, EmbedderRegistry, TextEmbedder};
use crate::raster::RgbImage;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub stem_channels: usize,
    pub heads: usize,
    pub attention_levels: usize,
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub t_max: f64,
    pub iqs_enabled: bool,
    pub query_interaction: bool,
    pub masked_attention: bool,
    pub embedder: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            stem_channels: 32,
            heads: 4,
            attention_levels: 3,
            num_queries: 24,
            decoder_layers: 4,
            t_max: 0.01,
            iqs_enabled: true,
            query_interaction: true,
            masked_attention: true,
            embedder: crate::queries::DEFAULT_EMBEDDER.to_string(),
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.channels,
            stem_channels: self.stem_channels,
            heads: self.heads,
            attention_levels: self.attention_levels,
        }
    }

    pub fn decoder(&self) -> HqdConfig {
        HqdConfig {
            layers: self.decoder_layers,
            levels: 4,
            heads: self.heads,
            t_max: self.t_max,
            iqs_enabled: self.iqs_enabled,
            query_interaction: self.query_interaction,
            masked_attention: self.masked_attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 4 != 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels ({}) must be a positive multiple of 4 and of heads ({})",
                self.channels, self.heads
            )));
        }
        if self.num_queries == 0 {
            return Err(Error::Config("num_queries must be at least 1".into()));
        }
        self.decoder().validate()
    }
}

#[derive(Debug)]
pub struct ModelOutput {
    pub decoder: DecoderOutput,
    /// Stride-4 resolution of every mask in the output.
    pub mask_shape: (usize, usize),
}

pub struct DocSegModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub text_projection: Linear,
    pub instance_queries: Var,
    pub instance_pos: Var,
    pub heads: Heads,
    pub decoder: HybridQueryDecoder,
    pub embedder: Arc<dyn TextEmbedder>,
    pub dtype: DType,
    pub device: Device,
}

impl std::fmt::Debug for DocSegModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DocSegModel")
            .field("config", &self.config)
            .field("parameters", &self.params.num_parameters())
            .finish()
    }
}

impl DocSegModel {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::with_registry(config, seed, dtype, &EmbedderRegistry::default())
    }

    pub fn with_registry(config: ModelConfig, seed: u64, dtype: DType, registry: &EmbedderRegistry) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let embedder = registry.create(&config.embedder)?;
        let pb = ParamBuilder::new(seed, dtype, &device);
        let c = config.channels;
        let n = config.num_queries;
        let encoder = Encoder::new(&pb.pp("encoder"), config.encoder())?;
        let text_projection = Linear::new(&pb.pp("text_projection"), embedder.embed_dim(), c)?;
        let instance_queries = pb.from_values(
            "instance_queries",
            &[n, c],
            init_instance_queries(n, c, seed.wrapping_add(0x9e37_79b9)),
        )?;
        let instance_pos = pb.normal("instance_pos", &[n, c], 1.0)?;
        let heads = Heads::new(&pb.pp("heads"), c)?;
        let decoder = HybridQueryDecoder::new(&pb.pp("decoder"), c, config.decoder())?;
        Ok(Self {
            params: pb.into_store(),
            config,
            encoder,
            text_projection,
            instance_queries,
            instance_pos,
            heads,
            decoder,
            embedder,
            dtype,
            device,
        })
    }

    /// Semantic queries for `class_names`, `(M, C)`.
    pub fn semantic_queries(&self, class_names: &[String]) -> Result<Tensor> {
        embed_class_names(class_names, self.embedder.as_ref(), &self.text_projection)
    }

    /// `image` is `(1, 3, H, W)` with sides that are multiples of 32.
    pub fn forward(&self, image: &Tensor, class_names: &[String]) -> Result<ModelOutput> {
        let semantic = self.semantic_queries(class_names)?;
        let features = self.encoder.encode(image)?;
        let mask = self.encoder.fuse(&features)?;
        let decoder = self.decoder.forward(
            &semantic,
            self.instance_queries.as_tensor(),
            self.instance_pos.as_tensor(),
            &features,
            &mask,
            &self.heads,
        )?;
        Ok(ModelOutput {
            decoder,
            mask_shape: mask.spatial_shape,
        })
    }

    pub fn forward_image(&self, image: &RgbImage, class_names: &[String]) -> Result<ModelOutput> {
        self.forward(&image_to_tensor(image, self.dtype, &self.device)?, class_names)
    }

    /// Copies parameter values from `other`, which must have the same
    /// names and shapes.
    pub fn load_params(&self, values: &ParamStore) -> Result<()> {
        for (name, var) in &self.params.vars {
            let src = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.as_tensor().to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = values.vars.keys().find(|k| !self.params.vars.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}
