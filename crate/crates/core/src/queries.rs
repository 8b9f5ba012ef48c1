//! Semantic queries from class-name text, and learnable instance queries.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::nn::Linear;
use crate::{Error, Result};

/// Maps a class name to a fixed vector. Implementations must be
/// deterministic; embeddings are never trained.
pub trait TextEmbedder: Send + Sync {
    fn embed_dim(&self) -> usize;
    fn embed(&self, name: &str) -> Vec<f64>;
}

/// Bag of hashed character trigrams over `^name$`. Each trigram owns a
/// Gaussian vector drawn from a generator keyed by the trigram hash, so the
/// embedding does not depend on any corpus.
#[derive(Debug, Clone)]
pub struct HashedTrigramEmbedder {
    pub dim: usize,
    pub seed: u64,
}

pub const TRIGRAM_SEED: u64 = 0x5eed_7e47_0000_0384;

impl Default for HashedTrigramEmbedder {
    fn default() -> Self {
        Self {
            dim: 384,
            seed: TRIGRAM_SEED,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl TextEmbedder for HashedTrigramEmbedder {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, name: &str) -> Vec<f64> {
        let chars: Vec<char> = std::iter::once('^')
            .chain(name.chars())
            .chain(std::iter::once('$'))
            .collect();
        let mut out = vec![0.0; self.dim];
        for tri in chars.windows(3) {
            let s: String = tri.iter().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(s.as_bytes()));
            for v in out.iter_mut() {
                let x: f64 = StandardNormal.sample(&mut rng);
                *v += x;
            }
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|v| *v /= norm);
        }
        out
    }
}

type Factory = Box<dyn Fn() -> Arc<dyn TextEmbedder> + Send + Sync>;

/// Embedders selectable by name from configuration.
pub struct EmbedderRegistry {
    factories: BTreeMap<String, Factory>,
}

pub const DEFAULT_EMBEDDER: &str = "hashed-trigram";

impl Default for EmbedderRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register(DEFAULT_EMBEDDER, || {
            Arc::new(HashedTrigramEmbedder::default()) as Arc<dyn TextEmbedder>
        });
        r
    }
}

impl EmbedderRegistry {
    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn() -> Arc<dyn TextEmbedder> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn create(&self, name: &str) -> Result<Arc<dyn TextEmbedder>> {
        self.factories.get(name).map(|f| f()).ok_or_else(|| {
            Error::Config(format!(
                "unknown text embedder `{name}` (registered: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }
}

/// Checks that `names` is non-empty and free of duplicates.
pub fn check_names(names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(Error::NoClasses);
    }
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::DuplicateClass(n.clone()));
        }
    }
    Ok(())
}

/// Raw embeddings as an `(M, embed_dim)` constant tensor.
pub fn embedding_matrix(
    names: &[String],
    embedder: &dyn TextEmbedder,
    projection: &Linear,
) -> Result<Tensor> {
    check_names(names)?;
    let w = projection.weight.as_tensor();
    let d = embedder.embed_dim();
    if w.dim(1)? != d {
        return Err(Error::Shape(format!(
            "projection expects {} inputs, embedder produces {d}",
            w.dim(1)?
        )));
    }
    let values: Vec<f64> = names.iter().flat_map(|n| embedder.embed(n)).collect();
    Ok(Tensor::from_vec(values, (names.len(), d), &Device::Cpu)?.to_dtype(w.dtype())?)
}

/// Semantic queries `(M, C)`: frozen text embeddings through the shared
/// learnable projection.
pub fn embed_class_names(
    names: &[String],
    embedder: &dyn TextEmbedder,
    projection: &Linear,
) -> Result<Tensor> {
    projection.forward(&embedding_matrix(names, embedder, projection)?)
}

pub const INSTANCE_QUERY_STD: f64 = 0.02;

/// `N x C` values from a zero-mean normal with standard deviation 0.02.
pub fn init_instance_queries(n: usize, c: usize, seed: u64) -> Vec<f64> {
    assert!(n >= 1, "at least one instance query");
    let dist = Normal::new(0.0, INSTANCE_QUERY_STD).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * c).map(|_| dist.sample(&mut rng)).collect()
}

/// Queries entering the decoder.
#[derive(Debug, Clone)]
pub struct QuerySet {
    /// `(M, C)`, row `i` for `class_names[i]`.
    pub semantic: Tensor,
    /// `(N, C)`.
    pub instance: Tensor,
    pub class_names: Vec<String>,
}
