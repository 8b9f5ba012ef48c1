//! Mixed-corpus training: dataset sampling, curriculum, crop augmentation
//! and the optimization loop.

mod augment;
mod optim;
mod sampler;

pub use augment::{crop_augment, resize_and_crop, AugmentConfig};
pub use optim::{accumulate, collect_grads, grad_norm, learning_rate, AdamW, Grads};
pub use sampler::{
    dataset_probabilities, iteration_rng, sample_batch, BatchItem, Curriculum, CurriculumEntry, Sampler,
};

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::datamodel::{DatasetSpec, SampleIndex};
use crate::encoder::image_to_tensor;
use crate::losses::{total_loss, LossReport, LossWeights, Targets};
use crate::model::{DocSegModel, ModelConfig};
use crate::nn::ParamStore;
use crate::{Error, Result};

/// Everything a run needs, read from a flat TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub crop_size: usize,
    pub short_side_min: usize,
    pub short_side_max: usize,
    pub whole_resize_prob: f64,
    /// `"<iteration>:<task group or dataset>"` entries.
    pub curriculum: Vec<String>,
    pub checkpoint_every: usize,
    pub train_split: String,
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 2000,
            batch_size: 4,
            base_lr: 5e-4,
            warmup_iters: 100,
            weight_decay: 0.05,
            grad_clip: 1.0,
            crop_size: 256,
            short_side_min: 288,
            short_side_max: 352,
            whole_resize_prob: 0.2,
            curriculum: Vec::new(),
            checkpoint_every: 500,
            train_split: "train".into(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let known = toml::Table::try_from(TrainConfig::default()).expect("default config serializes");
        if let Some(k) = table.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.crop_size % 32 != 0 || self.crop_size == 0 {
            return Err(Error::Config(format!("crop_size {} is not a positive multiple of 32", self.crop_size)));
        }
        if self.short_side_min > self.short_side_max || self.crop_size > self.short_side_min {
            return Err(Error::Config(format!(
                "need crop_size ({}) <= short_side_min ({}) <= short_side_max ({})",
                self.crop_size, self.short_side_min, self.short_side_max
            )));
        }
        if !(0.0..=1.0).contains(&self.whole_resize_prob) {
            return Err(Error::Config("whole_resize_prob must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Config("base_lr must be finite and non-negative".into()));
        }
        for e in &self.curriculum {
            e.parse::<CurriculumEntry>()?;
        }
        Ok(())
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            crop_size: self.crop_size,
            short_side_range: (self.short_side_min, self.short_side_max),
            whole_resize_prob: self.whole_resize_prob,
        }
    }

    pub fn curriculum_entries(&self) -> Result<Vec<CurriculumEntry>> {
        self.curriculum.iter().map(|e| e.parse()).collect()
    }
}

/// Builds the model described by a checkpoint's config snapshot and loads
/// its parameters.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(TrainConfig, DocSegModel)> {
    let cfg = TrainConfig::parse(&ckpt.config)?;
    let model = DocSegModel::new(cfg.model.clone(), cfg.seed, DType::F32)?;
    let store = ParamStore {
        vars: ckpt
            .params
            .iter()
            .map(|(k, t)| Ok((k.clone(), candle_core::Var::from_tensor(t)?)))
            .collect::<Result<_>>()?,
    };
    model.load_params(&store)?;
    Ok((cfg, model))
}

pub fn checkpoint_of(cfg: &TrainConfig, model: &DocSegModel, iteration: usize, opt: Option<&AdamW>) -> Checkpoint {
    Checkpoint {
        format_version: FORMAT_VERSION,
        config: cfg.to_toml(),
        iteration: iteration as u64,
        params: model
            .params
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect(),
        optimizer: opt.map(AdamW::state),
    }
}

/// Per-iteration record, also written as one log line.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lr: f64,
    pub report: LossReport,
    pub grad_norm: f64,
    pub groups: Vec<String>,
    pub batch: Vec<String>,
}

impl IterationRecord {
    pub fn log_line(&self) -> String {
        format!(
            "iter={} lr={:.8} {} grad_norm={:.6} groups={} batch={}",
            self.iteration,
            self.lr,
            self.report,
            self.grad_norm,
            self.groups.join(","),
            self.batch.join(",")
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: DocSegModel,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub records: Vec<IterationRecord>,
}

pub const LOG_FILE: &str = "train.log";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

/// Latest intermediate checkpoint in `out_dir`, if any.
pub fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    let dir = checkpoint_dir(out_dir);
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    files.sort();
    files.pop()
}

/// Training datasets from a loaded corpus.
pub fn training_sampler(corpus: &[(Arc<DatasetSpec>, SampleIndex)], split: &str) -> Result<Sampler> {
    Sampler::new(corpus.iter().map(|(_, idx)| idx.split(split)).collect())
}

/// Runs (or resumes) training into `out_dir`. Resuming starts from the
/// final checkpoint if there is one, so a finished run is not repeated.
/// `on_iteration` sees every record as it is logged.
pub fn train(
    cfg: &TrainConfig,
    corpus: &[(Arc<DatasetSpec>, SampleIndex)],
    out_dir: &Path,
    resume: bool,
    on_iteration: &mut dyn FnMut(&IterationRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sampler = training_sampler(corpus, &cfg.train_split)?;
    let specs = sampler.specs();
    let curriculum = Curriculum::new(cfg.curriculum_entries()?, &specs)?;
    std::fs::create_dir_all(checkpoint_dir(out_dir)).map_err(|e| Error::io(out_dir, e))?;

    let model = DocSegModel::new(cfg.model.clone(), cfg.seed, DType::F32)?;
    let mut opt = AdamW::new(&model.params, cfg.weight_decay)?;
    let mut start = 0;
    let log_path = out_dir.join(LOG_FILE);
    let mut kept_lines = Vec::new();
    if resume {
        let finished = out_dir.join(FINAL_CHECKPOINT);
        let from = if finished.is_file() { Some(finished) } else { latest_checkpoint(out_dir) };
        if let Some(path) = from {
            let ckpt = Checkpoint::load(&path)?;
            let (saved_cfg, saved) = model_from_checkpoint(&ckpt)?;
            if saved_cfg != *cfg {
                return Err(Error::Config(format!(
                    "{} was written with a different configuration",
                    path.display()
                )));
            }
            model.load_params(&saved.params)?;
            if let Some(state) = &ckpt.optimizer {
                opt.restore(state)?;
            }
            start = ckpt.iteration as usize;
            if let Ok(text) = std::fs::read_to_string(&log_path) {
                kept_lines = text
                    .lines()
                    .filter(|l| match l.strip_prefix("iter=") {
                        Some(rest) => rest
                            .split(' ')
                            .next()
                            .and_then(|n| n.parse::<usize>().ok())
                            .is_some_and(|n| n < start),
                        None => !l.starts_with("# resumed"),
                    })
                    .map(str::to_string)
                    .collect();
            }
        }
    }
    if kept_lines.is_empty() {
        kept_lines.push("# config".to_string());
        kept_lines.extend(cfg.to_toml().lines().map(|l| format!("#   {l}")));
        let t: Vec<String> = cfg.model.decoder().thresholds().iter().map(|t| t.to_string()).collect();
        kept_lines.push(format!("# iqs_thresholds={}", t.join(",")));
    } else {
        kept_lines.push(format!("# resumed at iteration {start}"));
    }
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    for l in &kept_lines {
        writeln!(log, "{l}").map_err(|e| Error::io(&log_path, e))?;
    }

    let class_names: Vec<Vec<String>> = sampler.datasets.iter().map(|d| d.dataset.class_names.clone()).collect();
    let aug = cfg.augment();
    let mut records = Vec::new();
    for it in start..cfg.iterations {
        let mut rng = iteration_rng(cfg.seed, it as u64);
        let active = curriculum.active(it, &specs);
        let probs = dataset_probabilities(&sampler.class_counts(), &active)?;
        let items = sampler.draw(&probs, cfg.batch_size, &mut rng)?;
        let labels: Vec<String> = items.iter().map(|&i| sampler.label(i)).collect();
        let lr = learning_rate(it, cfg.iterations, cfg.warmup_iters, cfg.base_lr);

        let b = items.len() as f64;
        let mut grads = Grads::new();
        let mut report = LossReport::default();
        for &item in &items {
            let sample = crop_augment(&sampler.load(item)?, &aug, &mut rng);
            let image = image_to_tensor(&sample.image, model.dtype, &model.device)?;
            let out = model.forward(&image, &class_names[item.dataset])?;
            let targets = Targets::from_sample(&sample, out.mask_shape, model.dtype, &model.device)?;
            let (loss, r) = total_loss(&out.decoder.predictions, &out.decoder.active_ids, &targets, &cfg.loss)?;
            if !r.total().is_finite() {
                let _ = writeln!(log, "# non-finite loss at iteration {it}; batch {}", labels.join(","));
                return Err(Error::NonFiniteLoss {
                    iteration: it,
                    batch: labels.join(","),
                });
            }
            report.add(&r);
            accumulate(&mut grads, collect_grads(&model.params, &loss.backward()?), 1.0 / b)?;
        }
        report.scale(1.0 / b);
        let norm = grad_norm(&grads)?;
        let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            cfg.grad_clip / (norm + 1e-6)
        } else {
            1.0
        };
        opt.update(&model.params, &grads, lr, scale)?;

        let groups: BTreeSet<String> = specs
            .iter()
            .zip(&active)
            .filter(|(_, &a)| a)
            .map(|(d, _)| d.task_group.to_string())
            .collect();
        let record = IterationRecord {
            iteration: it,
            lr,
            report,
            grad_norm: norm,
            groups: groups.into_iter().collect(),
            batch: labels,
        };
        writeln!(log, "{}", record.log_line()).map_err(|e| Error::io(&log_path, e))?;
        on_iteration(&record);
        records.push(record);

        let done = it + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.iterations {
            let path = checkpoint_dir(out_dir).join(format!("iter-{done:08}.ckpt"));
            checkpoint_of(cfg, &model, done, Some(&opt)).save(&path)?;
        }
    }
    let path = out_dir.join(FINAL_CHECKPOINT);
    checkpoint_of(cfg, &model, cfg.iterations.max(start), Some(&opt)).save(&path)?;
    Ok(TrainOutcome {
        model,
        checkpoint: path,
        log: log_path,
        records,
    })
}

/// Iteration lines of a training log.
pub fn log_iterations(text: &str) -> Vec<&str> {
    text.lines().filter(|l| l.starts_with("iter=")).collect()
}

/// Extracts `key=value` from a log line.
pub fn log_field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let mut prefix = String::new();
    let _ = write!(prefix, "{key}=");
    line.split(' ').find_map(|f| f.strip_prefix(prefix.as_str()))
}
