//! Criteria that need the overfit checkpoint: the run itself, query
//! selection, the open-set contract and merging.

use std::cell::OnceCell;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use candle_core::DType;
use docseg::checkpoint::Checkpoint;
use docseg::datamodel::{generate_synthetic_corpus, load_corpus, DatasetSpec, SampleIndex, SynthRecipe};
use docseg::inference::{
    merge_and_nms, predict, predict_patches, predict_whole, DetectedInstance, InferenceConfig, NmsMode, Prediction,
    Source, TileGrid,
};
use docseg::metrics::{evaluate_split, MetricReport};
use docseg::model::DocSegModel;
use docseg::raster::{BBox, Mask, RgbImage};
use docseg::training::{log_field, log_iterations, model_from_checkpoint, train, TrainConfig, LOG_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const RECIPE: &str = include_str!("../../configs/overfit_recipe.toml");
const CONFIG: &str = include_str!("../../configs/overfit_train.toml");
const MAX_ITERATIONS: usize = 2000;
const MAX_CPU_SECONDS: f64 = 4.0 * 3600.0;
const TIME_FILE: &str = "train_seconds";

type Corpus = Vec<(Arc<DatasetSpec>, SampleIndex)>;

struct Trained {
    dir: PathBuf,
    corpus: Corpus,
    config: TrainConfig,
    model: DocSegModel,
    train_seconds: f64,
}

pub struct Overfit {
    trained: OnceCell<Result<Trained, String>>,
}

fn train_overfit(dir: &Path) -> docseg::Result<Trained> {
    let recipe = SynthRecipe::parse(RECIPE)?;
    let config = TrainConfig::parse(CONFIG)?;
    let corpus_dir = dir.join("corpus");
    generate_synthetic_corpus(config.seed, &recipe, &corpus_dir)?;
    let corpus = load_corpus(&corpus_dir)?;
    let run_dir = dir.join("train");
    let time_path = dir.join(TIME_FILE);
    let before: f64 = std::fs::read_to_string(&time_path)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(0.0);
    let start = Instant::now();
    let outcome = train(&config, &corpus, &run_dir, true, &mut |r| {
        if r.iteration % 100 == 0 || r.iteration + 1 == config.iterations {
            println!("    {:7.0}s iter={} {}", start.elapsed().as_secs_f64(), r.iteration, r.report);
        }
    })?;
    let train_seconds = before + start.elapsed().as_secs_f64();
    std::fs::write(&time_path, format!("{train_seconds}\n")).expect("work directory is writable");
    let (saved, model) = model_from_checkpoint(&Checkpoint::load(&outcome.checkpoint)?)?;
    if saved != config {
        return Err(docseg::Error::Config("checkpoint config differs from the overfit config".into()));
    }
    Ok(Trained {
        dir: run_dir,
        corpus,
        config,
        model,
        train_seconds,
    })
}

fn images(corpus: &Corpus, split: &str, per_dataset: usize) -> Vec<(Vec<String>, RgbImage)> {
    let mut out = Vec::new();
    for (spec, index) in corpus {
        let sub = index.split(split);
        for i in 0..sub.len().min(per_dataset) {
            out.push((spec.class_names.clone(), sub.load(i).expect("corpus sample loads").image));
        }
    }
    out
}

fn same_except_source(a: &DetectedInstance, b: &DetectedInstance) -> bool {
    a.class_index == b.class_index && a.score.to_bits() == b.score.to_bits() && a.mask == b.mask && a.bbox == b.bbox
}

fn random_detections(rng: &mut ChaCha8Rng) -> Vec<DetectedInstance> {
    let n = rng.random_range(0..25);
    (0..n)
        .map(|_| {
            let (y0, x0) = (rng.random_range(0..20), rng.random_range(0..20));
            let (y1, x1) = (y0 + rng.random_range(1..12), x0 + rng.random_range(1..12));
            let mut mask = Mask::new(32, 32);
            mask.fill_rect(y0, x0, y1.min(32), x1.min(32));
            DetectedInstance {
                class_index: rng.random_range(0..3),
                score: f64::from(rng.random_range(1..10u8)) / 10.0,
                bbox: BBox::from_mask(&mask).unwrap(),
                mask,
                source: if rng.random_bool(0.4) {
                    Source::Whole
                } else {
                    Source::Patch(rng.random_range(0..2), rng.random_range(0..2))
                },
            }
        })
        .collect()
}

fn report_line(r: &MetricReport) -> String {
    format!("{} mAP {:.3} mIoU {:.3}", r.dataset, r.map, r.miou)
}

impl Overfit {
    pub fn new() -> Self {
        Self {
            trained: OnceCell::new(),
        }
    }

    fn trained(&self) -> Result<&Trained, String> {
        self.trained
            .get_or_init(|| {
                let dir = crate::work_dir().join("overfit");
                println!("    overfit run directory: {}", dir.display());
                train_overfit(&dir).map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    pub fn criterion(&self) -> Outcome {
        let t = match self.trained() {
            Ok(t) => t,
            Err(e) => return Outcome::error(e),
        };
        let c = &t.config;
        let shape_ok = c.iterations <= MAX_ITERATIONS && c.crop_size == 256 && c.batch_size == 4;
        let cfg = InferenceConfig::default();
        let mut lines = Vec::new();
        let mut pass = shape_ok && t.train_seconds <= MAX_CPU_SECONDS;
        for (spec, index) in &t.corpus {
            let train = match evaluate_split(&t.model, index, "train", &cfg) {
                Ok(r) => r,
                Err(e) => return Outcome::error(e),
            };
            let held = match evaluate_split(&t.model, index, "heldout", &cfg) {
                Ok(r) => r,
                Err(e) => return Outcome::error(e),
            };
            pass &= train.map >= 0.85 && train.miou >= 0.85 && held.map >= 0.5;
            lines.push(format!(
                "{} [{} classes] train {} / heldout {}",
                spec.name,
                spec.num_classes(),
                report_line(&train),
                report_line(&held)
            ));
        }
        let log = std::fs::read_to_string(t.dir.join(LOG_FILE)).unwrap_or_default();
        let losses: Vec<f64> = log_iterations(&log)
            .iter()
            .filter_map(|l| log_field(l, "loss")?.parse().ok())
            .collect();
        let tail = &losses[losses.len().saturating_sub(50)..];
        let loss_note = match losses.first() {
            Some(first) if !tail.is_empty() => {
                format!(", loss {first:.1} -> {:.1}", tail.iter().sum::<f64>() / tail.len() as f64)
            }
            _ => String::new(),
        };
        Outcome::check(
            pass,
            format!(
                "{} iterations, crop {}, batch {}, {:.2} h CPU{loss_note}; {}",
                c.iterations,
                c.crop_size,
                c.batch_size,
                t.train_seconds / 3600.0,
                lines.join("; ")
            ),
        )
    }

    pub fn iqs(&self) -> Outcome {
        let t = match self.trained() {
            Ok(t) => t,
            Err(e) => return Outcome::error(e),
        };
        let log = std::fs::read_to_string(t.dir.join(LOG_FILE)).unwrap_or_default();
        let logged: Option<Vec<f64>> = log
            .lines()
            .find_map(|l| l.strip_prefix("# iqs_thresholds="))
            .map(|v| v.split(',').filter_map(|x| x.parse().ok()).collect());
        let want = vec![0.00125, 0.0025, 0.005, 0.01];
        if t.config.model.t_max != 0.01 || t.config.model.decoder_layers != 4 {
            return Outcome::check(false, "overfit config is not T_max = 0.01, K = 4");
        }
        if logged.as_ref() != Some(&want) {
            return Outcome::check(false, format!("logged thresholds {logged:?}, want {want:?}"));
        }
        let variant = |f: &dyn Fn(&mut docseg::model::ModelConfig)| -> docseg::Result<DocSegModel> {
            let mut mc = t.config.model.clone();
            f(&mut mc);
            let m = DocSegModel::new(mc, t.config.seed, DType::F32)?;
            m.load_params(&t.model.params)?;
            Ok(m)
        };
        let (zero, off) = match (variant(&|m| m.t_max = 0.0), variant(&|m| m.iqs_enabled = false)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return Outcome::error(e),
        };
        let cfg = InferenceConfig::default();
        let imgs = images(&t.corpus, "heldout", 5);
        let mut instances = 0;
        for (k, (names, img)) in imgs.iter().enumerate() {
            let a = predict(&zero, img, names, &cfg);
            let b = predict(&off, img, names, &cfg);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    let bitwise = a == b
                        && a
                            .instances
                            .iter()
                            .zip(&b.instances)
                            .all(|(x, y)| x.score.to_bits() == y.score.to_bits());
                    if !bitwise {
                        return Outcome::check(false, format!("image {k}: predictions differ"));
                    }
                    instances += a.instances.len();
                }
                (Err(e), _) | (_, Err(e)) => return Outcome::error(e),
            }
        }
        Outcome::check(
            true,
            format!(
                "{} images ({instances} instances) bit-identical; logged thresholds {want:?}",
                imgs.len()
            ),
        )
    }

    pub fn open_set(&self) -> Outcome {
        let t = match self.trained() {
            Ok(t) => t,
            Err(e) => return Outcome::error(e),
        };
        let cfg = InferenceConfig::default();
        let mut compared = 0;
        let mut failures = Vec::new();
        for (names, img) in images(&t.corpus, "heldout", 10) {
            let mut reordered = names.clone();
            reordered.rotate_left(1);
            let perm: Vec<usize> = names.iter().map(|n| reordered.iter().position(|r| r == n).unwrap()).collect();
            let (a, b) = match (predict(&t.model, &img, &names, &cfg), predict(&t.model, &img, &reordered, &cfg)) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => return Outcome::error(e),
            };
            let mut unmatched: Vec<&DetectedInstance> = b.instances.iter().collect();
            let mut ok = a.instances.len() == b.instances.len();
            for d in &a.instances {
                match unmatched
                    .iter()
                    .position(|e| e.mask == d.mask && e.class_index == perm[d.class_index])
                {
                    Some(i) => {
                        unmatched.swap_remove(i);
                    }
                    None => ok = false,
                }
            }
            let m = names.len() as u32;
            let relabel = |l: u32| if l == m { m } else { perm[l as usize] as u32 };
            let semantic_ok = a.semantic.data.iter().zip(&b.semantic.data).all(|(&x, &y)| relabel(x) == y);
            if !(ok && semantic_ok) {
                failures.push(format!(
                    "{:?} vs {:?}: {} vs {} instances, semantic {}",
                    names,
                    reordered,
                    a.instances.len(),
                    b.instances.len(),
                    if semantic_ok { "consistent" } else { "inconsistent" }
                ));
            }
            compared += a.instances.len();

            let subset: Vec<String> = names[..names.len() - 1].iter().rev().cloned().collect();
            match predict(&t.model, &img, &subset, &cfg) {
                Ok(p) => {
                    let k = subset.len();
                    let inside = p.instances.iter().all(|d| d.class_index < k)
                        && p.semantic.data.iter().all(|&l| (l as usize) <= k);
                    if !inside {
                        failures.push(format!("subset {subset:?} produced labels outside the subset"));
                    }
                }
                Err(e) => return Outcome::error(e),
            }
        }
        if failures.is_empty() {
            Outcome::check(
                true,
                format!("{compared} instances identical under reordering; subset predictions stay in the subset"),
            )
        } else {
            Outcome::check(false, failures.join("; "))
        }
    }

    pub fn merge(&self) -> Outcome {
        let t = match self.trained() {
            Ok(t) => t,
            Err(e) => return Outcome::error(e),
        };
        let cfg = InferenceConfig::default();
        let mut compared = 0;
        for (names, img) in images(&t.corpus, "heldout", 5) {
            let grid = match TileGrid::new(img.height, img.width, img.height.max(img.width), img.height.max(img.width)) {
                Ok(g) => g,
                Err(e) => return Outcome::error(e),
            };
            let whole: Prediction = match predict_whole(&t.model, &img, &names, &cfg) {
                Ok(p) => p,
                Err(e) => return Outcome::error(e),
            };
            let tiled = match predict_patches(&t.model, &img, &names, &grid, &cfg) {
                Ok(p) => p,
                Err(e) => return Outcome::error(e),
            };
            let same = whole.instances.len() == tiled.len()
                && whole.instances.iter().zip(&tiled).all(|(a, b)| same_except_source(a, b));
            if !same {
                return Outcome::check(
                    false,
                    format!("single-tile grid gave {} instances, whole image {}", tiled.len(), whole.instances.len()),
                );
            }
            compared += tiled.len();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for case in 0..100 {
            let mode = if case % 2 == 0 { NmsMode::Mask } else { NmsMode::Box };
            let threshold = [0.3, 0.5, 0.7][case % 3];
            let once = merge_and_nms(random_detections(&mut rng), random_detections(&mut rng), threshold, mode);
            let twice = merge_and_nms(once.clone(), Vec::new(), threshold, mode);
            if once != twice {
                return Outcome::check(false, format!("NMS not idempotent on set {case}"));
            }
        }
        Outcome::check(
            true,
            format!("single tile reproduces {compared} whole-image instances exactly; NMS idempotent on 100 sets"),
        )
    }
}
