use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{DatasetSpec, SampleIndex, SegSample, TaskGroup};
use crate::{Error, Result};

/// `p_i = √C_i / Σ_j √C_j` over active datasets, zero for the rest.
pub fn dataset_probabilities(class_counts: &[usize], active: &[bool]) -> Result<Vec<f64>> {
    assert_eq!(class_counts.len(), active.len());
    let roots: Vec<f64> = class_counts
        .iter()
        .zip(active)
        .map(|(&c, &a)| if a { (c as f64).sqrt() } else { 0.0 })
        .collect();
    let total: f64 = roots.iter().sum();
    if total == 0.0 {
        return Err(Error::Invalid("no active dataset to sample from".into()));
    }
    Ok(roots.iter().map(|r| r / total).collect())
}

/// One curriculum entry: from `iteration` on, `name` (a task group or a
/// dataset name) is sampled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurriculumEntry {
    pub iteration: usize,
    pub name: String,
}

impl std::str::FromStr for CurriculumEntry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (it, name) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("curriculum entry `{s}` is not `<iteration>:<name>`")))?;
        let iteration = it
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("curriculum entry `{s}` has a bad iteration")))?;
        Ok(Self {
            iteration,
            name: name.trim().to_string(),
        })
    }
}

impl std::fmt::Display for CurriculumEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.iteration, self.name)
    }
}

/// Which datasets are sampled at each iteration.
#[derive(Debug, Clone)]
pub struct Curriculum {
    entries: Vec<CurriculumEntry>,
}

impl Curriculum {
    /// Checks every name against the corpus. An empty schedule activates
    /// everything from the start.
    pub fn new(entries: Vec<CurriculumEntry>, datasets: &[&DatasetSpec]) -> Result<Self> {
        for e in &entries {
            let is_group = e.name.parse::<TaskGroup>().is_ok();
            let is_dataset = datasets.iter().any(|d| d.name == e.name);
            if !is_group && !is_dataset {
                return Err(Error::Config(format!(
                    "curriculum names `{}`, which is neither a task group nor a dataset in the corpus",
                    e.name
                )));
            }
        }
        if !entries.is_empty() && !entries.iter().any(|e| e.iteration == 0) {
            return Err(Error::Config("curriculum must activate something at iteration 0".into()));
        }
        Ok(Self { entries })
    }

    pub fn active(&self, iteration: usize, datasets: &[&DatasetSpec]) -> Vec<bool> {
        if self.entries.is_empty() {
            return vec![true; datasets.len()];
        }
        let names: BTreeSet<&str> = self
            .entries
            .iter()
            .filter(|e| e.iteration <= iteration)
            .map(|e| e.name.as_str())
            .collect();
        datasets
            .iter()
            .map(|d| names.contains(d.name.as_str()) || names.contains(d.task_group.as_str()))
            .collect()
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generator for iteration `iteration` of a run seeded with `seed`.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed) ^ iteration))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub dataset: usize,
    pub sample: usize,
}

/// Draws batch slots: a dataset by its probability, then a sample
/// uniformly within it.
#[derive(Debug, Clone)]
pub struct Sampler {
    pub datasets: Vec<SampleIndex>,
}

impl Sampler {
    pub fn new(datasets: Vec<SampleIndex>) -> Result<Self> {
        if let Some(d) = datasets.iter().find(|d| d.is_empty()) {
            return Err(Error::Config(format!("dataset `{}` has no training samples", d.dataset.name)));
        }
        Ok(Self { datasets })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.datasets.iter().map(|d| d.dataset.num_classes()).collect()
    }

    pub fn specs(&self) -> Vec<&DatasetSpec> {
        self.datasets.iter().map(|d| d.dataset.as_ref()).collect()
    }

    pub fn draw(&self, probabilities: &[f64], batch_size: usize, rng: &mut impl Rng) -> Result<Vec<BatchItem>> {
        if batch_size == 0 {
            return Ok(Vec::new());
        }
        let dist = WeightedIndex::new(probabilities).map_err(|e| Error::Invalid(e.to_string()))?;
        Ok((0..batch_size)
            .map(|_| {
                let dataset = dist.sample(rng);
                let sample = rng.random_range(0..self.datasets[dataset].len());
                BatchItem { dataset, sample }
            })
            .collect())
    }

    pub fn load(&self, item: BatchItem) -> Result<SegSample> {
        self.datasets[item.dataset].load(item.sample)
    }

    pub fn label(&self, item: BatchItem) -> String {
        let d = &self.datasets[item.dataset];
        format!("{}/{}", d.dataset.name, d.entries[item.sample].id)
    }
}

/// Draws `batch_size` samples with the probabilities of the active datasets.
pub fn sample_batch(
    sampler: &Sampler,
    active: &[bool],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<SegSample>> {
    let p = dataset_probabilities(&sampler.class_counts(), active)?;
    sampler
        .draw(&p, batch_size, rng)?
        .into_iter()
        .map(|i| sampler.load(i))
        .collect()
}
