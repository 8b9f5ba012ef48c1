//! Empirical dataset frequencies of the training sampler.

use std::path::PathBuf;
use std::sync::Arc;

use docseg::datamodel::{DatasetSpec, SampleIndex, SampleRef, TaskGroup};
use docseg::training::{dataset_probabilities, iteration_rng, Sampler};

use crate::Outcome;

const DRAWS: usize = 100_000;
const BATCH: usize = 4;

fn dataset(name: &str, classes: usize) -> SampleIndex {
    let names = (0..classes).map(|i| format!("{name}{i}")).collect();
    SampleIndex {
        dataset: Arc::new(DatasetSpec::new(name, names, TaskGroup::Layout).unwrap()),
        dir: PathBuf::from(name),
        entries: (0..3)
            .map(|i| SampleRef {
                split: "train".into(),
                id: format!("{i:06}"),
            })
            .collect(),
    }
}

pub fn run() -> Outcome {
    let sampler = Sampler::new(vec![dataset("one", 1), dataset("four", 4), dataset("sixteen", 16)]).unwrap();
    let p = match dataset_probabilities(&sampler.class_counts(), &[true; 3]) {
        Ok(p) => p,
        Err(e) => return Outcome::error(e),
    };
    let mut counts = [0usize; 3];
    for it in 0..DRAWS / BATCH {
        let mut rng = iteration_rng(1, it as u64);
        for item in sampler.draw(&p, BATCH, &mut rng).unwrap() {
            counts[item.dataset] += 1;
        }
    }
    let want = [1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0];
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / DRAWS as f64).collect();
    let worst = freq.iter().zip(want).map(|(f, w)| (f - w).abs()).fold(0.0, f64::max);
    Outcome::check(
        worst <= 0.01,
        format!(
            "{DRAWS} draws: frequencies {:.4}, {:.4}, {:.4} vs 1/7, 2/7, 4/7 (max deviation {worst:.4})",
            freq[0], freq[1], freq[2]
        ),
    )
}
