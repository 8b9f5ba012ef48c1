//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The overfit run is cached under `DOCSEG_ACCEPTANCE_DIR` (default: cargo's
//! test tmpdir) and resumed from its last checkpoint on later runs.

mod gradients;
mod matching;
mod metrics;
mod model_runs;
mod reproducibility;
mod sampling;

use std::path::PathBuf;
use std::time::Instant;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn check(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    pub fn error(e: impl std::fmt::Display) -> Self {
        Self {
            pass: false,
            detail: format!("error: {e}"),
        }
    }
}

pub fn work_dir() -> PathBuf {
    std::env::var_os("DOCSEG_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn main() {
    let filter: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let wanted = |n: usize| filter.is_empty() || filter.contains(&n);
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        println!("criterion {n} {name}: {status} ({secs:.1}s) {}", outcome.detail);
        results.push((n, name, outcome, secs));
    };

    run(1, "gradient checks", &gradients::run);
    run(2, "matcher oracle", &matching::run);
    run(3, "metric oracle", &metrics::run);
    run(7, "sampling statistics", &sampling::run);
    let overfit = model_runs::Overfit::new();
    run(5, "overfit run", &|| overfit.criterion());
    run(4, "instance query selection", &|| overfit.iqs());
    run(6, "open-set contract", &|| overfit.open_set());
    run(8, "merge correctness", &|| overfit.merge());
    run(9, "reproducibility", &reproducibility::run);

    results.sort_by_key(|r| r.0);
    println!();
    println!("summary");
    for (n, name, o, secs) in &results {
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("  {status} criterion {n} {name} ({secs:.1}s)");
    }
    if results.iter().any(|r| !r.2.pass) {
        std::process::exit(1);
    }
}
