//! Synthesizes the bundled two-dataset corpus and trains on it.
//!
//! cargo run --example train -- [out_dir] [iterations]

use std::path::PathBuf;

use docseg::datamodel::{generate_synthetic_corpus, load_corpus, SynthRecipe};
use docseg::training::{train, TrainConfig};

fn main() -> docseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/train-example".into()));
    let recipe = SynthRecipe::parse(include_str!("../configs/overfit_recipe.toml"))?;
    let mut cfg = TrainConfig::parse(include_str!("../configs/overfit_train.toml"))?;
    if let Some(n) = args.next() {
        cfg.iterations = n.parse().expect("iterations must be an integer");
    }
    let corpus_dir = out.join("corpus");
    print!("{}", generate_synthetic_corpus(cfg.seed, &recipe, &corpus_dir)?);
    let corpus = load_corpus(&corpus_dir)?;
    let start = std::time::Instant::now();
    let outcome = train(&cfg, &corpus, &out.join("train"), true, &mut |r| {
        if r.iteration % 10 == 0 {
            println!("{:7.1}s {}", start.elapsed().as_secs_f64(), r.log_line());
        }
    })?;
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}
