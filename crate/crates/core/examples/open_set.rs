//! Runs one checkpoint with three different class-name lists on the same
//! image: the trained order, a rotated order and a subset.
//!
//! cargo run --example open_set -- <checkpoint> <corpus_dir> [dataset]

use std::path::PathBuf;

use docseg::checkpoint::Checkpoint;
use docseg::datamodel::load_corpus;
use docseg::inference::{predict, InferenceConfig, Prediction};
use docseg::training::model_from_checkpoint;

fn summary(pred: &Prediction, names: &[String]) {
    for d in &pred.instances {
        println!("    {:<12} {:.3} area {}", names[d.class_index], d.score, d.mask.area());
    }
}

fn main() -> docseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [ckpt, corpus, rest @ ..] = &args[..] else {
        eprintln!("usage: open_set <checkpoint> <corpus_dir> [dataset]");
        std::process::exit(2);
    };
    let (_, model) = model_from_checkpoint(&Checkpoint::load(&PathBuf::from(ckpt))?)?;
    let corpus = load_corpus(&PathBuf::from(corpus))?;
    let (spec, index) = match rest.first() {
        Some(name) => corpus.iter().find(|(s, _)| &s.name == name).expect("dataset is in the corpus"),
        None => &corpus[0],
    };
    let sample = index.split("heldout").load(0)?;
    let cfg = InferenceConfig::default();

    let trained = spec.class_names.clone();
    let mut rotated = trained.clone();
    rotated.rotate_left(1);
    let subset = trained[..trained.len().max(2) - 1].to_vec();
    for (label, names) in [("trained order", &trained), ("rotated", &rotated), ("subset", &subset)] {
        println!("{label}: {names:?}");
        summary(&predict(&model, &sample.image, names, &cfg)?, names);
    }
    Ok(())
}
