//! Evaluates a checkpoint on one split of every dataset in a corpus.
//!
//! cargo run --example evaluate -- <checkpoint> <corpus_dir> [split] [whole]

use std::path::PathBuf;

use docseg::checkpoint::Checkpoint;
use docseg::datamodel::load_corpus;
use docseg::inference::InferenceConfig;
use docseg::metrics::{evaluate_split, format_table};
use docseg::training::model_from_checkpoint;

fn main() -> docseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [ckpt, corpus, rest @ ..] = &args[..] else {
        eprintln!("usage: evaluate <checkpoint> <corpus_dir> [split] [whole]");
        std::process::exit(2);
    };
    let split = rest.first().map_or("heldout", String::as_str);
    let cfg = InferenceConfig {
        use_patches: rest.get(1).is_none_or(|m| m != "whole"),
        ..InferenceConfig::default()
    };
    let (_, model) = model_from_checkpoint(&Checkpoint::load(&PathBuf::from(ckpt))?)?;
    let mut reports = Vec::new();
    for (_, index) in load_corpus(&PathBuf::from(corpus))? {
        let report = evaluate_split(&model, &index, split, &cfg)?;
        println!("{report}");
        reports.push(report);
    }
    print!("{}", format_table(&reports));
    Ok(())
}
