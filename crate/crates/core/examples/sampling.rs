//! Dataset sampling probabilities and a curriculum over a corpus, with the
//! empirical mix of a few thousand batches.
//!
//! cargo run --example sampling -- <corpus_dir>

use std::path::PathBuf;

use docseg::datamodel::load_corpus;
use docseg::training::{dataset_probabilities, iteration_rng, Curriculum, CurriculumEntry, Sampler};

fn main() -> docseg::Result<()> {
    let Some(corpus) = std::env::args().nth(1) else {
        eprintln!("usage: sampling <corpus_dir>");
        std::process::exit(2);
    };
    let corpus = load_corpus(&PathBuf::from(corpus))?;
    let sampler = Sampler::new(corpus.into_iter().map(|(_, index)| index).collect())?;
    let specs = sampler.specs();
    let first = specs[0].task_group.as_str().to_string();
    let curriculum = Curriculum::new(
        vec![
            CurriculumEntry { iteration: 0, name: first },
            CurriculumEntry { iteration: 100, name: specs[specs.len() - 1].name.clone() },
        ],
        &specs,
    )?;
    for it in [0, 100] {
        let active = curriculum.active(it, &specs);
        let p = dataset_probabilities(&sampler.class_counts(), &active)?;
        println!("iteration {it}:");
        for ((spec, a), pi) in specs.iter().zip(&active).zip(&p) {
            println!("  {:<10} {} classes, active {a}, p = {pi:.4}", spec.name, spec.num_classes());
        }
    }

    let p = dataset_probabilities(&sampler.class_counts(), &vec![true; specs.len()])?;
    let mut counts = vec![0usize; specs.len()];
    for it in 0..2500 {
        for item in sampler.draw(&p, 4, &mut iteration_rng(0, it))? {
            counts[item.dataset] += 1;
        }
    }
    for (spec, c) in specs.iter().zip(counts) {
        println!("{:<10} drawn {:.4} of 10000", spec.name, c as f64 / 10000.0);
    }
    Ok(())
}
