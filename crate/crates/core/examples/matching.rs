//! Bipartite matching between decoder queries and ground truth on the first
//! training image of a corpus, using an untrained model.
//!
//! cargo run --example matching -- <corpus_dir>

use std::path::PathBuf;

use candle_core::{DType, Device};
use docseg::datamodel::load_corpus;
use docseg::losses::{LossWeights, Targets};
use docseg::matching::{cost_matrix, match_predictions};
use docseg::model::{DocSegModel, ModelConfig};

fn main() -> docseg::Result<()> {
    let Some(corpus) = std::env::args().nth(1) else {
        eprintln!("usage: matching <corpus_dir>");
        std::process::exit(2);
    };
    let corpus = load_corpus(&PathBuf::from(corpus))?;
    let (spec, index) = &corpus[0];
    let sample = index.split("train").load(0)?;
    let config = ModelConfig {
        channels: 32,
        stem_channels: 16,
        num_queries: 2 * sample.instances.len().max(4),
        decoder_layers: 2,
        ..ModelConfig::default()
    };
    let model = DocSegModel::new(config, 0, DType::F32)?;
    let out = model.forward_image(&sample.image, &spec.class_names)?;
    let pred = out.decoder.last();
    let targets = Targets::from_sample(&sample, out.mask_shape, DType::F32, &Device::Cpu)?;
    let queries: Vec<usize> = (0..pred.num_queries()?).collect();
    let w = LossWeights::default();

    println!("{} ground truth, {} queries", targets.len(), queries.len());
    for (g, row) in cost_matrix(pred, &targets, &queries, &w)?.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:6.2}")).collect();
        println!("  gt {g} ({:<10}) {}", spec.class_names[targets.classes[g]], cells.join(" "));
    }
    let result = match_predictions(pred, &targets, &queries, &w)?;
    for (q, g) in &result.pairs {
        println!("  query {q} -> gt {g}");
    }
    Ok(())
}
