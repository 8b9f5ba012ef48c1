//! Generates the bundled two-dataset corpus and renders the ground truth of
//! the first training image of each dataset.
//!
//! cargo run --example synth_corpus -- [out_dir] [seed]

use std::path::PathBuf;

use docseg::datamodel::{generate_synthetic_corpus, load_corpus, SynthRecipe};
use docseg::metrics::ground_truth_prediction;
use docseg::overlay::render_overlay;

fn main() -> docseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/synth-example".into()));
    let seed = args.next().map_or(7, |s| s.parse().expect("seed must be an integer"));
    let recipe = SynthRecipe::parse(include_str!("../configs/overfit_recipe.toml"))?;
    print!("{}", generate_synthetic_corpus(seed, &recipe, &out)?);
    for (spec, index) in load_corpus(&out)? {
        let sample = index.split("train").load(0)?;
        println!(
            "{}/{}: {}x{}, {} instances of {:?}",
            spec.name,
            sample.id,
            sample.height(),
            sample.width(),
            sample.instances.len(),
            spec.class_names
        );
        let overlay = render_overlay(&sample.image, &ground_truth_prediction(&sample), &spec.class_names);
        let path = out.join(format!("{}-gt.png", spec.name));
        std::fs::write(&path, overlay.encode_png()?).expect("output directory is writable");
        println!("wrote {}", path.display());
    }
    Ok(())
}
