//! One forward pass of an untrained model, printing the shape of every
//! prediction set and how instance query selection shrinks the active set
//! from layer to layer.
//!
//! cargo run --example iqs -- [t_max]

use candle_core::DType;
use docseg::model::{DocSegModel, ModelConfig};
use docseg::raster::RgbImage;

fn main() -> docseg::Result<()> {
    let t_max = std::env::args().nth(1).map_or(0.01, |s| s.parse().expect("t_max must be a number"));
    let config = ModelConfig {
        channels: 32,
        stem_channels: 16,
        num_queries: 16,
        t_max,
        ..ModelConfig::default()
    };
    let model = DocSegModel::new(config, 1, DType::F32)?;
    let mut image = RgbImage::filled(128, 128, [1.0; 3]);
    for y in 20..40 {
        for x in 16..112 {
            image.put(y, x, [0.1, 0.1, 0.1]);
        }
    }
    let names: Vec<String> = ["title", "paragraph"].map(String::from).to_vec();
    let out = model.forward_image(&image, &names)?;
    println!("mask resolution {:?}", out.mask_shape);
    println!("thresholds {:?}", out.decoder.thresholds);
    for (k, (p, active)) in out.decoder.predictions.iter().zip(&out.decoder.active_ids).enumerate() {
        println!(
            "layer {k}: semantic {:?}, instance {:?}, classes {:?}, active {} {:?}",
            p.semantic_logits.dims(),
            p.instance_logits.dims(),
            p.class_logits.dims(),
            active.len(),
            active
        );
    }
    Ok(())
}
