//! Predicts one image with whole-image and sliding-window inference, prints
//! where every kept detection came from and writes an overlay.
//!
//! cargo run --example predict -- <checkpoint> <image> <out_dir> <class names...>

use std::path::PathBuf;

use docseg::checkpoint::Checkpoint;
use docseg::inference::{predict, write_prediction, InferenceConfig, TileGrid};
use docseg::overlay::render_overlay;
use docseg::raster::RgbImage;
use docseg::training::model_from_checkpoint;

fn main() -> docseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [ckpt, image, out, names @ ..] = &args[..] else {
        eprintln!("usage: predict <checkpoint> <image> <out_dir> <class names...>");
        std::process::exit(2);
    };
    if names.is_empty() {
        eprintln!("at least one class name is required");
        std::process::exit(2);
    }
    let (_, model) = model_from_checkpoint(&Checkpoint::load(&PathBuf::from(ckpt))?)?;
    let img = RgbImage::decode(&std::fs::read(image).expect("image is readable"))?;
    let cfg = InferenceConfig::default();

    let scale = cfg.patch_short_side as f64 / img.height.min(img.width) as f64;
    let (sh, sw) = ((img.height as f64 * scale).round() as usize, (img.width as f64 * scale).round() as usize);
    let grid = TileGrid::with_overlap(sh, sw, cfg.patch_size, cfg.patch_overlap)?;
    println!("image {}x{}, tiles {}x{} over {sh}x{sw}:", img.height, img.width, grid.rows, grid.cols);
    for (row, col, x, y) in grid.tiles() {
        println!("  tile {row},{col} at x={x} y={y}");
    }

    let pred = predict(&model, &img, names, &cfg)?;
    for d in &pred.instances {
        let [x0, y0, x1, y1] = d.bbox.to_xyxy();
        println!(
            "{:<12} {:.3} from {:<10} box ({x0:.2},{y0:.2})-({x1:.2},{y1:.2}) area {}",
            names[d.class_index],
            d.score,
            d.source.to_string(),
            d.mask.area()
        );
    }
    let out = PathBuf::from(out);
    std::fs::create_dir_all(&out).expect("output directory is writable");
    std::fs::write(out.join("prediction.txt"), write_prediction(&pred, names)).expect("output directory is writable");
    std::fs::write(out.join("overlay.png"), render_overlay(&img, &pred, names).encode_png()?).expect("output directory is writable");
    println!("wrote {}", out.display());
    Ok(())
}
