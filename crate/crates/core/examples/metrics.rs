//! Scores a hand-made scene: one table matched twice, a paragraph found
//! once and a missed title.
//!
//! cargo run --example metrics

use docseg::datamodel::{derive_semantic, InstanceAnnotation};
use docseg::inference::{DetectedInstance, Prediction, Source};
use docseg::metrics::{format_table, Evaluator};
use docseg::raster::{BBox, Mask};

const SIDE: usize = 40;

fn rect(y0: usize, x0: usize, y1: usize, x1: usize) -> Mask {
    let mut m = Mask::new(SIDE, SIDE);
    m.fill_rect(y0, x0, y1, x1);
    m
}

fn det(class_index: usize, score: f64, mask: Mask) -> DetectedInstance {
    DetectedInstance {
        class_index,
        score,
        bbox: BBox::from_mask(&mask).expect("mask is not empty"),
        mask,
        source: Source::Whole,
    }
}

fn main() -> docseg::Result<()> {
    let names: Vec<String> = ["title", "paragraph", "table"].map(String::from).to_vec();
    let gts = vec![
        InstanceAnnotation::from_mask(0, rect(2, 2, 6, 38)).expect("non-empty"),
        InstanceAnnotation::from_mask(1, rect(8, 2, 18, 38)).expect("non-empty"),
        InstanceAnnotation::from_mask(2, rect(20, 2, 38, 38)).expect("non-empty"),
    ];
    let detections = vec![
        det(2, 0.9, rect(20, 2, 30, 38)),
        det(2, 0.8, rect(20, 2, 37, 38)),
        det(1, 0.7, rect(9, 2, 18, 38)),
    ];
    let truth = derive_semantic(&gts, names.len(), SIDE, SIDE);
    let mut semantic = truth.clone();
    semantic.paint(&rect(2, 2, 6, 38), names.len() as u32);

    let mut ev = Evaluator::new("example", names, 0.3);
    ev.add(&Prediction { instances: detections, semantic }, &gts, &truth)?;
    let report = ev.report();
    for c in &report.per_class {
        println!("{:<10} AP per threshold {:?}", c.name, c.ap.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());
    }
    print!("{}", format_table(&[report]));
    Ok(())
}
