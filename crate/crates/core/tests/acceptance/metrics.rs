//! Hand-computed metric fixtures and randomized micro-scenes against an
//! exhaustive matching reference.

use docseg::datamodel::{derive_semantic, InstanceAnnotation};
use docseg::inference::{DetectedInstance, Prediction, Source};
use docseg::metrics::{iou_thresholds, miou, Evaluator, MetricReport};
use docseg::raster::{BBox, LabelMap, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const TOL: f64 = 1e-6;
const SCENES: usize = 20;
const SIDE: usize = 32;

fn rect(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Mask {
    let mut m = Mask::new(h, w);
    m.fill_rect(y0, x0, y1, x1);
    m
}

fn det(class_index: usize, score: f64, mask: Mask) -> DetectedInstance {
    DetectedInstance {
        class_index,
        score,
        bbox: BBox::from_mask(&mask).unwrap(),
        mask,
        source: Source::Whole,
    }
}

fn evaluate(names: &[&str], images: &[(Vec<DetectedInstance>, Vec<InstanceAnnotation>)], h: usize, w: usize) -> MetricReport {
    let m = names.len();
    let mut ev = Evaluator::new("fixture", names.iter().map(|s| s.to_string()).collect(), 0.3);
    for (dets, gts) in images {
        let sem = derive_semantic(gts, m, h, w);
        let pred = Prediction {
            instances: dets.clone(),
            semantic: sem.clone(),
        };
        ev.add(&pred, gts, &sem).unwrap();
    }
    ev.report()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL
}

/// Fixture checks; returns the failures.
fn fixtures() -> Vec<String> {
    let mut failures = Vec::new();
    let mut expect = |label: &str, got: f64, want: f64| {
        if !close(got, want) {
            failures.push(format!("{label}: got {got}, want {want}"));
        }
    };

    // mIoU: identical maps, all-background prediction, and 2 px overlap
    // plus 2 px spill on a 4-px class (2 / 6).
    let mut gt = LabelMap::filled(2, 2, 0);
    gt.data.copy_from_slice(&[0, 0, 1, 1]);
    expect("mIoU identical", miou(&gt, &gt, 2).unwrap().1, 1.0);
    let mut half = LabelMap::filled(2, 2, 2);
    half.data[0] = 0;
    half.data[1] = 0;
    expect("mIoU all background", miou(&LabelMap::filled(2, 2, 2), &half, 2).unwrap().1, 0.0);
    let mut g = LabelMap::filled(4, 4, 1);
    let mut p = LabelMap::filled(4, 4, 1);
    for i in [0, 1, 4, 5] {
        g.data[i] = 0;
    }
    for i in [0, 1, 2, 3] {
        p.data[i] = 0;
    }
    expect("mIoU 2/6", miou(&p, &g, 1).unwrap().0[0].unwrap(), 2.0 / 6.0);

    // One GT (20x10), detections at IoU 0.4 (score 0.9) and 0.95 (0.8).
    // At every threshold: FP then TP, precision envelope 1/2 at all
    // recall levels, so AP = 0.5; F with 1 TP and 1 FP = 2/3.
    let gt = InstanceAnnotation::from_mask(0, rect(20, 20, 0, 0, 20, 10)).unwrap();
    let low = det(0, 0.9, rect(20, 20, 0, 0, 8, 10));
    let high = det(0, 0.8, rect(20, 20, 0, 0, 19, 10));
    let r = evaluate(&["a"], &[(vec![low, high], vec![gt.clone()])], 20, 20);
    expect("interpolated AP at 0.5", r.per_class[0].ap[0], 0.5);
    expect("interpolated mAP", r.map, 0.5);
    expect("mAF one TP one FP", r.maf, 2.0 / 3.0);

    // Perfect detection: every metric is 1.
    let r = evaluate(&["a"], &[(vec![det(0, 0.99, gt.mask.clone())], vec![gt.clone()])], 20, 20);
    for (name, v) in ["AP50", "AP75", "mAP", "mAP_b", "mAF", "mIoU"].iter().zip(r.columns()) {
        expect(&format!("perfect {name}"), v, 1.0);
    }

    // No detections: AP 0, F 0.
    let r = evaluate(&["a"], &[(vec![], vec![gt.clone()])], 20, 20);
    expect("no detections mAP", r.map, 0.0);
    expect("no detections mAF", r.maf, 0.0);

    // IoU 0.7 detection: TP for thresholds 0.50..0.70 (5 of 10), FP above.
    let g10 = InstanceAnnotation::from_mask(0, rect(20, 20, 0, 0, 10, 10)).unwrap();
    let d7 = det(0, 0.9, rect(20, 20, 0, 0, 7, 10));
    let r = evaluate(&["a"], &[(vec![d7], vec![g10])], 20, 20);
    for (k, t) in iou_thresholds().iter().enumerate() {
        let want = if k <= 4 { 1.0 } else { 0.0 };
        expect(&format!("IoU 0.7 F at {t}"), r.per_class[0].f[k], want);
        expect(&format!("IoU 0.7 AP at {t}"), r.per_class[0].ap[k], want);
    }
    expect("IoU 0.7 mAF", r.maf, 0.5);
    expect("IoU 0.7 mAP", r.map, 0.5);

    // Two GTs; ranking TP, FP, TP: envelope 1 for recall <= 1/2 (51 points)
    // and 2/3 above (50 points).
    let ga = InstanceAnnotation::from_mask(0, rect(20, 20, 0, 0, 5, 5)).unwrap();
    let gb = InstanceAnnotation::from_mask(0, rect(20, 20, 10, 10, 15, 15)).unwrap();
    let dets = vec![
        det(0, 0.9, ga.mask.clone()),
        det(0, 0.8, rect(20, 20, 0, 15, 4, 19)),
        det(0, 0.7, gb.mask.clone()),
    ];
    let r = evaluate(&["a"], &[(dets, vec![ga, gb])], 20, 20);
    expect("TP FP TP AP", r.map, (51.0 + 50.0 * 2.0 / 3.0) / 101.0);
    failures
}

/// Micro-scene: two images with disjoint GT rectangles, detections derived
/// from them by jittering plus a few strays. Scores are distinct.
struct Scene {
    names: Vec<&'static str>,
    images: Vec<(Vec<DetectedInstance>, Vec<InstanceAnnotation>)>,
}

fn jittered(rng: &mut ChaCha8Rng, y0: usize, x0: usize, y1: usize, x1: usize) -> Mask {
    let j = |v: usize, rng: &mut ChaCha8Rng| (v as i64 + rng.random_range(-3..=3)).clamp(0, SIDE as i64) as usize;
    loop {
        let (a, b, c, d) = (j(y0, rng), j(x0, rng), j(y1, rng), j(x1, rng));
        if a < c && b < d {
            return rect(SIDE, SIDE, a, b, c, d);
        }
    }
}

fn scene(rng: &mut ChaCha8Rng) -> Scene {
    let names = vec!["a", "b"];
    let mut images = Vec::new();
    for _ in 0..2 {
        let count = rng.random_range(1..=4);
        let cells: Vec<usize> = rand::seq::index::sample(rng, 4, count).into_vec();
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for cell in cells.into_iter().take(5) {
            let (cy, cx) = (16 * (cell / 2), 16 * (cell % 2));
            let (h, w) = (rng.random_range(5..=14), rng.random_range(5..=14));
            let (y0, x0) = (cy + rng.random_range(0..=(15 - h)), cx + rng.random_range(0..=(15 - w)));
            let class = rng.random_range(0..2);
            gts.push(InstanceAnnotation::from_mask(class, rect(SIDE, SIDE, y0, x0, y0 + h, x0 + w)).unwrap());
            for _ in 0..rng.random_range(0..=2) {
                let c = if rng.random_bool(0.85) { class } else { 1 - class };
                dets.push((c, jittered(rng, y0, x0, y0 + h, x0 + w)));
            }
        }
        for _ in 0..rng.random_range(0..=2) {
            let (y0, x0) = (rng.random_range(0..24), rng.random_range(0..24));
            dets.push((rng.random_range(0..2), rect(SIDE, SIDE, y0, x0, y0 + rng.random_range(3..8), x0 + rng.random_range(3..8))));
        }
        images.push((dets, gts));
    }
    let total: usize = images.iter().map(|i| i.0.len()).sum();
    let mut scores: Vec<f64> = (0..total).map(|i| 0.35 + 0.6 * (i as f64 + 0.5) / total as f64).collect();
    for i in (1..scores.len()).rev() {
        scores.swap(i, rng.random_range(0..=i));
    }
    let mut next = scores.into_iter();
    let images = images
        .into_iter()
        .map(|(dets, gts)| {
            let dets = dets
                .into_iter()
                .map(|(c, m)| det(c, next.next().unwrap(), m))
                .collect();
            (dets, gts)
        })
        .collect();
    Scene { names, images }
}

/// 101-point interpolated AP written as a direct maximum over ranks.
fn reference_interp(flags: &[bool], num_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0;
    for (i, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

/// Every one-to-one assignment of detections to GTs with IoU >= t, each
/// detection taking one GT of its own image or none. Calls `visit` with the
/// TP flag of each detection.
fn assignments(dets: &[(usize, Vec<f64>)], t: f64, visit: &mut dyn FnMut(&[bool])) {
    fn go(dets: &[(usize, Vec<f64>)], t: f64, i: usize, used: &mut Vec<(usize, usize)>, flags: &mut Vec<bool>, visit: &mut dyn FnMut(&[bool])) {
        if i == dets.len() {
            visit(flags);
            return;
        }
        flags.push(false);
        go(dets, t, i + 1, used, flags, visit);
        flags.pop();
        let (img, ious) = &dets[i];
        for (g, &iou) in ious.iter().enumerate() {
            if iou >= t && !used.contains(&(*img, g)) {
                used.push((*img, g));
                flags.push(true);
                go(dets, t, i + 1, used, flags, visit);
                flags.pop();
                used.pop();
            }
        }
    }
    go(dets, t, 0, &mut Vec::new(), &mut Vec::new(), visit);
}

/// Reference AP (best over all matchings, detections in global score
/// order) and mean F (maximum TP count per threshold) for one class.
fn reference_class(scene: &Scene, class: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut dets: Vec<(f64, usize, Vec<f64>)> = Vec::new();
    let mut num_gt = 0;
    for (img, (ds, gts)) in scene.images.iter().enumerate() {
        let gts: Vec<&InstanceAnnotation> = gts.iter().filter(|g| g.class_index == class).collect();
        num_gt += gts.len();
        for d in ds.iter().filter(|d| d.class_index == class) {
            dets.push((d.score, img, gts.iter().map(|g| d.mask.iou(&g.mask)).collect()));
        }
    }
    if num_gt == 0 {
        return None;
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let pairs: Vec<(usize, Vec<f64>)> = dets.iter().map(|d| (d.1, d.2.clone())).collect();
    let (mut aps, mut fs) = (Vec::new(), Vec::new());
    for t in iou_thresholds() {
        let (mut best_ap, mut best_tp) = (0.0f64, 0usize);
        assignments(&pairs, t, &mut |flags| {
            best_ap = best_ap.max(reference_interp(flags, num_gt));
            best_tp = best_tp.max(flags.iter().filter(|&&f| f).count());
        });
        aps.push(best_ap);
        let (tp, fp, fn_) = (best_tp, pairs.len() - best_tp, num_gt - best_tp);
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = tp as f64 / (tp + fn_) as f64;
        fs.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    Some((aps, fs))
}

fn reference_miou(scene: &Scene) -> f64 {
    let m = scene.names.len();
    let mut iou = Vec::new();
    for c in 0..m as u32 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (dets, gts) in &scene.images {
            let g = derive_semantic(gts, m, SIDE, SIDE);
            let p = painted(dets, m);
            for i in 0..SIDE * SIDE {
                let (a, b) = (p.data[i] == c, g.data[i] == c);
                inter += usize::from(a && b);
                union += usize::from(a || b);
            }
        }
        if union > 0 {
            iou.push(inter as f64 / union as f64);
        }
    }
    if iou.is_empty() {
        0.0
    } else {
        iou.iter().sum::<f64>() / iou.len() as f64
    }
}

fn painted(dets: &[DetectedInstance], m: usize) -> LabelMap {
    let mut map = LabelMap::filled(SIDE, SIDE, m as u32);
    for d in dets {
        map.paint(&d.mask, d.class_index as u32);
    }
    map
}

fn micro_scenes() -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(314);
    let mut failures = Vec::new();
    for s in 0..SCENES {
        let sc = scene(&mut rng);
        let m = sc.names.len();
        let mut ev = Evaluator::new("scene", sc.names.iter().map(|n| n.to_string()).collect(), 0.3);
        for (dets, gts) in &sc.images {
            let pred = Prediction {
                instances: dets.clone(),
                semantic: painted(dets, m),
            };
            ev.add(&pred, gts, &derive_semantic(gts, m, SIDE, SIDE)).unwrap();
        }
        let report = ev.report();
        let mut f_means = Vec::new();
        for c in 0..m {
            let Some((aps, fs)) = reference_class(&sc, c) else {
                continue;
            };
            for (k, (a, f)) in aps.iter().zip(&fs).enumerate() {
                if !close(report.per_class[c].ap[k], *a) {
                    failures.push(format!("scene {s} class {c} threshold {k}: AP {} vs {a}", report.per_class[c].ap[k]));
                }
                if !close(report.per_class[c].f[k], *f) {
                    failures.push(format!("scene {s} class {c} threshold {k}: F {} vs {f}", report.per_class[c].f[k]));
                }
            }
            f_means.push(fs.iter().sum::<f64>() / fs.len() as f64);
        }
        let maf = f_means.iter().sum::<f64>() / f_means.len() as f64;
        if !close(report.maf, maf) {
            failures.push(format!("scene {s}: mAF {} vs {maf}", report.maf));
        }
        let want = reference_miou(&sc);
        if !close(report.miou, want) {
            failures.push(format!("scene {s}: mIoU {} vs {want}", report.miou));
        }
    }
    failures
}

pub fn run() -> Outcome {
    let mut failures = fixtures();
    failures.extend(micro_scenes());
    if failures.is_empty() {
        Outcome::check(true, format!("fixtures and {SCENES} micro-scenes agree within {TOL:e}"))
    } else {
        Outcome::check(false, failures.join("; "))
    }
}
