//! Matcher against exhaustive enumeration, with costs recomputed from the
//! loss definitions.

use candle_core::{Device, Tensor};
use docseg::heads::PredictionSet;
use docseg::losses::{LossWeights, Targets};
use docseg::matching::{assignment_cost, cost_matrix, match_predictions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const CASES: usize = 500;
const PIXELS: usize = 16;

fn tensor(v: Vec<f64>, r: usize, c: usize) -> Tensor {
    Tensor::from_vec(v, (r, c), &Device::Cpu).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn box_terms(p: &[f64], g: &[f64; 4]) -> (f64, f64) {
    let mut l1 = 0.0;
    for k in 0..4 {
        let d = (p[k] - g[k]).abs();
        l1 += if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
    }
    let corners = |b: &[f64]| (b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0);
    let (a, b) = (corners(p), corners(g));
    let inter = (a.2.min(b.2) - a.0.max(b.0)).max(0.0) * (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let union = p[2] * p[3] + g[2] * g[3] - inter;
    let enclosing = (a.2.max(b.2) - a.0.min(b.0)).powi(2) + (a.3.max(b.3) - a.1.min(b.1)).powi(2);
    let centers = (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2);
    (l1, 1.0 - (inter / union - centers / enclosing))
}

/// Matching cost of query logits/probabilities/box against one target,
/// written out pixel by pixel.
fn oracle_cost(logits: &[f64], p_class: f64, b: &[f64], mask: &[f64], gt_box: &[f64; 4], w: &LossWeights) -> f64 {
    let n = logits.len() as f64;
    let (mut focal, mut inter, mut psum, mut tsum) = (0.0, 0.0, 0.0, 0.0);
    for (&x, &t) in logits.iter().zip(mask) {
        let p = sigmoid(x);
        let pt = if t > 0.5 { p } else { 1.0 - p };
        let alpha = if t > 0.5 { 0.25 } else { 0.75 };
        focal += -alpha * (1.0 - pt).powi(2) * pt.ln();
        inter += p * t;
        psum += p;
        tsum += t;
    }
    let dice = 1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0);
    let (l1, diou) = box_terms(b, gt_box);
    -w.class * p_class + w.focal * focal / n + w.dice * dice + w.smooth_l1 * l1 + w.diou * diou
}

/// Minimum over injective maps from targets to queries, summed in target
/// order like the matcher's own cost.
fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], g: usize, used: &mut Vec<bool>, chosen: &mut Vec<usize>, best: &mut f64) {
        if g == cost.len() {
            let total: f64 = chosen.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            if total < *best {
                *best = total;
            }
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                chosen.push(j);
                go(cost, g + 1, used, chosen, best);
                chosen.pop();
                used[j] = false;
            }
        }
    }
    if cost.is_empty() {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost[0].len()], &mut Vec::new(), &mut best);
    best
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let w = LossWeights::default();
    let mut worst_cost_gap: f64 = 0.0;
    for case in 0..CASES {
        let n = rng.random_range(1..=7);
        let m = rng.random_range(1..=3);
        let num_active = rng.random_range(1..=n);
        let mut queries: Vec<usize> = rand::seq::index::sample(&mut rng, n, num_active).into_vec();
        queries.sort();
        let g = rng.random_range(0..=num_active);

        let logits: Vec<f64> = (0..n * PIXELS).map(|_| rng.random_range(-4.0..4.0)).collect();
        let class_logits: Vec<f64> = (0..n * (m + 1)).map(|_| rng.random_range(-3.0..3.0)).collect();
        let boxes: Vec<f64> = (0..n)
            .flat_map(|_| {
                [
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.05..0.5),
                    rng.random_range(0.05..0.5),
                ]
            })
            .collect();
        let masks: Vec<Vec<f64>> = (0..g)
            .map(|_| (0..PIXELS).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect())
            .collect();
        let gt_boxes: Vec<[f64; 4]> = (0..g)
            .map(|_| {
                [
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.05..0.5),
                    rng.random_range(0.05..0.5),
                ]
            })
            .collect();
        let classes: Vec<usize> = (0..g).map(|_| rng.random_range(0..m)).collect();

        let pred = PredictionSet {
            semantic_logits: tensor(vec![0.0; m * PIXELS], m, PIXELS),
            instance_logits: tensor(logits.clone(), n, PIXELS),
            class_logits: tensor(class_logits.clone(), n, m + 1),
            boxes: tensor(boxes.clone(), n, 4),
            spatial_shape: (4, 4),
        };
        let targets = Targets {
            classes: classes.clone(),
            masks: (g > 0).then(|| tensor(masks.iter().flatten().copied().collect(), g, PIXELS)),
            mask_values: masks.clone(),
            boxes: gt_boxes.clone(),
            semantic: tensor(vec![0.0; m * PIXELS], m, PIXELS),
            spatial_shape: (4, 4),
        };

        let cost = cost_matrix(&pred, &targets, &queries, &w).unwrap();
        for (gi, row) in cost.iter().enumerate() {
            for (qi, &c) in row.iter().enumerate() {
                let q = queries[qi];
                let cl = &class_logits[q * (m + 1)..(q + 1) * (m + 1)];
                let z: f64 = cl.iter().map(|x| x.exp()).sum();
                let p_class = cl[classes[gi]].exp() / z;
                let want = oracle_cost(
                    &logits[q * PIXELS..(q + 1) * PIXELS],
                    p_class,
                    &boxes[4 * q..4 * q + 4],
                    &masks[gi],
                    &gt_boxes[gi],
                    &w,
                );
                worst_cost_gap = worst_cost_gap.max((c - want).abs() / want.abs().max(1.0));
            }
        }

        let result = match_predictions(&pred, &targets, &queries, &w).unwrap();
        let assign: Vec<usize> = result
            .pairs
            .iter()
            .map(|&(q, _)| queries.iter().position(|&x| x == q).unwrap())
            .collect();
        let got = assignment_cost(&cost, &assign);
        let want = brute_force(&cost);
        let distinct = {
            let mut a = assign.clone();
            a.sort();
            a.dedup();
            a.len() == assign.len()
        };
        let gt_order = result.pairs.iter().enumerate().all(|(i, p)| p.1 == i);
        if got != want || !distinct || !gt_order || result.pairs.len() != g {
            return Outcome::check(
                false,
                format!("case {case}: matcher cost {got} vs brute force {want} (n={n}, gt={g})"),
            );
        }
    }
    if worst_cost_gap > 1e-9 {
        return Outcome::check(false, format!("cost matrix differs from the oracle by {worst_cost_gap:e}"));
    }
    Outcome::check(
        true,
        format!("{CASES} cases with N, #GT <= 7 match the brute-force minimum exactly; cost entries within {worst_cost_gap:.1e}"),
    )
}
