//! Bipartite matching between instance predictions and ground truth.

use crate::heads::PredictionSet;
use crate::losses::{box_pair_terms, LossWeights, Targets, DICE_EPS, FOCAL_ALPHA};
use crate::nn::to_f64_vec;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// `(query_id, gt_id)`, in ground-truth order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`), returning the column of each row together with the
/// row and column potentials.
fn solve(cost: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.len();
    let m = if n == 0 { 0 } else { cost[0].len() };
    let inf = f64::INFINITY;
    // One-based potentials and column owners; index 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if owner[j] > 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    (assign, u[1..].to_vec(), v[1..].to_vec())
}

pub fn assignment_cost(cost: &[Vec<f64>], assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Optimal assignment of rows to distinct columns. Among optimal
/// assignments (within a relative tolerance of 1e-9) the column sequence
/// in row order is lexicographically smallest.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "{n} rows cannot be assigned to {m} columns");
    let (mut current, u, v) = solve(cost);
    let best = assignment_cost(cost, &current);
    let scale = cost.iter().flatten().fold(1.0f64, |a, &c| a.max(c.abs()));
    let tol = 1e-9 * scale * n as f64;

    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    for r in 0..n {
        let mut chosen = None;
        for c in 0..m {
            if fixed.contains(&c) || cost[r][c] - u[r] - v[c] > tol {
                continue;
            }
            if c == current[r] {
                chosen = Some(c);
                break;
            }
            let mut trial = fixed.clone();
            trial.push(c);
            if let Some(rest) = solve_with_prefix(cost, &trial) {
                if assignment_cost(cost, &rest) <= best + tol {
                    current = rest;
                    chosen = Some(c);
                    break;
                }
            }
        }
        fixed.push(chosen.unwrap_or(current[r]));
    }
    fixed
}

/// Best completion of an assignment whose first rows are fixed.
fn solve_with_prefix(cost: &[Vec<f64>], prefix: &[usize]) -> Option<Vec<usize>> {
    let m = cost[0].len();
    let free_cols: Vec<usize> = (0..m).filter(|c| !prefix.contains(c)).collect();
    let rows = &cost[prefix.len()..];
    if rows.len() > free_cols.len() {
        return None;
    }
    let sub: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| free_cols.iter().map(|&c| row[c]).collect())
        .collect();
    let (a, _, _) = solve(&sub);
    Some(prefix.iter().copied().chain(a.into_iter().map(|j| free_cols[j])).collect())
}

/// `(gts, queries)` matching cost, mirroring the training losses:
/// `λ_c·(−p_class) + λ_f·focal + λ_d·dice + λ_sl1·smoothL1 + λ_diou·(1 − DIoU)`.
pub fn cost_matrix(
    pred: &PredictionSet,
    targets: &Targets,
    queries: &[usize],
    w: &LossWeights,
) -> Result<Vec<Vec<f64>>> {
    let g = targets.len();
    if g == 0 {
        return Ok(Vec::new());
    }
    let p_len = targets.mask_values[0].len();
    let logits = to_f64_vec(&pred.instance_logits)?;
    let probs = to_f64_vec(&pred.class_probs()?)?;
    let boxes = to_f64_vec(&pred.boxes)?;
    let k = pred.class_logits.dim(1)?;
    if logits.len() != pred.num_queries()? * p_len {
        return Err(Error::Shape(format!(
            "prediction masks have {} pixels per query, targets have {p_len}",
            logits.len() / pred.num_queries()?.max(1)
        )));
    }

    let mut cost = vec![vec![0.0; queries.len()]; g];
    for (qi, &q) in queries.iter().enumerate() {
        let row = &logits[q * p_len..(q + 1) * p_len];
        // Per-pixel focal terms for a positive and a negative target.
        let mut pos = Vec::with_capacity(p_len);
        let mut neg = Vec::with_capacity(p_len);
        let mut psum = 0.0;
        let mut pvals = Vec::with_capacity(p_len);
        for &x in row {
            let p = 1.0 / (1.0 + (-x).exp());
            let log_p = -softplus(-x);
            let log_1mp = -softplus(x);
            pos.push(-FOCAL_ALPHA * (1.0 - p).powi(2) * log_p);
            neg.push(-(1.0 - FOCAL_ALPHA) * p.powi(2) * log_1mp);
            psum += p;
            pvals.push(p);
        }
        let b = [boxes[4 * q], boxes[4 * q + 1], boxes[4 * q + 2], boxes[4 * q + 3]];
        for (gi, t) in targets.mask_values.iter().enumerate() {
            let mut focal = 0.0;
            let mut inter = 0.0;
            let mut tsum = 0.0;
            for i in 0..p_len {
                focal += t[i] * pos[i] + (1.0 - t[i]) * neg[i];
                inter += pvals[i] * t[i];
                tsum += t[i];
            }
            focal /= p_len as f64;
            let dice = 1.0 - (2.0 * inter + DICE_EPS) / (psum + tsum + DICE_EPS);
            let (sl1, diou_loss) = box_pair_terms(&b, &targets.boxes[gi]);
            let p_class = probs[q * k + targets.classes[gi]];
            cost[gi][qi] = -w.class * p_class
                + w.focal * focal
                + w.dice * dice
                + w.smooth_l1 * sl1
                + w.diou * diou_loss;
        }
    }
    Ok(cost)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Matches ground truth to the candidate `queries` (ascending ids).
pub fn match_predictions(
    pred: &PredictionSet,
    targets: &Targets,
    queries: &[usize],
    w: &LossWeights,
) -> Result<MatchResult> {
    if targets.len() > queries.len() {
        return Err(Error::TooManyTargets {
            targets: targets.len(),
            queries: queries.len(),
        });
    }
    let cost = cost_matrix(pred, targets, queries, w)?;
    let assign = hungarian(&cost);
    let pairs: Vec<(usize, usize)> = assign.iter().enumerate().map(|(g, &qi)| (queries[qi], g)).collect();
    let unmatched_queries = queries
        .iter()
        .copied()
        .filter(|q| !pairs.iter().any(|p| p.0 == *q))
        .collect();
    Ok(MatchResult {
        pairs,
        unmatched_queries,
    })
}
