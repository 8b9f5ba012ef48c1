//! Semantic mIoU, mask and box AP with 101-point interpolation, and the
//! mean F-score over IoU thresholds.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datamodel::{InstanceAnnotation, SampleIndex, SegSample, SemanticMap};
use crate::inference::{predict, DetectedInstance, InferenceConfig, Prediction, Source};
use crate::model::DocSegModel;
use crate::{Error, Result};

/// `0.50, 0.55, ..., 0.95`.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouMode {
    Mask,
    Box,
}

/// Per-class intersection and union pixel counts accumulated over images.
#[derive(Debug, Clone, PartialEq)]
pub struct IouAccumulator {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
        }
    }

    /// Labels `>= num_classes` are background.
    pub fn add(&mut self, pred: &SemanticMap, gt: &SemanticMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Shape(format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let m = self.intersection.len() as u32;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if p == g {
                if p < m {
                    self.intersection[p as usize] += 1;
                    self.union[p as usize] += 1;
                }
            } else {
                if p < m {
                    self.union[p as usize] += 1;
                }
                if g < m {
                    self.union[g as usize] += 1;
                }
            }
        }
        Ok(())
    }

    /// `None` for classes absent from both prediction and ground truth.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    pub fn miou(&self) -> f64 {
        mean(self.per_class().into_iter().flatten())
    }
}

/// Per-class IoU and mIoU of one label map pair.
pub fn miou(pred: &SemanticMap, gt: &SemanticMap, num_classes: usize) -> Result<(Vec<Option<f64>>, f64)> {
    let mut acc = IouAccumulator::new(num_classes);
    acc.add(pred, gt)?;
    Ok((acc.per_class(), acc.miou()))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// One detection reduced to what matching needs: its score and its IoU
/// with every ground-truth instance of the same class in the image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredOverlaps {
    pub score: f64,
    pub ious: Vec<f64>,
}

/// Greedy matching of detections (already in descending score order)
/// against ground truths at IoU threshold `t`: each detection takes the
/// unmatched ground truth of highest IoU `>= t`. Returns the TP flag of each
/// detection.
pub fn greedy_match(dets: &[ScoredOverlaps], num_gt: usize, t: f64) -> Vec<bool> {
    let mut taken = vec![false; num_gt];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &iou) in d.ious.iter().enumerate() {
                if taken[g] || iou < t {
                    continue;
                }
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP from TP flags in descending score order.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &t in tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        recall.push(ctp as f64 / num_gt as f64);
        precision.push(ctp as f64 / (ctp + cfp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    total / 101.0
}

/// Precision, recall and F from matched counts; zero where undefined.
pub fn f_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Default)]
struct ClassImage {
    num_gt: usize,
    /// Descending score.
    mask: Vec<ScoredOverlaps>,
    boxes: Vec<ScoredOverlaps>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub num_gt: usize,
    /// Mask AP per threshold; empty when the class has no ground truth.
    pub ap: Vec<f64>,
    pub ap_box: Vec<f64>,
    pub f: Vec<f64>,
    pub iou: Option<f64>,
}

impl ClassMetrics {
    pub fn map(&self) -> Option<f64> {
        (!self.ap.is_empty()).then(|| mean(self.ap.iter().copied()))
    }

    pub fn map_box(&self) -> Option<f64> {
        (!self.ap_box.is_empty()).then(|| mean(self.ap_box.iter().copied()))
    }

    pub fn f_mean(&self) -> Option<f64> {
        (!self.f.is_empty()).then(|| mean(self.f.iter().copied()))
    }
}

/// Matched counts per IoU threshold, summed over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub images: usize,
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
    pub map_b: f64,
    pub maf: f64,
    pub miou: f64,
    pub per_class: Vec<ClassMetrics>,
    pub counts: Counts,
}

pub const REPORT_COLUMNS: [&str; 6] = ["AP50", "AP75", "mAP", "mAP_b", "mAF", "mIoU"];

impl MetricReport {
    pub fn columns(&self) -> [f64; 6] {
        [self.ap50, self.ap75, self.map, self.map_b, self.maf, self.miou]
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

/// One row per dataset under the six standard columns.
pub fn format_table(reports: &[MetricReport]) -> String {
    let width = reports.iter().map(|r| r.dataset.len()).max().unwrap_or(0).max(7);
    let mut s = format!("{:<width$}", "dataset");
    for c in REPORT_COLUMNS {
        s.push_str(&format!(" {c:>7}"));
    }
    s.push('\n');
    for r in reports {
        s.push_str(&format!("{:<width$}", r.dataset));
        for v in r.columns() {
            s.push_str(&format!(" {:>7.2}", 100.0 * v));
        }
        s.push('\n');
    }
    s
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", format_table(std::slice::from_ref(self)))?;
        writeln!(f, "{:<16} {:>5} {:>7} {:>7} {:>7} {:>7}", "class", "gt", "AP", "AP_b", "F", "IoU")?;
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        for c in &self.per_class {
            writeln!(
                f,
                "{:<16} {:>5} {:>7} {:>7} {:>7} {:>7}",
                c.name,
                c.num_gt,
                opt(c.map()),
                opt(c.map_box()),
                opt(c.f_mean()),
                opt(c.iou)
            )?;
        }
        Ok(())
    }
}

/// Accumulates predictions and ground truth image by image.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub dataset: String,
    pub class_names: Vec<String>,
    pub score_floor: f64,
    images: Vec<Vec<ClassImage>>,
    iou: IouAccumulator,
}

fn overlaps(dets: &[&DetectedInstance], gts: &[&InstanceAnnotation], mode: IouMode) -> Vec<ScoredOverlaps> {
    dets.iter()
        .map(|d| ScoredOverlaps {
            score: d.score,
            ious: gts
                .iter()
                .map(|g| match mode {
                    IouMode::Mask => d.mask.iou(&g.mask),
                    IouMode::Box => d.bbox.iou(&g.bbox),
                })
                .collect(),
        })
        .collect()
}

impl Evaluator {
    pub fn new(dataset: impl Into<String>, class_names: Vec<String>, score_floor: f64) -> Self {
        let m = class_names.len();
        Self {
            dataset: dataset.into(),
            class_names,
            score_floor,
            images: Vec::new(),
            iou: IouAccumulator::new(m),
        }
    }

    pub fn add(&mut self, pred: &Prediction, gt_instances: &[InstanceAnnotation], gt_semantic: &SemanticMap) -> Result<()> {
        self.iou.add(&pred.semantic, gt_semantic)?;
        let m = self.class_names.len();
        let mut per_class = Vec::with_capacity(m);
        for c in 0..m {
            let mut dets: Vec<&DetectedInstance> = pred.instances.iter().filter(|d| d.class_index == c).collect();
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            let gts: Vec<&InstanceAnnotation> = gt_instances.iter().filter(|g| g.class_index == c).collect();
            per_class.push(ClassImage {
                num_gt: gts.len(),
                mask: overlaps(&dets, &gts, IouMode::Mask),
                boxes: overlaps(&dets, &gts, IouMode::Box),
            });
        }
        if let Some(d) = pred.instances.iter().find(|d| d.class_index >= m) {
            return Err(Error::Invalid(format!("class index {} out of range", d.class_index)));
        }
        self.images.push(per_class);
        Ok(())
    }

    fn class_ap(&self, c: usize, mode: IouMode, t: f64) -> f64 {
        let mut scored: Vec<(f64, bool)> = Vec::new();
        let mut num_gt = 0;
        for img in &self.images {
            let ci = &img[c];
            num_gt += ci.num_gt;
            let dets = match mode {
                IouMode::Mask => &ci.mask,
                IouMode::Box => &ci.boxes,
            };
            let tp = greedy_match(dets, ci.num_gt, t);
            scored.extend(dets.iter().zip(tp).map(|(d, tp)| (d.score, tp)));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let flags: Vec<bool> = scored.iter().map(|s| s.1).collect();
        interpolated_ap(&flags, num_gt)
    }

    fn class_counts(&self, c: usize, t: f64) -> (usize, usize, usize) {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for img in &self.images {
            let ci = &img[c];
            let kept: Vec<ScoredOverlaps> = ci.mask.iter().filter(|d| d.score >= self.score_floor).cloned().collect();
            let m = greedy_match(&kept, ci.num_gt, t);
            let hits = m.iter().filter(|&&x| x).count();
            tp += hits;
            fp += kept.len() - hits;
            fn_ += ci.num_gt - hits;
        }
        (tp, fp, fn_)
    }

    pub fn report(&self) -> MetricReport {
        let thresholds = iou_thresholds();
        let ious = self.iou.per_class();
        let nt = thresholds.len();
        let mut counts = Counts {
            tp: vec![0; nt],
            fp: vec![0; nt],
            fn_: vec![0; nt],
        };
        let mut per_class = Vec::new();
        for (c, name) in self.class_names.iter().enumerate() {
            let num_gt: usize = self.images.iter().map(|i| i[c].num_gt).sum();
            let mut cm = ClassMetrics {
                name: name.clone(),
                num_gt,
                ap: Vec::new(),
                ap_box: Vec::new(),
                f: Vec::new(),
                iou: ious[c],
            };
            for (k, &t) in thresholds.iter().enumerate() {
                let (tp, fp, fn_) = self.class_counts(c, t);
                counts.tp[k] += tp;
                counts.fp[k] += fp;
                counts.fn_[k] += fn_;
                if num_gt > 0 {
                    cm.ap.push(self.class_ap(c, IouMode::Mask, t));
                    cm.ap_box.push(self.class_ap(c, IouMode::Box, t));
                    cm.f.push(f_score(tp, fp, fn_));
                }
            }
            per_class.push(cm);
        }
        let present: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.num_gt > 0).collect();
        let at = |k: usize| mean(present.iter().map(|c| c.ap[k]));
        MetricReport {
            dataset: self.dataset.clone(),
            images: self.images.len(),
            ap50: at(0),
            ap75: at(5),
            map: mean(present.iter().filter_map(|c| c.map())),
            map_b: mean(present.iter().filter_map(|c| c.map_box())),
            maf: mean(present.iter().filter_map(|c| c.f_mean())),
            miou: self.iou.miou(),
            per_class,
            counts,
        }
    }
}

/// Ground truth restated as a prediction with score 1.
pub fn ground_truth_prediction(sample: &SegSample) -> Prediction {
    Prediction {
        instances: sample
            .instances
            .iter()
            .map(|g| DetectedInstance {
                class_index: g.class_index,
                score: 1.0,
                mask: g.mask.clone(),
                bbox: g.bbox,
                source: Source::Whole,
            })
            .collect(),
        semantic: sample.semantic.clone(),
    }
}

/// Predicts every sample of `split` with the dataset's own class names.
pub fn evaluate_split(model: &DocSegModel, index: &SampleIndex, split: &str, cfg: &InferenceConfig) -> Result<MetricReport> {
    let subset = index.split(split);
    if subset.is_empty() {
        return Err(Error::Config(format!(
            "split `{split}` of dataset `{}` is empty or missing",
            index.dataset.name
        )));
    }
    let names = index.dataset.class_names.clone();
    let mut ev = Evaluator::new(index.dataset.name.clone(), names.clone(), cfg.score_floor);
    for i in 0..subset.len() {
        let sample = subset.load(i)?;
        let pred = predict(model, &sample.image, &names, cfg)?;
        ev.add(&pred, &sample.instances, &sample.semantic)?;
    }
    Ok(ev.report())
}
