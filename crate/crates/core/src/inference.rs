//! Whole-image and sliding-window prediction, boundary down-weighting and
//! cross-source mask NMS.

use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::SemanticMap;
use crate::model::DocSegModel;
use crate::nn::to_f64_vec;
use crate::raster::{resize_scalar_bilinear, BBox, LabelMap, Mask, RgbImage};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmsMode {
    Mask,
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Side of the square the whole image is resized to.
    pub inference_size: usize,
    pub use_patches: bool,
    pub patch_size: usize,
    /// Short side the image is scaled to before tiling.
    pub patch_short_side: usize,
    /// Overlap between neighboring patches.
    pub patch_overlap: usize,
    pub boundary_factor: f64,
    pub boundary_margin: usize,
    pub iou_threshold: f64,
    pub score_floor: f64,
    pub nms: NmsMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            inference_size: 256,
            use_patches: true,
            patch_size: 256,
            patch_short_side: 320,
            patch_overlap: 64,
            boundary_factor: 0.5,
            boundary_margin: 8,
            iou_threshold: 0.5,
            score_floor: 0.3,
            nms: NmsMode::Mask,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("inference_size", self.inference_size), ("patch_size", self.patch_size)] {
            if v == 0 || v % 32 != 0 {
                return Err(Error::Config(format!("{name} {v} is not a positive multiple of 32")));
            }
        }
        if self.patch_overlap >= self.patch_size {
            return Err(Error::Config("patch_overlap must be smaller than patch_size".into()));
        }
        if !(0.0..=1.0).contains(&self.boundary_factor) || !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::Config("boundary_factor and score_floor must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::Config("iou_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Whole,
    Patch(usize, usize),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Whole => write!(f, "whole"),
            Source::Patch(i, j) => write!(f, "patch:{i},{j}"),
        }
    }
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "whole" {
            return Ok(Source::Whole);
        }
        let (i, j) = s
            .strip_prefix("patch:")
            .and_then(|r| r.split_once(','))
            .ok_or_else(|| format!("bad source `{s}`"))?;
        Ok(Source::Patch(
            i.parse().map_err(|_| format!("bad source `{s}`"))?,
            j.parse().map_err(|_| format!("bad source `{s}`"))?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectedInstance {
    pub class_index: usize,
    pub score: f64,
    /// Full-image coordinates.
    pub mask: Mask,
    pub bbox: BBox,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub instances: Vec<DetectedInstance>,
    pub semantic: SemanticMap,
}

/// Sliding-window layout over an `height x width` image. Offsets are
/// `(x, y)`; the last tile on each axis is aligned to the image edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    pub offsets: Vec<(usize, usize)>,
}

fn axis_positions(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let mut p: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + patch < len).collect();
    p.push(len - patch);
    p
}

impl TileGrid {
    pub fn new(height: usize, width: usize, patch_size: usize, stride: usize) -> Result<Self> {
        if stride == 0 || stride > patch_size {
            return Err(Error::Config(format!("stride {stride} must lie in 1..={patch_size}")));
        }
        let ys = axis_positions(height, patch_size, stride);
        let xs = axis_positions(width, patch_size, stride);
        let offsets = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
        Ok(Self {
            height,
            width,
            patch_size,
            stride,
            rows: ys.len(),
            cols: xs.len(),
            offsets,
        })
    }

    pub fn with_overlap(height: usize, width: usize, patch_size: usize, overlap: usize) -> Result<Self> {
        Self::new(height, width, patch_size, patch_size.saturating_sub(overlap))
    }

    /// `(row, col, x, y)` for every tile, row-major.
    pub fn tiles(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        self.offsets
            .iter()
            .enumerate()
            .map(|(k, &(x, y))| (k / self.cols, k % self.cols, x, y))
    }

    pub fn fits(&self) -> bool {
        self.patch_size <= self.height && self.patch_size <= self.width
    }

    /// Places a patch-local mask into full-image coordinates.
    pub fn to_full(&self, mask: &Mask, x: usize, y: usize) -> Mask {
        mask.paste(self.height, self.width, y, x)
    }

    /// Cuts the patch at `(x, y)` out of a full-image mask.
    pub fn to_local(&self, mask: &Mask, x: usize, y: usize) -> Mask {
        mask.crop(y, x, self.patch_size, self.patch_size)
    }
}

struct RawOutput {
    instances: Vec<DetectedInstance>,
    semantic_logits: Vec<Vec<f32>>,
    shape: (usize, usize),
}

/// Runs the model on an image whose sides are multiples of 32 and decodes
/// instances scoring at least `score_floor` at `out_h x out_w`.
fn decode(model: &DocSegModel, image: &RgbImage, names: &[String], out: (usize, usize), score_floor: f64) -> Result<RawOutput> {
    let output = model.forward_image(image, names)?;
    let last = output.decoder.last().detach();
    let ids = output.decoder.active_ids.last().expect("at least one entry");
    let m = names.len();
    let (mh, mw) = output.mask_shape;
    let (oh, ow) = out;
    let probs = last.class_probs()?;
    let width = m + 1;
    let probs = to_f64_vec(&probs)?;
    let boxes = to_f64_vec(&last.boxes)?;
    let logits = last.instance_logits.to_dtype(candle_core::DType::F32)?;
    let mut instances = Vec::new();
    for &q in ids {
        let row = &probs[q * width..q * width + m];
        let (class_index, &score) = row
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |best, (c, p)| if *p > *best.1 { (c, p) } else { best });
        if score < score_floor {
            continue;
        }
        let l: Vec<f32> = logits.get(q)?.to_vec1()?;
        let up = resize_scalar_bilinear(&l, mh, mw, oh, ow);
        let mask = Mask {
            height: oh,
            width: ow,
            data: up.iter().map(|&v| v > 0.0).collect(),
        };
        if mask.is_empty() {
            continue;
        }
        let b = &boxes[q * 4..q * 4 + 4];
        instances.push(DetectedInstance {
            class_index,
            score,
            mask,
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            source: Source::Whole,
        });
    }
    let sem = last.semantic_logits.to_dtype(candle_core::DType::F32)?;
    let semantic_logits = (0..m)
        .map(|c| Ok(resize_scalar_bilinear(&sem.get(c)?.to_vec1::<f32>()?, mh, mw, oh, ow)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RawOutput {
        instances,
        semantic_logits,
        shape: out,
    })
}

/// Per-pixel argmax over semantic logits; background (label `M`) where
/// every class probability is below one half.
fn semantic_argmax(logits: &[Vec<f32>], (h, w): (usize, usize)) -> SemanticMap {
    let m = logits.len();
    let mut map = LabelMap::filled(h, w, m as u32);
    for i in 0..h * w {
        let mut best = (m, 0.0f32);
        for (c, l) in logits.iter().enumerate() {
            if l[i] >= 0.0 && (best.0 == m || l[i] > best.1) {
                best = (c, l[i]);
            }
        }
        map.data[i] = best.0 as u32;
    }
    map
}

fn resized_square(image: &RgbImage, size: usize) -> RgbImage {
    if image.height == size && image.width == size {
        image.clone()
    } else {
        image.resize_bilinear(size, size)
    }
}

/// Resizes to `inference_size²`, predicts, and maps masks and the semantic
/// map back to the original image size.
pub fn predict_whole(model: &DocSegModel, image: &RgbImage, names: &[String], cfg: &InferenceConfig) -> Result<Prediction> {
    if names.is_empty() {
        return Err(Error::NoClasses);
    }
    let input = resized_square(image, cfg.inference_size);
    let raw = decode(model, &input, names, (image.height, image.width), cfg.score_floor)?;
    Ok(Prediction {
        semantic: semantic_argmax(&raw.semantic_logits, raw.shape),
        instances: raw.instances,
    })
}

fn touches_interior_edge(mask: &Mask, edges: [bool; 4], margin: usize) -> bool {
    let [top, left, bottom, right] = edges;
    let (h, w) = (mask.height, mask.width);
    (0..h).any(|y| {
        (0..w).any(|x| {
            mask.get(y, x)
                && ((top && y < margin)
                    || (left && x < margin)
                    || (bottom && y + margin >= h)
                    || (right && x + margin >= w))
        })
    })
}

/// Predicts every tile of `grid` and maps the detections into full-image
/// coordinates. Detections within `boundary_margin` of an edge shared with
/// another tile have their score multiplied by `boundary_factor`. Falls back
/// to the whole-image path when a patch is larger than the image.
pub fn predict_patches(
    model: &DocSegModel,
    image: &RgbImage,
    names: &[String],
    grid: &TileGrid,
    cfg: &InferenceConfig,
) -> Result<Vec<DetectedInstance>> {
    if names.is_empty() {
        return Err(Error::NoClasses);
    }
    if (grid.height, grid.width) != (image.height, image.width) {
        return Err(Error::Shape(format!(
            "grid is {}x{}, image is {}x{}",
            grid.height, grid.width, image.height, image.width
        )));
    }
    if !grid.fits() {
        return Ok(predict_whole(model, image, names, cfg)?.instances);
    }
    let p = grid.patch_size;
    let mut out = Vec::new();
    for (row, col, x, y) in grid.tiles() {
        let tile = image.crop(y, x, p, p, [1.0; 3]);
        let raw = decode(model, &tile, names, (p, p), cfg.score_floor)?;
        let edges = [y > 0, x > 0, y + p < grid.height, x + p < grid.width];
        for mut inst in raw.instances {
            if touches_interior_edge(&inst.mask, edges, cfg.boundary_margin) {
                inst.score *= cfg.boundary_factor;
            }
            let [cx, cy, w, h] = inst.bbox.to_array();
            inst.bbox = BBox::new(
                (x as f64 + cx * p as f64) / grid.width as f64,
                (y as f64 + cy * p as f64) / grid.height as f64,
                w * p as f64 / grid.width as f64,
                h * p as f64 / grid.height as f64,
            );
            inst.mask = grid.to_full(&inst.mask, x, y);
            inst.source = Source::Patch(row, col);
            out.push(inst);
        }
    }
    Ok(out)
}

fn overlap(a: &DetectedInstance, b: &DetectedInstance, mode: NmsMode) -> f64 {
    match mode {
        NmsMode::Mask => a.mask.iou(&b.mask),
        NmsMode::Box => a.bbox.iou(&b.bbox),
    }
}

/// Orders by score (descending), whole-image detections first, then larger
/// masks first. Ties beyond that keep input order.
pub fn detection_order(a: &DetectedInstance, b: &DetectedInstance) -> std::cmp::Ordering {
    let whole = |d: &DetectedInstance| d.source != Source::Whole;
    b.score
        .total_cmp(&a.score)
        .then_with(|| whole(a).cmp(&whole(b)))
        .then_with(|| b.mask.area().cmp(&a.mask.area()))
}

/// Greedy per-class NMS over the union of both sources, suppressing a
/// detection when its overlap with a kept one exceeds `iou_threshold`.
pub fn merge_and_nms(
    whole: Vec<DetectedInstance>,
    patches: Vec<DetectedInstance>,
    iou_threshold: f64,
    mode: NmsMode,
) -> Vec<DetectedInstance> {
    let mut all: Vec<DetectedInstance> = whole.into_iter().chain(patches).collect();
    all.sort_by(detection_order);
    let mut kept: Vec<DetectedInstance> = Vec::new();
    for d in all {
        let suppressed = kept
            .iter()
            .any(|k| k.class_index == d.class_index && overlap(k, &d, mode) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Whole-image prediction merged with sliding-window prediction at
/// `patch_short_side`.
pub fn predict(model: &DocSegModel, image: &RgbImage, names: &[String], cfg: &InferenceConfig) -> Result<Prediction> {
    cfg.validate()?;
    let mut whole = predict_whole(model, image, names, cfg)?;
    if !cfg.use_patches {
        whole.instances.sort_by(detection_order);
        return Ok(whole);
    }
    let (h, w) = (image.height, image.width);
    let scale = cfg.patch_short_side as f64 / h.min(w) as f64;
    let (sh, sw) = (
        ((h as f64 * scale).round() as usize).max(1),
        ((w as f64 * scale).round() as usize).max(1),
    );
    let grid = TileGrid::with_overlap(sh, sw, cfg.patch_size, cfg.patch_overlap)?;
    let patches = if grid.fits() {
        let scaled = image.resize_bilinear(sh, sw);
        predict_patches(model, &scaled, names, &grid, cfg)?
            .into_iter()
            .filter_map(|mut d| {
                d.mask = d.mask.resize_nearest(h, w);
                (!d.mask.is_empty()).then_some(d)
            })
            .collect()
    } else {
        Vec::new()
    };
    let instances = merge_and_nms(std::mem::take(&mut whole.instances), patches, cfg.iou_threshold, cfg.nms);
    Ok(Prediction {
        instances,
        semantic: whole.semantic,
    })
}

pub const PREDICTION_MAGIC: &str = "DSPRED 1";

/// Text form:
///
/// ```text
/// DSPRED 1
/// size <height> <width>
/// class <name>                              one per class, in index order
/// instance <score> <cx> <cy> <w> <h> <source> <class index>
/// mask <runs>
/// semantic <label:count runs>
/// ```
pub fn write_prediction(pred: &Prediction, class_names: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{PREDICTION_MAGIC}");
    let _ = writeln!(s, "size {} {}", pred.semantic.height, pred.semantic.width);
    for n in class_names {
        let _ = writeln!(s, "class {n}");
    }
    for d in &pred.instances {
        let b = d.bbox;
        let _ = writeln!(
            s,
            "instance {} {} {} {} {} {} {}",
            d.score, b.cx, b.cy, b.w, b.h, d.source, d.class_index
        );
        let _ = writeln!(s, "mask {}", d.mask.rle_string());
    }
    let _ = writeln!(s, "semantic {}", pred.semantic.rle_string());
    s
}

pub fn parse_prediction(text: &str, file: &Path) -> Result<(Vec<String>, Prediction)> {
    let err = |field: &str, msg: String| Error::schema(file, field, msg);
    let mut lines = text.lines();
    if lines.next() != Some(PREDICTION_MAGIC) {
        return Err(err("header", format!("expected `{PREDICTION_MAGIC}`")));
    }
    let dims: Vec<usize> = lines
        .next()
        .and_then(|l| l.strip_prefix("size "))
        .ok_or_else(|| err("size", "missing".into()))?
        .split(' ')
        .map(|v| v.parse().map_err(|_| err("size", format!("bad value `{v}`"))))
        .collect::<Result<_>>()?;
    let [height, width] = dims[..] else {
        return Err(err("size", "expected two integers".into()));
    };
    let mut names = Vec::new();
    let mut instances = Vec::new();
    let mut semantic = None;
    while let Some(line) = lines.next() {
        if let Some(n) = line.strip_prefix("class ") {
            names.push(n.to_string());
        } else if let Some(rest) = line.strip_prefix("instance ") {
            let f: Vec<&str> = rest.split(' ').collect();
            if f.len() != 7 {
                return Err(err("instance", "expected seven fields".into()));
            }
            let num = |i: usize| -> Result<f64> { f[i].parse().map_err(|_| err("instance", format!("bad number `{}`", f[i]))) };
            let source: Source = f[5].parse().map_err(|m| err("source", m))?;
            let class_index: usize = f[6].parse().map_err(|_| err("class_index", format!("bad value `{}`", f[6])))?;
            if class_index >= names.len() {
                return Err(err("class_index", format!("{class_index} out of range")));
            }
            let runs: Vec<usize> = lines
                .next()
                .and_then(|l| l.strip_prefix("mask"))
                .ok_or_else(|| err("mask", "missing after instance".into()))?
                .split(' ')
                .filter(|t| !t.is_empty())
                .map(|t| t.parse().map_err(|_| err("mask", format!("bad run `{t}`"))))
                .collect::<Result<_>>()?;
            let mask = Mask::from_rle(height, width, &runs).ok_or_else(|| err("mask", "runs do not cover the image".into()))?;
            instances.push(DetectedInstance {
                class_index,
                score: num(0)?,
                mask,
                bbox: BBox::new(num(1)?, num(2)?, num(3)?, num(4)?),
                source,
            });
        } else if let Some(rest) = line.strip_prefix("semantic") {
            let runs = rest
                .split(' ')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    let (l, n) = t.split_once(':').ok_or_else(|| err("semantic", format!("bad run `{t}`")))?;
                    Ok((
                        l.parse().map_err(|_| err("semantic", format!("bad label `{l}`")))?,
                        n.parse().map_err(|_| err("semantic", format!("bad count `{n}`")))?,
                    ))
                })
                .collect::<Result<Vec<(u32, usize)>>>()?;
            semantic = Some(LabelMap::from_rle(height, width, &runs).ok_or_else(|| err("semantic", "runs do not cover the image".into()))?);
        } else if !line.is_empty() {
            return Err(err(line.split(' ').next().unwrap_or(line), "unknown record".into()));
        }
    }
    let semantic = semantic.ok_or_else(|| err("semantic", "missing".into()))?;
    Ok((names, Prediction { instances, semantic }))
}
