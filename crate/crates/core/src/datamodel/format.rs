//! On-disk corpus format.
//!
//! ```text
//! <root>/<dataset>/manifest
//! <root>/<dataset>/<split>/<id>.img   PNG-encoded RGB raster
//! <root>/<dataset>/<split>/<id>.ann   annotation text
//! ```
//!
//! Manifest, one record per line, in this order:
//!
//! ```text
//! DSMANIFEST 1
//! name <dataset name>
//! task_group <layout|ancient_handwritten|table|scene_text>
//! class <class name>            (one line per class, index order)
//! split <split name> <id> <id> ...
//! ```
//!
//! Annotation:
//!
//! ```text
//! DSANN 1
//! size <height> <width>
//! instance <class_index> <cx> <cy> <w> <h>   (6 decimal digits each)
//! mask <run> <run> ...                        (follows each instance line)
//! semantic <label>:<count> ...
//! ```
//!
//! Mask runs are row-major and alternate background/foreground starting
//! with a (possibly empty) background run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{check_class_names, DatasetSpec, InstanceAnnotation, SegSample, TaskGroup};
use crate::raster::{BBox, LabelMap, Mask, RgbImage};
use crate::{Error, Result};

pub const MANIFEST_MAGIC: &str = "DSMANIFEST 1";
pub const ANNOTATION_MAGIC: &str = "DSANN 1";

pub fn write_manifest(spec: &DatasetSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{MANIFEST_MAGIC}");
    let _ = writeln!(s, "name {}", spec.name);
    let _ = writeln!(s, "task_group {}", spec.task_group);
    for c in &spec.class_names {
        let _ = writeln!(s, "class {c}");
    }
    for (split, ids) in &spec.splits {
        s.push_str("split ");
        s.push_str(split);
        for id in ids {
            s.push(' ');
            s.push_str(id);
        }
        s.push('\n');
    }
    s
}

pub fn parse_manifest(text: &str, file: &Path) -> Result<DatasetSpec> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == MANIFEST_MAGIC => {}
        _ => return Err(Error::schema(file, "header", format!("expected `{MANIFEST_MAGIC}`"))),
    }
    let mut name = None;
    let mut group = None;
    let mut classes = Vec::new();
    let mut splits = std::collections::BTreeMap::new();
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "name" => name = Some(rest.to_string()),
            "task_group" => {
                group = Some(
                    rest.parse::<TaskGroup>()
                        .map_err(|e| Error::schema(file, "task_group", e.to_string()))?,
                )
            }
            "class" => classes.push(rest.to_string()),
            "split" => {
                let mut parts = rest.split(' ').filter(|p| !p.is_empty());
                let split = parts
                    .next()
                    .ok_or_else(|| Error::schema(file, "split", format!("line {}: missing split name", n + 1)))?;
                splits.insert(split.to_string(), parts.map(str::to_string).collect());
            }
            other => {
                return Err(Error::schema(
                    file,
                    other,
                    format!("line {}: unknown record", n + 1),
                ))
            }
        }
    }
    let name = name.ok_or_else(|| Error::schema(file, "name", "missing"))?;
    let task_group = group.ok_or_else(|| Error::schema(file, "task_group", "missing"))?;
    check_class_names(&classes).map_err(|e| Error::schema(file, "class", e.to_string()))?;
    Ok(DatasetSpec {
        name,
        class_names: classes,
        task_group,
        splits,
    })
}

pub fn write_annotation(sample: &SegSample) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{ANNOTATION_MAGIC}");
    let _ = writeln!(s, "size {} {}", sample.height(), sample.width());
    for inst in &sample.instances {
        let b = inst.bbox;
        let _ = writeln!(
            s,
            "instance {} {:.6} {:.6} {:.6} {:.6}",
            inst.class_index, b.cx, b.cy, b.w, b.h
        );
        let _ = writeln!(s, "mask {}", inst.mask.rle_string());
    }
    let _ = writeln!(s, "semantic {}", sample.semantic.rle_string());
    s
}

/// Parses annotation text. `num_classes` bounds class indices and semantic labels.
pub fn parse_annotation(
    text: &str,
    file: &Path,
    num_classes: usize,
) -> Result<((usize, usize), Vec<InstanceAnnotation>, LabelMap)> {
    let err = |field: &str, msg: String| Error::schema(file, field, msg);
    let mut lines = text.lines();
    if lines.next() != Some(ANNOTATION_MAGIC) {
        return Err(err("header", format!("expected `{ANNOTATION_MAGIC}`")));
    }
    let size_line = lines.next().ok_or_else(|| err("size", "missing".into()))?;
    let dims: Vec<usize> = size_line
        .strip_prefix("size ")
        .ok_or_else(|| err("size", "missing".into()))?
        .split(' ')
        .map(|v| v.parse().map_err(|_| err("size", format!("bad value `{v}`"))))
        .collect::<Result<_>>()?;
    let [height, width] = dims[..] else {
        return Err(err("size", "expected two integers".into()));
    };

    let mut instances = Vec::new();
    let mut semantic = None;
    while let Some(line) = lines.next() {
        if let Some(rest) = line.strip_prefix("instance ") {
            let fields: Vec<&str> = rest.split(' ').collect();
            if fields.len() != 5 {
                return Err(err("instance", "expected class_index and four bbox values".into()));
            }
            let class_index: usize = fields[0]
                .parse()
                .map_err(|_| err("class_index", format!("bad value `{}`", fields[0])))?;
            if class_index >= num_classes {
                return Err(err(
                    "class_index",
                    format!("{class_index} out of range for {num_classes} classes"),
                ));
            }
            let mut b = [0f64; 4];
            for (slot, v) in b.iter_mut().zip(&fields[1..]) {
                let x: f64 = v.parse().map_err(|_| err("bbox", format!("bad value `{v}`")))?;
                if !(0.0..=1.0).contains(&x) {
                    return Err(err("bbox", format!("value {v} outside [0, 1]")));
                }
                *slot = x;
            }
            let mask_line = lines
                .next()
                .and_then(|l| l.strip_prefix("mask"))
                .ok_or_else(|| err("mask", "missing after instance".into()))?;
            let runs = parse_runs(mask_line.trim_start()).map_err(|m| err("mask", m))?;
            let mask = Mask::from_rle(height, width, &runs)
                .ok_or_else(|| err("mask", format!("runs do not cover {height}x{width}")))?;
            instances.push(InstanceAnnotation {
                class_index,
                mask,
                bbox: BBox::new(b[0], b[1], b[2], b[3]),
            });
        } else if let Some(rest) = line.strip_prefix("semantic") {
            let mut runs = Vec::new();
            for tok in rest.split(' ').filter(|t| !t.is_empty()) {
                let (l, n) = tok
                    .split_once(':')
                    .ok_or_else(|| err("semantic", format!("bad run `{tok}`")))?;
                let label: u32 = l.parse().map_err(|_| err("semantic", format!("bad label `{l}`")))?;
                if label as usize > num_classes {
                    return Err(err("semantic", format!("label {label} out of range")));
                }
                let n: usize = n.parse().map_err(|_| err("semantic", format!("bad count `{n}`")))?;
                runs.push((label, n));
            }
            semantic = Some(
                LabelMap::from_rle(height, width, &runs)
                    .ok_or_else(|| err("semantic", format!("runs do not cover {height}x{width}")))?,
            );
        } else if !line.is_empty() {
            let key = line.split(' ').next().unwrap_or(line);
            return Err(err(key, "unknown record".into()));
        }
    }
    let semantic = semantic.ok_or_else(|| err("semantic", "missing".into()))?;
    Ok(((height, width), instances, semantic))
}

fn parse_runs(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(' ')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("bad run `{t}`")))
        .collect()
}

pub(crate) fn sample_paths(dataset_dir: &Path, split: &str, id: &str) -> (PathBuf, PathBuf) {
    let dir = dataset_dir.join(split);
    (dir.join(format!("{id}.img")), dir.join(format!("{id}.ann")))
}

/// Writes `<dataset_dir>/<split>/<id>.{img,ann}`.
pub fn write_sample(dataset_dir: &Path, split: &str, sample: &SegSample) -> Result<()> {
    let (img, ann) = sample_paths(dataset_dir, split, &sample.id);
    let dir = img.parent().expect("sample path has a parent");
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    std::fs::write(&img, sample.image.encode_png()?).map_err(|e| Error::io(&img, e))?;
    std::fs::write(&ann, write_annotation(sample)).map_err(|e| Error::io(&ann, e))?;
    Ok(())
}

pub fn read_sample(
    dataset: &Arc<DatasetSpec>,
    dataset_dir: &Path,
    split: &str,
    id: &str,
) -> Result<SegSample> {
    let (img_path, ann_path) = sample_paths(dataset_dir, split, id);
    let text = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let ((h, w), instances, semantic) = parse_annotation(&text, &ann_path, dataset.num_classes())?;
    let bytes = std::fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
    let image = RgbImage::decode(&bytes)
        .map_err(|e| Error::schema(&img_path, "image", e.to_string()))?;
    if image.height != h || image.width != w {
        return Err(Error::schema(
            &img_path,
            "size",
            format!(
                "image is {}x{} but annotation says {h}x{w}",
                image.height, image.width
            ),
        ));
    }
    Ok(SegSample {
        id: id.to_string(),
        image,
        instances,
        semantic,
        dataset: dataset.clone(),
    })
}
