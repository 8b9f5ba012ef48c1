//! Unified annotation data model.
//!
//! Every task (layout regions, text lines, table cells) is expressed as a
//! set of instance masks plus a semantic label map over the dataset's
//! class names. Background is the label one past the last class.

mod corpus;
mod format;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::raster::{BBox, LabelMap, Mask, RgbImage};
use crate::{Error, Result};

pub use corpus::{load_corpus, SampleIndex, SampleRef};
pub use format::{
    parse_annotation, parse_manifest, read_sample, write_annotation, write_manifest, write_sample,
    ANNOTATION_MAGIC, MANIFEST_MAGIC,
};
pub use synth::{
    generate_sample, generate_synthetic_corpus, ClassRecipe, CorpusSummary, Count,
    DatasetRecipe, ElementKind, SynthRecipe,
};

/// Task groups, in the order curriculum stages add them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskGroup {
    Layout,
    AncientHandwritten,
    Table,
    SceneText,
}

impl TaskGroup {
    pub const ALL: [TaskGroup; 4] = [
        TaskGroup::Layout,
        TaskGroup::AncientHandwritten,
        TaskGroup::Table,
        TaskGroup::SceneText,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskGroup::Layout => "layout",
            TaskGroup::AncientHandwritten => "ancient_handwritten",
            TaskGroup::Table => "table",
            TaskGroup::SceneText => "scene_text",
        }
    }
}

impl fmt::Display for TaskGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown task group `{s}`")))
    }
}

/// A named dataset: its ordered class names, task group and split membership.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub name: String,
    pub class_names: Vec<String>,
    pub task_group: TaskGroup,
    /// split name -> sample ids, in manifest order.
    pub splits: BTreeMap<String, Vec<String>>,
}

impl DatasetSpec {
    pub fn new(
        name: impl Into<String>,
        class_names: Vec<String>,
        task_group: TaskGroup,
    ) -> Result<Self> {
        check_class_names(&class_names)?;
        Ok(Self {
            name: name.into(),
            class_names,
            task_group,
            splits: BTreeMap::new(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Label used for background in semantic maps.
    pub fn background(&self) -> u32 {
        self.class_names.len() as u32
    }

    pub fn split_sizes(&self) -> BTreeMap<String, usize> {
        self.splits
            .iter()
            .map(|(k, v)| (k.clone(), v.len()))
            .collect()
    }
}

/// Rejects empty lists and duplicate names.
pub fn check_class_names(names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(Error::NoClasses);
    }
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(Error::DuplicateClass(n.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub class_index: usize,
    pub mask: Mask,
    pub bbox: BBox,
}

impl InstanceAnnotation {
    /// Builds an annotation whose box is the tight box of `mask`.
    pub fn from_mask(class_index: usize, mask: Mask) -> Option<Self> {
        let bbox = BBox::from_mask(&mask)?;
        Some(Self {
            class_index,
            mask,
            bbox,
        })
    }
}

/// Semantic label raster; values in `[0, M]` where `M` is background.
pub type SemanticMap = LabelMap;

#[derive(Debug, Clone)]
pub struct SegSample {
    pub id: String,
    pub image: RgbImage,
    pub instances: Vec<InstanceAnnotation>,
    pub semantic: SemanticMap,
    pub dataset: Arc<DatasetSpec>,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }
}

/// Paints instances in list order over a background of label `num_classes`.
pub fn derive_semantic(
    instances: &[InstanceAnnotation],
    num_classes: usize,
    height: usize,
    width: usize,
) -> SemanticMap {
    let mut map = LabelMap::filled(height, width, num_classes as u32);
    for inst in instances {
        map.paint(&inst.mask, inst.class_index as u32);
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    RasterShape,
    ClassOutOfRange,
    EmptyMask,
    BboxOutOfRange,
    BboxNotTight,
    SemanticLabelOutOfRange,
    SemanticInconsistent,
    ImageValueOutOfRange,
}

impl ViolationKind {
    pub fn name(&self) -> &'static str {
        match self {
            ViolationKind::RasterShape => "raster shape mismatch",
            ViolationKind::ClassOutOfRange => "class out of range",
            ViolationKind::EmptyMask => "empty mask",
            ViolationKind::BboxOutOfRange => "bbox out of range",
            ViolationKind::BboxNotTight => "bbox not tight",
            ViolationKind::SemanticLabelOutOfRange => "semantic label out of range",
            ViolationKind::SemanticInconsistent => "semantic map inconsistent with instances",
            ViolationKind::ImageValueOutOfRange => "image value out of range",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub instance: Option<usize>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.instance {
            Some(i) => write!(f, "instance {i}: {}", self.kind.name()),
            None => f.write_str(self.kind.name()),
        }
    }
}

/// Checks every sample invariant; the result is empty iff the sample is valid.
pub fn validate_sample(sample: &SegSample) -> Vec<Violation> {
    let mut out = Vec::new();
    let (h, w) = (sample.image.height, sample.image.width);
    let m = sample.dataset.num_classes();
    let push = |out: &mut Vec<Violation>, kind, instance| out.push(Violation { kind, instance });

    if sample.image.data.len() != h * w * 3
        || sample.semantic.height != h
        || sample.semantic.width != w
        || sample.semantic.data.len() != h * w
    {
        push(&mut out, ViolationKind::RasterShape, None);
        return out;
    }
    if sample
        .image
        .data
        .iter()
        .any(|v| !(0.0..=1.0).contains(v))
    {
        push(&mut out, ViolationKind::ImageValueOutOfRange, None);
    }

    let mut shapes_ok = true;
    for (i, inst) in sample.instances.iter().enumerate() {
        if inst.mask.height != h || inst.mask.width != w || inst.mask.data.len() != h * w {
            push(&mut out, ViolationKind::RasterShape, Some(i));
            shapes_ok = false;
            continue;
        }
        if inst.class_index >= m {
            push(&mut out, ViolationKind::ClassOutOfRange, Some(i));
        }
        let b = inst.bbox;
        let in_unit = [b.cx, b.cy, b.w, b.h]
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v));
        if !in_unit || b.w <= 0.0 || b.h <= 0.0 {
            push(&mut out, ViolationKind::BboxOutOfRange, Some(i));
        }
        match BBox::from_mask(&inst.mask) {
            None => push(&mut out, ViolationKind::EmptyMask, Some(i)),
            Some(tight) => {
                // 6-digit storage adds at most ~1e-6 * side of rounding.
                if in_unit && tight.max_pixel_deviation(&b, h, w) > 1.0 + 1e-3 {
                    push(&mut out, ViolationKind::BboxNotTight, Some(i));
                }
            }
        }
    }

    if sample.semantic.data.iter().any(|&v| v as usize > m) {
        push(&mut out, ViolationKind::SemanticLabelOutOfRange, None);
    } else if shapes_ok && derive_semantic(&sample.instances, m, h, w) != sample.semantic {
        push(&mut out, ViolationKind::SemanticInconsistent, None);
    }
    out
}
