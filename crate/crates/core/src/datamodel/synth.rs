//! Procedural document generator.
//!
//! Pages are cut into horizontal bands, one element per band, so
//! elements never overlap (table cells nest inside their table).
//! Axis-aligned geometry is snapped to a 4-pixel grid. Annotations are
//! the exact rasters the elements are drawn into.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::format::{write_manifest, write_sample};
use super::{derive_semantic, DatasetSpec, InstanceAnnotation, SegSample, TaskGroup};
use crate::raster::{Mask, RgbImage};
use crate::{Error, Result};

const GRID: usize = 4;
const MARGIN: usize = 8;
const BAND_GAP: usize = 4;
const RULE: usize = 4;
const MIN_CELL: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Title,
    Paragraph,
    Figure,
    Table,
    /// Cells of every table in the same image; the class count is ignored.
    Cell,
    TextLine,
}

impl ElementKind {
    fn band_weight(self) -> f64 {
        match self {
            ElementKind::Title | ElementKind::TextLine => 1.0,
            ElementKind::Paragraph => 2.5,
            ElementKind::Figure => 3.0,
            ElementKind::Table => 4.0,
            ElementKind::Cell => 0.0,
        }
    }
}

/// Instances per image: an exact number or an inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Count {
    Exact(usize),
    Range([usize; 2]),
}

impl Default for Count {
    fn default() -> Self {
        Count::Exact(1)
    }
}

impl Count {
    fn bounds(self) -> (usize, usize) {
        match self {
            Count::Exact(n) => (n, n),
            Count::Range([a, b]) => (a, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRecipe {
    pub name: String,
    pub kind: ElementKind,
    #[serde(default)]
    pub count: Count,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecipe {
    pub name: String,
    pub task_group: TaskGroup,
    pub splits: BTreeMap<String, usize>,
    pub classes: Vec<ClassRecipe>,
}

impl DatasetRecipe {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// Corpus recipe, written as TOML:
///
/// ```toml
/// image_size = 256
///
/// [[datasets]]
/// name = "tables"
/// task_group = "table"
/// splits = { train = 20, val = 10 }
/// classes = [
///   { name = "table", kind = "table", count = 1 },
///   { name = "cell", kind = "cell" },
/// ]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRecipe {
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub datasets: Vec<DatasetRecipe>,
}

fn default_image_size() -> usize {
    256
}

impl SynthRecipe {
    /// Parses and validates. Syntax errors carry the offending line.
    pub fn parse(text: &str) -> Result<Self> {
        let recipe: SynthRecipe = toml::from_str(text).map_err(|e| Error::Recipe(e.to_string()))?;
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Recipe(m));
        if self.image_size < 64 || self.image_size % 32 != 0 {
            return bad(format!(
                "image_size {} must be a multiple of 32 and at least 64",
                self.image_size
            ));
        }
        if self.datasets.len() < 2 {
            return bad("a recipe needs at least 2 datasets".into());
        }
        let mut groups: Vec<TaskGroup> = self.datasets.iter().map(|d| d.task_group).collect();
        groups.sort();
        groups.dedup();
        if groups.len() < 2 {
            return bad("datasets must span at least 2 task groups".into());
        }
        for (i, d) in self.datasets.iter().enumerate() {
            if d.name.is_empty() || d.name.contains(['/', '\\']) || d.name.starts_with('.') {
                return bad(format!("invalid dataset name `{}`", d.name));
            }
            if self.datasets[..i].iter().any(|o| o.name == d.name) {
                return bad(format!("duplicate dataset name `{}`", d.name));
            }
            if d.classes.is_empty() {
                return bad(format!("dataset `{}` has 0 classes", d.name));
            }
            super::check_class_names(&d.class_names())
                .map_err(|e| Error::Recipe(format!("dataset `{}`: {e}", d.name)))?;
            if self.datasets[..i]
                .iter()
                .any(|o| o.class_names() == d.class_names())
            {
                return bad(format!(
                    "dataset `{}` repeats another dataset's class list",
                    d.name
                ));
            }
            let kinds: Vec<ElementKind> = d.classes.iter().map(|c| c.kind).collect();
            let n_cell = kinds.iter().filter(|&&k| k == ElementKind::Cell).count();
            let n_table = kinds.iter().filter(|&&k| k == ElementKind::Table).count();
            if n_cell > 1 || (n_cell == 1 && n_table == 0) {
                return bad(format!(
                    "dataset `{}`: a cell class needs exactly one cell class and a table class",
                    d.name
                ));
            }
            for c in &d.classes {
                let (lo, hi) = c.count.bounds();
                if lo > hi {
                    return bad(format!("class `{}`: count range {lo}..{hi} is empty", c.name));
                }
            }
            for split in d.splits.keys() {
                if split.is_empty() || !split.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_') {
                    return bad(format!("invalid split name `{split}`"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CorpusSummary {
    pub datasets: Vec<DatasetSpec>,
}

impl fmt::Display for CorpusSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.datasets {
            let splits: Vec<String> = d
                .split_sizes()
                .iter()
                .map(|(s, n)| format!("{s}={n}"))
                .collect();
            writeln!(
                f,
                "{} [{}] classes: {} | {}",
                d.name,
                d.task_group,
                d.class_names.join(", "),
                splits.join(" ")
            )?;
        }
        Ok(())
    }
}

/// Writes the corpus under `out_dir`; a pure function of `(seed, recipe)`.
pub fn generate_synthetic_corpus(
    seed: u64,
    recipe: &SynthRecipe,
    out_dir: &Path,
) -> Result<CorpusSummary> {
    recipe.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summary = Vec::new();
    for (di, d) in recipe.datasets.iter().enumerate() {
        let mut spec = DatasetSpec::new(d.name.clone(), d.class_names(), d.task_group)?;
        for (split, &n) in &d.splits {
            spec.splits
                .insert(split.clone(), (0..n).map(|j| format!("{j:06}")).collect());
        }
        let dir = out_dir.join(&d.name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let manifest = dir.join("manifest");
        std::fs::write(&manifest, write_manifest(&spec)).map_err(|e| Error::io(&manifest, e))?;
        let spec = Arc::new(spec);
        for (split, ids) in &spec.splits {
            for (j, id) in ids.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, di, split, j));
                let sample =
                    generate_sample(&mut rng, d, spec.clone(), id.clone(), recipe.image_size)?;
                write_sample(&dir, split, &sample)?;
            }
        }
        summary.push((*spec).clone());
    }
    Ok(CorpusSummary { datasets: summary })
}

fn sample_seed(seed: u64, dataset: usize, split: &str, index: usize) -> u64 {
    let mut h = splitmix(seed ^ 0x5eed_c0de);
    h = splitmix(h ^ dataset as u64);
    for b in split.bytes() {
        h = splitmix(h ^ b as u64);
    }
    splitmix(h ^ index as u64)
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn snap(v: f64) -> usize {
    (v.max(0.0) as usize) / GRID * GRID
}

struct Canvas {
    image: RgbImage,
}

impl Canvas {
    fn fill(&mut self, y0: usize, x0: usize, y1: usize, x1: usize, rgb: [f32; 3]) {
        for y in y0..y1.min(self.image.height) {
            for x in x0..x1.min(self.image.width) {
                self.image.put(y, x, rgb);
            }
        }
    }

    fn fill_mask(&mut self, mask: &Mask, rgb: [f32; 3]) {
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(y, x) {
                    self.image.put(y, x, rgb);
                }
            }
        }
    }
}

fn rect_mask(size: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Mask {
    let mut m = Mask::new(size, size);
    m.fill_rect(y0, x0, y1, x1);
    m
}

fn gray(v: f32) -> [f32; 3] {
    [v, v, v]
}

/// Draws one page of the dataset described by `recipe`.
pub fn generate_sample(
    rng: &mut ChaCha8Rng,
    recipe: &DatasetRecipe,
    dataset: Arc<DatasetSpec>,
    id: String,
    size: usize,
) -> Result<SegSample> {
    let cell_class = recipe
        .classes
        .iter()
        .position(|c| c.kind == ElementKind::Cell);
    let mut items: Vec<(usize, ElementKind)> = Vec::new();
    for (ci, c) in recipe.classes.iter().enumerate() {
        if c.kind == ElementKind::Cell {
            continue;
        }
        let (lo, hi) = c.count.bounds();
        let n = rng.random_range(lo..=hi);
        items.extend(std::iter::repeat_n((ci, c.kind), n));
    }
    items.shuffle(rng);

    let paper = [
        0.94 + rng.random::<f32>() * 0.05,
        0.94 + rng.random::<f32>() * 0.05,
        0.92 + rng.random::<f32>() * 0.05,
    ];
    let mut canvas = Canvas {
        image: RgbImage::filled(size, size, paper),
    };
    for v in canvas.image.data.iter_mut() {
        *v = (*v + (rng.random::<f32>() - 0.5) * 0.03).clamp(0.0, 1.0);
    }

    let avail_h = size - 2 * MARGIN;
    let avail_w = size - 2 * MARGIN;
    let total_weight: f64 = items.iter().map(|(_, k)| k.band_weight()).sum();
    let mut instances = Vec::new();
    let mut y = MARGIN;
    for &(class, kind) in &items {
        let band = snap(avail_h as f64 * kind.band_weight() / total_weight);
        if band < 16 {
            return Err(Error::Recipe(format!(
                "dataset `{}`: too many elements for image size {size}",
                recipe.name
            )));
        }
        let room = band - BAND_GAP;
        match kind {
            ElementKind::Title => {
                let h = snap(rng.random_range(12.0..=20.0)).min(snap(room as f64)).max(GRID);
                let w = snap(rng.random_range(0.3..0.7) * avail_w as f64).max(GRID);
                let (y0, x0) = place(rng, y, room, h, avail_w, w);
                let ink = [
                    rng.random_range(0.05..0.2),
                    rng.random_range(0.05..0.2),
                    rng.random_range(0.15..0.35),
                ];
                canvas.fill(y0, x0, y0 + h, x0 + w, ink);
                instances.push(rect_instance(class, size, y0, x0, h, w));
            }
            ElementKind::Paragraph => {
                let h = snap(rng.random_range(0.6..=1.0) * room as f64).max(12);
                let w = snap(rng.random_range(0.5..=1.0) * avail_w as f64).max(16);
                let (y0, x0) = place(rng, y, room, h, avail_w, w);
                draw_paragraph(rng, &mut canvas, y0, x0, h, w);
                instances.push(rect_instance(class, size, y0, x0, h, w));
            }
            ElementKind::Figure => {
                let h = snap(rng.random_range(0.6..=1.0) * room as f64).max(12);
                let w = snap(rng.random_range(0.3..0.7) * avail_w as f64).max(16);
                let (y0, x0) = place(rng, y, room, h, avail_w, w);
                draw_figure(rng, &mut canvas, y0, x0, h, w);
                instances.push(rect_instance(class, size, y0, x0, h, w));
            }
            ElementKind::Table => {
                let h = snap(rng.random_range(0.7..=1.0) * room as f64).max(RULE + MIN_CELL + RULE);
                let w = snap(rng.random_range(0.5..=1.0) * avail_w as f64).max(32);
                let (y0, x0) = place(rng, y, room, h, avail_w, w);
                instances.push(rect_instance(class, size, y0, x0, h, w));
                let cells = draw_table(rng, &mut canvas, y0, x0, h, w);
                if let Some(cc) = cell_class {
                    for (cy0, cx0, ch, cw) in cells {
                        instances.push(rect_instance(cc, size, cy0, cx0, ch, cw));
                    }
                }
            }
            ElementKind::TextLine => {
                let mask = text_line_mask(rng, size, y, room, avail_w);
                let ink = gray(rng.random_range(0.08..0.3));
                canvas.fill_mask(&mask, ink);
                instances.push(
                    InstanceAnnotation::from_mask(class, mask).expect("text line is non-empty"),
                );
            }
            ElementKind::Cell => unreachable!("cells are generated inside tables"),
        }
        y += band;
    }

    let semantic = derive_semantic(&instances, dataset.num_classes(), size, size);
    Ok(SegSample {
        id,
        image: canvas.image,
        instances,
        semantic,
        dataset,
    })
}

fn place(
    rng: &mut ChaCha8Rng,
    band_top: usize,
    room: usize,
    h: usize,
    avail_w: usize,
    w: usize,
) -> (usize, usize) {
    let dy = snap(rng.random_range(0.0..=1.0) * room.saturating_sub(h) as f64);
    let dx = snap(rng.random_range(0.0..=1.0) * avail_w.saturating_sub(w) as f64);
    (band_top + dy, MARGIN + dx)
}

fn rect_instance(class: usize, size: usize, y0: usize, x0: usize, h: usize, w: usize) -> InstanceAnnotation {
    InstanceAnnotation::from_mask(class, rect_mask(size, y0, x0, y0 + h, x0 + w))
        .expect("rectangle is non-empty")
}

fn draw_paragraph(rng: &mut ChaCha8Rng, c: &mut Canvas, y0: usize, x0: usize, h: usize, w: usize) {
    let ink = gray(rng.random_range(0.25..0.45));
    let pitch = rng.random_range(5..=7);
    let mut ly = y0;
    while ly + 3 <= y0 + h {
        let last = ly + pitch + 3 > y0 + h;
        let line_end = if last {
            x0 + (w as f64 * rng.random_range(0.3..0.9)) as usize
        } else {
            x0 + w
        };
        let mut x = x0;
        while x < line_end {
            let word = rng.random_range(6..=20);
            c.fill(ly, x, ly + 3, (x + word).min(line_end), ink);
            x += word + 3;
        }
        ly += pitch;
    }
}

fn draw_figure(rng: &mut ChaCha8Rng, c: &mut Canvas, y0: usize, x0: usize, h: usize, w: usize) {
    const PALETTE: [[f32; 3]; 4] = [
        [0.55, 0.7, 0.9],
        [0.6, 0.85, 0.6],
        [0.95, 0.75, 0.5],
        [0.8, 0.65, 0.85],
    ];
    let base = PALETTE[rng.random_range(0..PALETTE.len())];
    let dark = [base[0] * 0.5, base[1] * 0.5, base[2] * 0.5];
    c.fill(y0, x0, y0 + h, x0 + w, base);
    c.fill(y0, x0, y0 + 2, x0 + w, dark);
    c.fill(y0 + h - 2, x0, y0 + h, x0 + w, dark);
    c.fill(y0, x0, y0 + h, x0 + 2, dark);
    c.fill(y0, x0 + w - 2, y0 + h, x0 + w, dark);
    // Inner disc.
    let (cy, cx) = (y0 as f64 + h as f64 / 2.0, x0 as f64 + w as f64 / 2.0);
    let r = (h.min(w) as f64) * rng.random_range(0.2..0.35);
    for y in y0 + 2..y0 + h - 2 {
        for x in x0 + 2..x0 + w - 2 {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            if dy * dy + dx * dx <= r * r {
                c.image.put(y, x, dark);
            }
        }
    }
}

/// Splits `interior` (a multiple of `GRID`) into `n` grid-aligned parts of at least `MIN_CELL`.
fn split_interior(rng: &mut ChaCha8Rng, interior: usize, n: usize) -> Vec<usize> {
    let units = interior / GRID;
    let min_units = MIN_CELL / GRID;
    let mut parts = vec![min_units; n];
    for _ in 0..units - min_units * n {
        let i = rng.random_range(0..n);
        parts[i] += 1;
    }
    parts.into_iter().map(|u| u * GRID).collect()
}

/// Draws the ruled grid and returns cell interiors `(y0, x0, h, w)` row by row.
fn draw_table(
    rng: &mut ChaCha8Rng,
    c: &mut Canvas,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
) -> Vec<(usize, usize, usize, usize)> {
    let ink = gray(rng.random_range(0.1..0.3));
    let text = gray(rng.random_range(0.35..0.55));
    let fits = |len: usize, n: usize| len >= RULE + n * (MIN_CELL + RULE);
    let mut rows = rng.random_range(2..=3);
    while rows > 1 && !fits(h, rows) {
        rows -= 1;
    }
    let mut cols = rng.random_range(2..=3);
    while cols > 1 && !fits(w, cols) {
        cols -= 1;
    }
    let heights = split_interior(rng, h - RULE * (rows + 1), rows);
    let widths = split_interior(rng, w - RULE * (cols + 1), cols);

    c.fill(y0, x0, y0 + h, x0 + w, gray(0.97));
    let mut cells = Vec::with_capacity(rows * cols);
    let mut cy = y0 + RULE;
    for &rh in &heights {
        let mut cx = x0 + RULE;
        for &cw in &widths {
            cells.push((cy, cx, rh, cw));
            if rh >= 6 && cw >= 8 {
                let ty = cy + rh / 2 - 1;
                let len = ((cw - 4) as f64 * rng.random_range(0.3..1.0)) as usize;
                c.fill(ty, cx + 2, ty + 2, cx + 2 + len.max(1), text);
            }
            cx += cw + RULE;
        }
        cy += rh + RULE;
    }
    // Rules drawn last so they frame the cells.
    let mut ry = y0;
    c.fill(ry, x0, ry + RULE, x0 + w, ink);
    for &rh in &heights {
        ry += RULE + rh;
        c.fill(ry, x0, ry + RULE, x0 + w, ink);
    }
    let mut rx = x0;
    c.fill(y0, rx, y0 + h, rx + RULE, ink);
    for &cw in &widths {
        rx += RULE + cw;
        c.fill(y0, rx, y0 + h, rx + RULE, ink);
    }
    cells
}

fn text_line_mask(rng: &mut ChaCha8Rng, size: usize, band_top: usize, room: usize, avail_w: usize) -> Mask {
    let len = rng.random_range(0.3..0.7) * avail_w as f64;
    let mut thick = rng.random_range(8.0..14.0f64).min(room as f64);
    let mut angle = rng.random_range(-0.35..0.35f64);
    for _ in 0..12 {
        if len * angle.sin().abs() + thick * angle.cos().abs() <= room as f64 {
            break;
        }
        angle *= 0.5;
    }
    if len * angle.sin().abs() + thick * angle.cos().abs() > room as f64 {
        angle = 0.0;
        thick = thick.min(room as f64);
    }
    let half_x = (len * angle.cos().abs() + thick * angle.sin().abs()) / 2.0;
    let cx = MARGIN as f64 + half_x + rng.random_range(0.0..=1.0) * (avail_w as f64 - 2.0 * half_x).max(0.0);
    let cy = band_top as f64 + room as f64 / 2.0;
    let (s, co) = angle.sin_cos();
    let mask = Mask::from_fn(size, size, |y, x| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let along = dx * co + dy * s;
        let across = -dx * s + dy * co;
        along.abs() <= len / 2.0 && across.abs() <= thick / 2.0
    });
    debug_assert!(!mask.is_empty());
    mask
}
