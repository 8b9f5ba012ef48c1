//! Raster primitives shared by the data model, training and inference:
//! binary masks, label maps, RGB images and normalized boxes.
//!
//! Run-length encodings are row-major. A binary mask encodes as
//! alternating run lengths that always start with a background run
//! (possibly zero). A label map encodes as `label:count` pairs.

use std::fmt::Write as _;

/// Binary raster of shape `height x width`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

/// Inclusive pixel extents `(x0, y0, x1, y1)`.
pub type PixelBox = (usize, usize, usize, usize);

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    /// Sets every pixel of the inclusive-exclusive rectangle, clipped to the raster.
    pub fn fill_rect(&mut self, y0: usize, x0: usize, y1: usize, x1: usize) {
        for y in y0.min(self.height)..y1.min(self.height) {
            for x in x0.min(self.width)..x1.min(self.width) {
                self.set(y, x, true);
            }
        }
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn tight_box(&self) -> Option<PixelBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            let row = &self.data[y * self.width..(y + 1) * self.width];
            for (x, &v) in row.iter().enumerate() {
                if v {
                    any = true;
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                }
            }
        }
        any.then_some((x0, y0, x1, y1))
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    /// Intersection over union; two empty masks have IoU 0.
    pub fn iou(&self, other: &Mask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// True when `self` is contained in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        let ys = nearest_index(self.height, height);
        let xs = nearest_index(self.width, width);
        Mask::from_fn(height, width, |y, x| self.get(ys[y], xs[x]))
    }

    /// Crops the window at `(y, x)`; pixels outside the source read as background.
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |dy, dx| {
            let (sy, sx) = (y + dy, x + dx);
            sy < self.height && sx < self.width && self.get(sy, sx)
        })
    }

    /// Pastes `self` into a canvas of the given size at offset `(y, x)`.
    pub fn paste(&self, canvas_height: usize, canvas_width: usize, y: usize, x: usize) -> Mask {
        let mut out = Mask::new(canvas_height, canvas_width);
        for dy in 0..self.height {
            for dx in 0..self.width {
                if self.get(dy, dx) && y + dy < canvas_height && x + dx < canvas_width {
                    out.set(y + dy, x + dx, true);
                }
            }
        }
        out
    }

    /// Fraction of foreground pixels in each `factor x factor` block.
    pub fn block_average(&self, factor: usize) -> Vec<f32> {
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = (factor * factor) as f32;
        let mut out = vec![0f32; h * w];
        for y in 0..h * factor {
            for x in 0..w * factor {
                if self.get(y, x) {
                    out[(y / factor) * w + x / factor] += 1.0;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= norm);
        out
    }

    pub fn to_rle(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for &v in &self.data {
            if v == current {
                len += 1;
            } else {
                runs.push(len);
                current = v;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(height: usize, width: usize, runs: &[usize]) -> Option<Mask> {
        let mut data = Vec::with_capacity(height * width);
        let mut value = false;
        for &r in runs {
            if data.len() + r > height * width {
                return None;
            }
            data.extend(std::iter::repeat_n(value, r));
            value = !value;
        }
        (data.len() == height * width).then_some(Mask {
            height,
            width,
            data,
        })
    }

    pub fn rle_string(&self) -> String {
        join_numbers(&self.to_rle())
    }
}

/// Integer label raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, label: u32) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    /// Writes `label` into every foreground pixel of `mask`.
    pub fn paint(&mut self, mask: &Mask, label: u32) {
        for (dst, &m) in self.data.iter_mut().zip(&mask.data) {
            if m {
                *dst = label;
            }
        }
    }

    pub fn class_mask(&self, label: u32) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v == label).collect(),
        }
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelMap {
        let ys = nearest_index(self.height, height);
        let xs = nearest_index(self.width, width);
        let mut data = Vec::with_capacity(height * width);
        for &sy in &ys {
            for &sx in &xs {
                data.push(self.get(sy, sx));
            }
        }
        LabelMap {
            height,
            width,
            data,
        }
    }

    /// Crops the window at `(y, x)`; pixels outside the source read as `fill`.
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize, fill: u32) -> LabelMap {
        let mut data = Vec::with_capacity(height * width);
        for dy in 0..height {
            for dx in 0..width {
                let (sy, sx) = (y + dy, x + dx);
                data.push(if sy < self.height && sx < self.width {
                    self.get(sy, sx)
                } else {
                    fill
                });
            }
        }
        LabelMap {
            height,
            width,
            data,
        }
    }

    pub fn to_rle(&self) -> Vec<(u32, usize)> {
        let mut runs: Vec<(u32, usize)> = Vec::new();
        for &v in &self.data {
            match runs.last_mut() {
                Some((label, n)) if *label == v => *n += 1,
                _ => runs.push((v, 1)),
            }
        }
        runs
    }

    pub fn from_rle(height: usize, width: usize, runs: &[(u32, usize)]) -> Option<LabelMap> {
        let mut data = Vec::with_capacity(height * width);
        for &(label, n) in runs {
            if data.len() + n > height * width {
                return None;
            }
            data.extend(std::iter::repeat_n(label, n));
        }
        (data.len() == height * width).then_some(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn rle_string(&self) -> String {
        let mut s = String::new();
        for (i, (label, n)) in self.to_rle().into_iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{label}:{n}");
        }
        s
    }
}

/// RGB image with channel values in `[0, 1]`, stored HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear resampling with half-pixel centers.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> RgbImage {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let ys = bilinear_taps(self.height, height);
        let xs = bilinear_taps(self.width, width);
        let mut data = Vec::with_capacity(height * width * 3);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let (a, b) = (self.pixel(y0, x0), self.pixel(y0, x1));
                let (c, d) = (self.pixel(y1, x0), self.pixel(y1, x1));
                for ch in 0..3 {
                    let top = a[ch] * (1.0 - fx) + b[ch] * fx;
                    let bottom = c[ch] * (1.0 - fx) + d[ch] * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        RgbImage {
            height,
            width,
            data,
        }
    }

    /// Crops the window at `(y, x)`; pixels outside the source are `fill`.
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize, fill: [f32; 3]) -> Self {
        let mut out = RgbImage::filled(height, width, fill);
        for dy in 0..height {
            for dx in 0..width {
                let (sy, sx) = (y + dy, x + dx);
                if sy < self.height && sx < self.width {
                    out.put(dy, dx, self.pixel(sy, sx));
                }
            }
        }
        out
    }

    /// Pads bottom/right with `fill` so both sides are multiples of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize, fill: [f32; 3]) -> Self {
        let h = self.height.div_ceil(multiple) * multiple;
        let w = self.width.div_ceil(multiple) * multiple;
        self.crop(0, 0, h, w, fill)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn encode_png(&self) -> crate::Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn decode(bytes: &[u8]) -> crate::Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }
}

/// Axis-aligned box `(cx, cy, w, h)` normalized by image width/height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Tight box of the mask's foreground, covering whole pixels.
    pub fn from_mask(mask: &Mask) -> Option<BBox> {
        let (x0, y0, x1, y1) = mask.tight_box()?;
        Some(BBox::from_pixels((x0, y0, x1, y1), mask.height, mask.width))
    }

    pub fn from_pixels(b: PixelBox, height: usize, width: usize) -> BBox {
        let (x0, y0, x1, y1) = b;
        let (w, h) = (width as f64, height as f64);
        BBox {
            cx: (x0 + x1 + 1) as f64 / 2.0 / w,
            cy: (y0 + y1 + 1) as f64 / 2.0 / h,
            w: (x1 + 1 - x0) as f64 / w,
            h: (y1 + 1 - y0) as f64 / h,
        }
    }

    pub fn to_xyxy(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let a = self.to_xyxy();
        let b = other.to_xyxy();
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        let inter = iw * ih;
        let union = self.w * self.h + other.w * other.h - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Largest per-edge deviation in pixels between two boxes.
    pub fn max_pixel_deviation(&self, other: &BBox, height: usize, width: usize) -> f64 {
        let a = self.to_xyxy();
        let b = other.to_xyxy();
        let scale = [width as f64, height as f64, width as f64, height as f64];
        (0..4)
            .map(|i| ((a[i] - b[i]) * scale[i]).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn join_numbers(values: &[usize]) -> String {
    let mut s = String::with_capacity(values.len() * 4);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v}");
    }
    s
}

fn nearest_index(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|i| (((i as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1))
        .collect()
}

fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear upsampling of a single-channel map (half-pixel centers).
pub fn resize_scalar_bilinear(
    values: &[f32],
    src_h: usize,
    src_w: usize,
    height: usize,
    width: usize,
) -> Vec<f32> {
    let ys = bilinear_taps(src_h, height);
    let xs = bilinear_taps(src_w, width);
    let mut out = Vec::with_capacity(height * width);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let a = values[y0 * src_w + x0];
            let b = values[y0 * src_w + x1];
            let c = values[y1 * src_w + x0];
            let d = values[y1 * src_w + x1];
            let top = a * (1.0 - fx) + b * fx;
            let bottom = c * (1.0 - fx) + d * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
