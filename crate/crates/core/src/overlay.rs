//! Prediction overlays: tinted masks, box outlines and `name score` labels.

use font8x8::UnicodeFonts;

use crate::inference::Prediction;
use crate::raster::RgbImage;

/// Class color, cycling by class index.
pub const PALETTE: [[f32; 3]; 10] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.55, 0.90],
    [0.15, 0.70, 0.20],
    [0.95, 0.60, 0.05],
    [0.60, 0.20, 0.80],
    [0.05, 0.70, 0.70],
    [0.85, 0.25, 0.60],
    [0.55, 0.45, 0.10],
    [0.30, 0.30, 0.85],
    [0.45, 0.75, 0.10],
];

pub const MASK_ALPHA: f32 = 0.45;

pub fn class_color(class_index: usize) -> [f32; 3] {
    PALETTE[class_index % PALETTE.len()]
}

fn blend(img: &mut RgbImage, y: usize, x: usize, rgb: [f32; 3], alpha: f32) {
    let p = img.pixel(y, x);
    img.put(y, x, [0, 1, 2].map(|i| p[i] * (1.0 - alpha) + rgb[i] * alpha));
}

/// Draws `text` with its top-left corner at `(y, x)`, clipped to the image.
pub fn draw_text(img: &mut RgbImage, y: usize, x: usize, text: &str, fg: [f32; 3], bg: [f32; 3]) {
    for (k, ch) in text.chars().enumerate() {
        let glyph = font8x8::BASIC_FONTS.get(ch).or_else(|| font8x8::BASIC_FONTS.get('?'));
        let Some(glyph) = glyph else { continue };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                let (py, px) = (y + row, x + 8 * k + col);
                if py < img.height && px < img.width {
                    img.put(py, px, if bits >> col & 1 == 1 { fg } else { bg });
                }
            }
        }
    }
}

fn outline(img: &mut RgbImage, [x0, y0, x1, y1]: [usize; 4], rgb: [f32; 3]) {
    for x in x0..=x1 {
        for y in [y0, y1] {
            img.put(y, x, rgb);
        }
    }
    for y in y0..=y1 {
        for x in [x0, x1] {
            img.put(y, x, rgb);
        }
    }
}

/// Renders instances over `image` (same size as the prediction), highest
/// score drawn last.
pub fn render_overlay(image: &RgbImage, pred: &Prediction, class_names: &[String]) -> RgbImage {
    let mut out = image.clone();
    let (h, w) = (image.height, image.width);
    let mut order: Vec<usize> = (0..pred.instances.len()).collect();
    order.sort_by(|&a, &b| pred.instances[a].score.total_cmp(&pred.instances[b].score));
    for &i in &order {
        let d = &pred.instances[i];
        let color = class_color(d.class_index);
        for y in 0..h.min(d.mask.height) {
            for x in 0..w.min(d.mask.width) {
                if d.mask.get(y, x) {
                    blend(&mut out, y, x, color, MASK_ALPHA);
                }
            }
        }
        let [bx0, by0, bx1, by1] = d.bbox.to_xyxy();
        let clampx = |v: f64| ((v * w as f64).round().max(0.0) as usize).min(w - 1);
        let clampy = |v: f64| ((v * h as f64).round().max(0.0) as usize).min(h - 1);
        let rect = [clampx(bx0), clampy(by0), clampx(bx1), clampy(by1)];
        outline(&mut out, rect, color);
        let name = class_names.get(d.class_index).map_or("?", String::as_str);
        let label = format!("{name} {:.2}", d.score);
        draw_text(&mut out, rect[1], rect[0], &label, [1.0; 3], color);
    }
    out
}
