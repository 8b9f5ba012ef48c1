use rand::Rng;

use crate::datamodel::{derive_semantic, InstanceAnnotation, SegSample};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub crop_size: usize,
    pub short_side_range: (usize, usize),
    pub whole_resize_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_size: 256,
            short_side_range: (288, 352),
            whole_resize_prob: 0.2,
        }
    }
}

/// Resizes the sample to `height x width` and then crops the
/// `crop x crop` window at `(y, x)`. Masks use nearest sampling; instances
/// left without foreground are dropped and the semantic map is repainted.
pub fn resize_and_crop(sample: &SegSample, height: usize, width: usize, y: usize, x: usize, crop: (usize, usize)) -> SegSample {
    let (ch, cw) = crop;
    let image = sample
        .image
        .resize_bilinear(height, width)
        .crop(y, x, ch, cw, [1.0, 1.0, 1.0]);
    let instances: Vec<InstanceAnnotation> = sample
        .instances
        .iter()
        .filter_map(|inst| {
            let m = inst.mask.resize_nearest(height, width).crop(y, x, ch, cw);
            InstanceAnnotation::from_mask(inst.class_index, m)
        })
        .collect();
    let semantic = derive_semantic(&instances, sample.dataset.num_classes(), ch, cw);
    SegSample {
        id: sample.id.clone(),
        image,
        instances,
        semantic,
        dataset: sample.dataset.clone(),
    }
}

/// With probability `whole_resize_prob` resizes the whole image to
/// `crop_size²`; otherwise scales the short side into `short_side_range`
/// and takes a random `crop_size²` window.
pub fn crop_augment(sample: &SegSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> SegSample {
    let c = cfg.crop_size;
    if rng.random_bool(cfg.whole_resize_prob.clamp(0.0, 1.0)) {
        if sample.height() == c && sample.width() == c {
            return sample.clone();
        }
        return resize_and_crop(sample, c, c, 0, 0, (c, c));
    }
    let (lo, hi) = cfg.short_side_range;
    let target = rng.random_range(lo..=hi).max(c);
    let (h, w) = (sample.height(), sample.width());
    let short = h.min(w) as f64;
    let scale = target as f64 / short;
    let nh = ((h as f64 * scale).round() as usize).max(c);
    let nw = ((w as f64 * scale).round() as usize).max(c);
    let y = rng.random_range(0..=nh - c);
    let x = rng.random_range(0..=nw - c);
    resize_and_crop(sample, nh, nw, y, x, (c, c))
}
