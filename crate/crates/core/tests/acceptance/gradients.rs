//! Backprop against central differences in f64.

use candle_core::{DType, Device, Tensor, Var};
use docseg::encoder::{Encoder, EncoderConfig, MultiScaleFeatures};
use docseg::heads::{Heads, PredictionSet};
use docseg::hqd::{masked_attention_masks, HqdConfig, HqdLayer, HybridQueryDecoder, LayerState};
use docseg::losses::{
    dice_loss, diou, layer_loss, loss_box, loss_class, loss_instance, loss_semantic, sigmoid_focal_loss, smooth_l1,
    LossWeights, Targets,
};
use docseg::nn::{ParamBuilder, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::Outcome;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
const COORDS_PER_VAR: usize = 4;
/// Below this gradient norm the absolute error is compared instead.
const ABS_FLOOR: f64 = 1e-6;

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn tensor(v: Vec<f64>, dims: &[usize]) -> Tensor {
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    tensor((0..n).map(|_| rng.random_range(lo..hi)).collect(), dims)
}

fn var(t: Tensor) -> Var {
    Var::from_tensor(&t).unwrap()
}

/// Adds Gaussian noise to every parameter so that zero-initialized
/// projections carry gradient too.
fn jitter(store: &ParamStore, rng: &mut ChaCha8Rng, std: f64) {
    let noise = Normal::new(0.0, std).unwrap();
    for v in store.vars.values() {
        let x: Vec<f64> = values(v.as_tensor()).into_iter().map(|x| x + noise.sample(rng)).collect();
        v.set(&tensor(x, v.dims())).unwrap();
    }
}

/// Worst per-variable relative error `‖a − n‖ / max(‖a‖, ‖n‖)` over a
/// sample of coordinates of each variable.
fn worst_error(vars: &[(String, Var)], rng: &mut ChaCha8Rng, f: &dyn Fn() -> Tensor) -> (f64, String, usize) {
    let grads = f().backward().unwrap();
    let mut worst = (0.0, String::from("-"), 0);
    for (name, v) in vars {
        let n = v.elem_count();
        let analytic = grads
            .get(v.as_tensor())
            .map(values)
            .unwrap_or_else(|| vec![0.0; n]);
        let idx: Vec<usize> = if n <= COORDS_PER_VAR {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, COORDS_PER_VAR).into_vec()
        };
        let base = values(v.as_tensor());
        let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let mut probe = base.clone();
            probe[i] = base[i] + STEP;
            v.set(&tensor(probe.clone(), v.dims())).unwrap();
            let up = f().to_scalar::<f64>().unwrap();
            probe[i] = base[i] - STEP;
            v.set(&tensor(probe, v.dims())).unwrap();
            let down = f().to_scalar::<f64>().unwrap();
            v.set(&tensor(base.clone(), v.dims())).unwrap();
            let numeric = (up - down) / (2.0 * STEP);
            diff += (analytic[i] - numeric).powi(2);
            norm_a += analytic[i].powi(2);
            norm_n += numeric.powi(2);
        }
        let scale = norm_a.sqrt().max(norm_n.sqrt());
        let rel = if scale < ABS_FLOOR { diff.sqrt() } else { diff.sqrt() / scale };
        worst.2 += 1;
        if rel > worst.0 {
            worst.0 = rel;
            worst.1 = name.clone();
        }
    }
    worst
}

fn named(prefix: &str, store: &ParamStore) -> Vec<(String, Var)> {
    store
        .vars
        .iter()
        .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
        .collect()
}

fn binary(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    tensor((0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect(), dims)
}

/// Box pairs that overlap with distinct edges, so no clamp or min/max sits
/// at a kink.
fn box_pairs(rng: &mut ChaCha8Rng, p: usize) -> (Tensor, Tensor) {
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    for _ in 0..p {
        let g = [
            rng.random_range(0.35..0.65),
            rng.random_range(0.35..0.65),
            rng.random_range(0.2..0.4),
            rng.random_range(0.2..0.4),
        ];
        let d = [0, 1, 2, 3].map(|_| {
            let m: f64 = rng.random_range(0.02..0.08);
            if rng.random_bool(0.5) { m } else { -m }
        });
        gt.extend(g);
        pred.extend((0..4).map(|k| g[k] + d[k]));
    }
    (tensor(pred, &[p, 4]), tensor(gt, &[p, 4]))
}

fn loss_checks(rng: &mut ChaCha8Rng) -> Vec<(String, (f64, String, usize))> {
    let w = LossWeights::default();
    let mut out = Vec::new();
    let logits = var(uniform(rng, &[3, 64], -3.0, 3.0));
    let targets = binary(rng, &[3, 64]);
    let vars = vec![("logits".to_string(), logits.clone())];
    let r = (uniform(rng, &[3], 0.5, 1.5), uniform(rng, &[3], 0.5, 1.5));
    out.push((
        "focal".into(),
        worst_error(&vars, rng, &|| {
            (sigmoid_focal_loss(logits.as_tensor(), &targets).unwrap() * &r.0).unwrap().sum_all().unwrap()
        }),
    ));
    out.push((
        "dice".into(),
        worst_error(&vars, rng, &|| {
            (dice_loss(logits.as_tensor(), &targets).unwrap() * &r.1).unwrap().sum_all().unwrap()
        }),
    ));
    out.push((
        "semantic mask loss".into(),
        worst_error(&vars, rng, &|| loss_semantic(logits.as_tensor(), &targets, &w).unwrap()),
    ));
    out.push((
        "instance mask loss".into(),
        worst_error(&vars, rng, &|| loss_instance(logits.as_tensor(), &targets, &w).unwrap()),
    ));

    let (pred, gt) = box_pairs(rng, 4);
    let pred = var(pred);
    let bvars = vec![("boxes".to_string(), pred.clone())];
    out.push(("diou".into(), worst_error(&bvars, rng, &|| diou(pred.as_tensor(), &gt).unwrap().sum_all().unwrap())));
    out.push(("box loss".into(), worst_error(&bvars, rng, &|| loss_box(pred.as_tensor(), &gt, &w).unwrap())));
    // Differences on both sides of the smooth-L1 knee.
    let far = var(uniform(rng, &[2, 4], 1.2, 2.0));
    let near = var(uniform(rng, &[2, 4], -0.8, 0.8));
    let zero = Tensor::zeros((2, 4), DType::F64, &Device::Cpu).unwrap();
    let svars = vec![("far".to_string(), far.clone()), ("near".to_string(), near.clone())];
    out.push((
        "smooth l1".into(),
        worst_error(&svars, rng, &|| {
            (smooth_l1(far.as_tensor(), &zero).unwrap() + smooth_l1(near.as_tensor(), &zero).unwrap())
                .unwrap()
                .sum_all()
                .unwrap()
        }),
    ));

    let class_logits = var(uniform(rng, &[5, 4], -2.0, 2.0));
    let labels = [0, 3, 2, 3, 1];
    let cvars = vec![("class logits".to_string(), class_logits.clone())];
    out.push((
        "class loss".into(),
        worst_error(&cvars, rng, &|| loss_class(class_logits.as_tensor(), &labels, &w).unwrap()),
    ));

    // Full per-layer objective with matching held fixed by the data.
    let (m, n, g) = (2, 5, 3);
    let sem = var(uniform(rng, &[m, 64], -3.0, 3.0));
    let inst = var(uniform(rng, &[n, 64], -3.0, 3.0));
    let cls = var(uniform(rng, &[n, m + 1], -2.0, 2.0));
    let boxes = var(uniform(rng, &[n, 4], 0.25, 0.75));
    let (_, gt_boxes) = box_pairs(rng, g);
    let masks = binary(rng, &[g, 64]);
    let targets = Targets {
        classes: vec![0, 1, 1],
        mask_values: (0..g)
            .map(|i| values(&masks.get(i).unwrap()))
            .collect(),
        masks: Some(masks),
        boxes: (0..g)
            .map(|i| {
                let v = values(&gt_boxes.get(i).unwrap());
                [v[0], v[1], v[2], v[3]]
            })
            .collect(),
        semantic: binary(rng, &[m, 64]),
        spatial_shape: (8, 8),
    };
    let lvars = vec![
        ("semantic logits".to_string(), sem.clone()),
        ("instance logits".to_string(), inst.clone()),
        ("class logits".to_string(), cls.clone()),
        ("boxes".to_string(), boxes.clone()),
    ];
    let active = [0, 1, 3, 4];
    out.push((
        "layer loss".into(),
        worst_error(&lvars, rng, &|| {
            let pred = PredictionSet {
                semantic_logits: sem.as_tensor().clone(),
                instance_logits: inst.as_tensor().clone(),
                class_logits: cls.as_tensor().clone(),
                boxes: boxes.as_tensor().clone(),
                spatial_shape: (8, 8),
            };
            layer_loss(&pred, &active, &targets, &w).unwrap().0
        }),
    ));
    out
}

fn head_checks(rng: &mut ChaCha8Rng) -> Vec<(String, (f64, String, usize))> {
    let c = 8;
    let pb = ParamBuilder::new(11, DType::F64, &Device::Cpu);
    let heads = Heads::new(&pb, c).unwrap();
    let store = pb.into_store();
    jitter(&store, rng, 0.1);
    let semantic = var(uniform(rng, &[2, c], -1.0, 1.0));
    let instance = var(uniform(rng, &[3, c], -1.0, 1.0));
    let feature = var(uniform(rng, &[64, c], -1.0, 1.0));
    let previous = uniform(rng, &[3, 4], 0.2, 0.8);
    let mut vars = named("heads.", &store);
    vars.push(("semantic queries".into(), semantic.clone()));
    vars.push(("instance queries".into(), instance.clone()));
    vars.push(("mask feature".into(), feature.clone()));
    let weights: Vec<Tensor> = [vec![2, 64], vec![3, 64], vec![3, 3], vec![3, 4]]
        .iter()
        .map(|d| uniform(rng, d, -1.0, 1.0))
        .collect();
    let objective = |prev: Option<&Tensor>| -> Tensor {
        let p = heads
            .predict(semantic.as_tensor(), instance.as_tensor(), feature.as_tensor(), (8, 8), prev)
            .unwrap();
        let parts = [&p.semantic_logits, &p.instance_logits, &p.class_logits, &p.boxes];
        let mut total = Tensor::zeros((), DType::F64, &Device::Cpu).unwrap();
        for (t, w) in parts.iter().zip(&weights) {
            total = (total + (*t * w).unwrap().sum_all().unwrap()).unwrap();
        }
        total
    };
    vec![
        ("heads, first layer".into(), worst_error(&vars, rng, &|| objective(None))),
        ("heads, residual boxes".into(), worst_error(&vars, rng, &|| objective(Some(&previous)))),
    ]
}

fn hqd_check(rng: &mut ChaCha8Rng) -> (f64, String, usize) {
    let c = 8;
    let cfg = HqdConfig {
        heads: 2,
        ..HqdConfig::default()
    };
    let pb = ParamBuilder::new(5, DType::F64, &Device::Cpu);
    let layer = HqdLayer::new(&pb.pp("layer"), c, &cfg).unwrap();
    let dec = HybridQueryDecoder::new(&pb.pp("dec"), c, cfg.clone()).unwrap();
    let store = pb.into_store();
    jitter(&store, rng, 0.05);
    let shapes = vec![(1, 1), (2, 2), (4, 4), (8, 8)];
    let levels: Vec<Var> = shapes.iter().map(|&(h, w)| var(uniform(rng, &[h * w, c], -1.0, 1.0))).collect();
    let (m, n) = (2, 5);
    let prev = PredictionSet {
        semantic_logits: uniform(rng, &[m, 64], -2.0, 2.0),
        instance_logits: uniform(rng, &[n, 64], -2.0, 2.0),
        class_logits: Tensor::zeros((n, m + 1), DType::F64, &Device::Cpu).unwrap(),
        boxes: Tensor::ones((n, 4), DType::F64, &Device::Cpu).unwrap(),
        spatial_shape: (8, 8),
    };
    let masks = masked_attention_masks(&prev, &shapes).unwrap();
    let semantic = var(uniform(rng, &[m, c], -1.0, 1.0));
    let instance = var(uniform(rng, &[n, c], -1.0, 1.0));
    let pos = var(uniform(rng, &[n, c], -1.0, 1.0));
    let mut vars = named("", &store);
    for (l, v) in levels.iter().enumerate() {
        vars.push((format!("feature level {l}"), v.clone()));
    }
    vars.push(("semantic queries".into(), semantic.clone()));
    vars.push(("instance queries".into(), instance.clone()));
    vars.push(("instance positions".into(), pos.clone()));
    let ws = uniform(rng, &[m, c], -1.0, 1.0);
    let wi = uniform(rng, &[n, c], -1.0, 1.0);
    worst_error(&vars, rng, &|| {
        let features = MultiScaleFeatures {
            levels: levels.iter().map(|v| v.as_tensor().clone()).collect(),
            spatial_shapes: shapes.clone(),
        };
        let memory = dec.memory(&features).unwrap();
        let state = LayerState {
            semantic: semantic.as_tensor().clone(),
            instance: instance.as_tensor().clone(),
            instance_pos: pos.as_tensor().clone(),
            masks: masks.clone(),
            active_ids: vec![0, 2, 3],
        };
        let (s, i) = layer.forward(&state, &memory, &cfg).unwrap();
        ((s * &ws).unwrap().sum_all().unwrap() + (i * &wi).unwrap().sum_all().unwrap()).unwrap()
    })
}

fn encoder_check(rng: &mut ChaCha8Rng) -> (f64, String, usize) {
    let pb = ParamBuilder::new(9, DType::F64, &Device::Cpu);
    let cfg = EncoderConfig {
        channels: 8,
        stem_channels: 4,
        heads: 2,
        attention_levels: 4,
    };
    let encoder = Encoder::new(&pb, cfg).unwrap();
    let store = pb.into_store();
    jitter(&store, rng, 0.05);
    let image = var(uniform(rng, &[1, 3, 32, 32], -2.0, 2.0));
    let mut vars = named("encoder.", &store);
    vars.push(("image".into(), image.clone()));
    let mut wrng = ChaCha8Rng::seed_from_u64(17);
    let f = encoder.encode(image.as_tensor()).unwrap();
    let mut weights: Vec<Tensor> = f.levels.iter().map(|t| uniform(&mut wrng, t.dims(), -1.0, 1.0)).collect();
    weights.push(uniform(&mut wrng, &[64, 8], -1.0, 1.0));
    worst_error(&vars, rng, &|| {
        let f = encoder.encode(image.as_tensor()).unwrap();
        let mask = encoder.fuse(&f).unwrap();
        let mut total = (&mask.values * &weights[4]).unwrap().sum_all().unwrap();
        for (t, w) in f.levels.iter().zip(&weights) {
            total = (total + (t * w).unwrap().sum_all().unwrap()).unwrap();
        }
        total
    })
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checks = loss_checks(&mut rng);
    checks.extend(head_checks(&mut rng));
    checks.push(("hqd layer".into(), hqd_check(&mut rng)));
    checks.push(("encoder".into(), encoder_check(&mut rng)));
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, (err, var, count)) in &checks {
        let ok = *err < TOLERANCE;
        pass &= ok;
        println!("    {name}: worst {err:.2e} at {var} over {count} variables");
        if !ok {
            parts.push(format!("{name} {err:.2e} at {var}"));
        }
    }
    let worst = checks.iter().map(|c| c.1 .0).fold(0.0, f64::max);
    let detail = if pass {
        format!("{} checks, worst relative error {worst:.2e} < {TOLERANCE:e}", checks.len())
    } else {
        format!("failing: {}", parts.join("; "))
    };
    Outcome::check(pass, detail)
}
