//! Two deterministic synth, train, eval runs through the command line.

use std::path::Path;

use crate::Outcome;

const RECIPE: &str = r#"
image_size = 128

[[datasets]]
name = "tables"
task_group = "table"
splits = { train = 3, heldout = 2 }
classes = [
  { name = "table", kind = "table", count = 1 },
  { name = "cell", kind = "cell" },
]

[[datasets]]
name = "docs"
task_group = "layout"
splits = { train = 3, heldout = 2 }
classes = [
  { name = "title", kind = "title", count = 1 },
  { name = "paragraph", kind = "paragraph", count = [1, 2] },
]
"#;

const TRAIN: &str = r#"
iterations = 4
batch_size = 2
warmup_iters = 1
crop_size = 64
short_side_min = 64
short_side_max = 80
checkpoint_every = 2
channels = 16
stem_channels = 8
heads = 2
num_queries = 32
decoder_layers = 2
"#;

const INFERENCE: &str = r#"
inference_size = 64
patch_size = 64
patch_short_side = 80
patch_overlap = 16
"#;

fn docseg(args: &[&str]) -> i32 {
    let mut all = vec!["docseg"];
    all.extend_from_slice(args);
    docseg::cli::run(all)
}

/// Runs the pipeline into `dir` and returns the report and checkpoint bytes.
fn pipeline(dir: &Path) -> Result<(String, Vec<u8>), String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    for (name, text) in [("recipe.toml", RECIPE), ("train.toml", TRAIN), ("infer.toml", INFERENCE)] {
        std::fs::write(dir.join(name), text).map_err(|e| e.to_string())?;
    }
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let steps: [Vec<String>; 3] = [
        vec!["synth".into(), "--config".into(), p("recipe.toml"), "--out".into(), p("corpus")],
        vec![
            "train".into(),
            "--config".into(),
            p("train.toml"),
            "--corpus".into(),
            p("corpus"),
            "--out".into(),
            p("run"),
            "--fresh".into(),
        ],
        vec![
            "eval".into(),
            "--config".into(),
            p("infer.toml"),
            "--checkpoint".into(),
            p("run/model.ckpt"),
            "--corpus".into(),
            p("corpus"),
            "--out".into(),
            p("eval"),
        ],
    ];
    for step in &steps {
        let mut args: Vec<&str> = step.iter().map(String::as_str).collect();
        args.extend(["--seed", "11", "--deterministic"]);
        let code = docseg(&args);
        if code != 0 {
            return Err(format!("`docseg {}` exited with {code}", step[0]));
        }
    }
    let mut report = String::new();
    for name in ["docs", "tables"] {
        report += &std::fs::read_to_string(dir.join(format!("eval/{name}.report.toml"))).map_err(|e| e.to_string())?;
    }
    let ckpt = std::fs::read(dir.join("run/model.ckpt")).map_err(|e| e.to_string())?;
    Ok((report, ckpt))
}

pub fn run() -> Outcome {
    let root = crate::work_dir().join("reproducibility");
    let _ = std::fs::remove_dir_all(&root);
    let (a, b) = match (pipeline(&root.join("a")), pipeline(&root.join("b"))) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome::error(e),
    };
    let same_report = a.0 == b.0 && !a.0.is_empty();
    let same_ckpt = a.1 == b.1;
    Outcome::check(
        same_report,
        format!(
            "metric reports {}; checkpoints {}",
            if same_report { "identical" } else { "differ" },
            if same_ckpt { "byte-identical" } else { "differ" }
        ),
    )
}
