//! Command-line front end: `generate`, `train`, `eval`, `predict` and
//! `gradcheck`.
//!
//! Exit codes: 0 success, 1 usage, 2 validation or I/O, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_dataset, load_dataset, read_ppm, save_dataset, write_pgm, write_ppm, RgbImage, Sample};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradcheckOptions};
use crate::infer::{evaluate_model, predict_image};
use crate::mask_head::{Instance, DEFAULT_SCORE_FLOOR};
use crate::metrics::PredictionFile;
use crate::model::{Iaunet, ModelConfig};
use crate::tensor::inject_backward_fault;
use crate::train::train;

pub const EXIT_USAGE: i32 = 1;
pub const EVAL_FILE: &str = "eval.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "iaunet", version, about = "Query-based U-Net instance segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; every flag overrides the file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run seed; also seeds the synthetic scenes.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides one config key by dotted path, e.g. `model.use_se=false`.
    /// The value is read as JSON, or as a string when it is not valid JSON.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    pub set: Vec<(String, String)>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic dataset (images/*.ppm, annotations/*.json).
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Trains a model, writing train_log.csv and checkpoint.bin.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        /// Dataset directory; synthetic scenes from the config otherwise.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Print only the final step.
        #[arg(long)]
        quiet: bool,
    },
    /// Scores a checkpoint on a dataset and writes eval.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SCORE_FLOOR)]
        score_floor: f64,
    },
    /// Segments one PPM image: PGM masks, a JSON instance list and an overlay.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SCORE_FLOOR)]
        score_floor: f64,
    },
    /// Checks analytic gradients against central differences on the tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = GradcheckOptions::default().samples_per_tensor)]
        samples_per_tensor: usize,
        /// Corrupts the backward pass of one primitive (test hook).
        #[arg(long, hide = true, value_name = "OP")]
        fault_op: Option<String>,
    },
}

fn parse_assignment(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_owned(), v.to_owned())),
        _ => Err(format!("expected KEY=VALUE, got {s:?}")),
    }
}

fn set_key(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let bad = |m: String| Error::Validation(vec![m]);
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| bad(format!("--set {key}: {} is not a section", parts[..i].join("."))))?;
        // unknown keys are inserted here and rejected when the config is re-read
        node = obj.entry(*part).or_insert(Value::Null);
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok(())
}

/// The configuration file (or defaults) with every flag of `common` applied.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if !common.set.is_empty() {
        let mut v = serde_json::to_value(&cfg).expect("config serializes");
        for (k, raw) in &common.set {
            set_key(&mut v, k, raw)?;
        }
        cfg = serde_json::from_value(v)
            .map_err(|e| Error::Validation(vec![format!("--set: {e}")]))?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.data.scene.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

/// Dataset directory if configured, synthetic scenes otherwise.
pub fn load_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    match &cfg.data.dir {
        Some(dir) => load_dataset(dir),
        None => generate_dataset(&cfg.data.scene, cfg.data.count),
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.4}"))
}

fn generate(common: &Common, count: Option<usize>) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(n) = count {
        cfg.data.count = n;
    }
    cfg.data.scene.validate()?;
    let samples = generate_dataset(&cfg.data.scene, cfg.data.count)?;
    save_dataset(&cfg.out, &samples)?;
    for s in &samples {
        println!("{}: {} instances", s.record.image_id, s.record.instances.len());
    }
    println!("wrote {} images to {}", samples.len(), cfg.out.display());
    Ok(())
}

fn run_train(common: &Common, steps: Option<usize>, data: Option<PathBuf>, quiet: bool) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(s) = steps {
        cfg.optim.steps = s;
    }
    if data.is_some() {
        cfg.data.dir = data;
    }
    cfg.validate()?;
    let samples = load_samples(&cfg)?;
    if samples.is_empty() {
        return Err(Error::Validation(vec!["training needs at least one sample".into()]));
    }
    mkdir(&cfg.out)?;
    cfg.save(&cfg.out.join(CONFIG_FILE))?;
    let steps = cfg.optim.steps;
    let outcome = train(&cfg, &samples, |r| {
        if !quiet || r.step == steps {
            println!("step {}/{steps}  lr {:.3e}  total {:.6}", r.step, r.lr, r.loss.total);
        }
    })?;
    println!("log {}", outcome.log.display());
    println!("checkpoint {}", outcome.checkpoint.display());
    Ok(())
}

/// Model for a checkpoint: the run configuration's architecture when the
/// user gave one (a config file or a `model.*` override), so mismatches are
/// reported entry by entry, otherwise the architecture stored in the file.
fn load_model(common: &Common, cfg: &RunConfig, checkpoint: &Path) -> Result<Iaunet> {
    let ck = Checkpoint::load(checkpoint)?;
    if common.config.is_some() || common.set.iter().any(|(k, _)| k == "model" || k.starts_with("model.")) {
        let model = Iaunet::new(cfg.model.clone(), cfg.seed)?;
        ck.restore(&model)?;
        Ok(model)
    } else {
        ck.into_model()
    }
}

fn run_eval(common: &Common, checkpoint: &Path, data: Option<PathBuf>, score_floor: f64) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if data.is_some() {
        cfg.data.dir = data;
    }
    if cfg.data.dir.is_none() {
        cfg.data.scene.validate()?;
    }
    let model = load_model(common, &cfg, checkpoint)?;
    let result = evaluate_model(&model, &load_samples(&cfg)?, score_floor)?;
    mkdir(&cfg.out)?;
    let path = cfg.out.join(EVAL_FILE);
    write_text(&path, &(serde_json::to_string_pretty(&result).expect("result serializes") + "\n"))?;
    println!(
        "AP {}  AP50 {}  AP75 {}  AP_S {}  AP_M {}  AP_L {}",
        fmt_opt(result.ap),
        fmt_opt(result.ap50),
        fmt_opt(result.ap75),
        fmt_opt(result.ap_s),
        fmt_opt(result.ap_m),
        fmt_opt(result.ap_l)
    );
    println!("wrote {}", path.display());
    Ok(())
}

const PALETTE: [[f64; 3]; 6] =
    [[0.9, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.3, 0.95], [0.95, 0.8, 0.1], [0.8, 0.1, 0.85], [0.1, 0.85, 0.85]];

/// Image with every instance blended half-and-half in a palette colour;
/// later (lower-scored) instances are painted on top.
pub fn overlay(image: &RgbImage, instances: &[Instance]) -> RgbImage {
    let (h, w) = (image.height, image.width);
    let mut data = image.data.clone();
    for (k, inst) in instances.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        for y in 0..h {
            for x in 0..w {
                if inst.mask.get(y, x) {
                    for (c, &v) in colour.iter().enumerate() {
                        let px = &mut data[c * h * w + y * w + x];
                        *px = 0.5 * *px + 0.5 * v;
                    }
                }
            }
        }
    }
    RgbImage { height: h, width: w, data }
}

fn run_predict(common: &Common, checkpoint: &Path, image_path: &Path, score_floor: f64) -> Result<()> {
    let cfg = resolve_config(common)?;
    let model = load_model(common, &cfg, checkpoint)?;
    let image = read_ppm(image_path)?;
    let pred = predict_image(&model, &image, score_floor)?;
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_owned();
    mkdir(&cfg.out)?;
    let mut file =
        PredictionFile::from_instances(&stem, image.height, image.width, (pred.input_height, pred.input_width), &pred.instances);
    for (k, (inst, entry)) in pred.instances.iter().zip(&mut file.instances).enumerate() {
        let name = format!("{stem}_mask_{k:03}.pgm");
        write_pgm(&cfg.out.join(&name), &inst.mask)?;
        entry.mask_path = Some(name);
        println!("instance {k}: class {} score {:.4} area {}", inst.class_id, inst.score, inst.mask.area());
    }
    let json = cfg.out.join(format!("{stem}.json"));
    write_text(&json, &(serde_json::to_string_pretty(&file).expect("predictions serialize") + "\n"))?;
    write_ppm(&cfg.out.join(format!("{stem}_overlay.ppm")), &overlay(&image, &pred.instances))?;
    if (pred.input_height, pred.input_width) != (image.height, image.width) {
        println!("padded {}x{} to {}x{}", image.height, image.width, pred.input_height, pred.input_width);
    }
    println!("{} instances, wrote {}", pred.instances.len(), json.display());
    Ok(())
}

fn run_gradcheck(seed: u64, samples_per_tensor: usize, fault_op: Option<&str>) -> Result<bool> {
    let opts = GradcheckOptions { seed, samples_per_tensor, ..Default::default() };
    inject_backward_fault(fault_op);
    let report = gradcheck::run(&ModelConfig::tiny(), &opts);
    inject_backward_fault(None);
    let report = report?;
    print!("{}", report.render());
    Ok(report.passed())
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Generate { common, count } => generate(&common, count),
        Command::Train { common, steps, data, quiet } => run_train(&common, steps, data, quiet),
        Command::Eval { common, checkpoint, data, score_floor } => run_eval(&common, &checkpoint, data, score_floor),
        Command::Predict { common, checkpoint, image, score_floor } => {
            run_predict(&common, &checkpoint, &image, score_floor)
        }
        Command::Gradcheck { seed, samples_per_tensor, fault_op } => {
            match run_gradcheck(seed, samples_per_tensor, fault_op.as_deref()) {
                Ok(true) => Ok(()),
                Ok(false) => return Error::Numeric(String::new()).exit_code(),
                Err(e) => Err(e),
            }
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
