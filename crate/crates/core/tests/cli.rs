use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iaunet::checkpoint::Checkpoint;
use iaunet::config::RunConfig;
use iaunet::data::{write_ppm, RgbImage, SceneSpec};
use iaunet::metrics::{EvalResult, PredictionFile};
use iaunet::model::{Iaunet, ModelConfig};
use iaunet::train::LOG_HEADER;
use serde_json::Value;

fn iaunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iaunet")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `root` with its bytes, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Tiny model on 32x32 scenes so CLI tests stay fast.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig { model: ModelConfig::tiny(), ..Default::default() };
    cfg.optim.batch_size = 2;
    cfg.data.count = 2;
    cfg.data.scene =
        SceneSpec { height: 32, width: 32, min_axis: 4.0, max_axis: 7.0, min_instances: 1, max_instances: 3, ..Default::default() };
    let path = dir.join("tiny.json");
    cfg.save(&path).unwrap();
    path
}

#[test]
fn generate_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let oa = iaunet(&["generate", "--seed", "7", "--count", "8", "--out", p(&a)]);
    let ob = iaunet(&["generate", "--seed", "7", "--count", "8", "--out", p(&b)]);
    assert_eq!((code(&oa), code(&ob)), (0, 0));
    assert_eq!(stdout(&oa).lines().count(), 9);
    assert!(stdout(&oa).starts_with("img_0000: "));
    let ta = tree(&a);
    assert_eq!(ta.len(), 16);
    assert_eq!(ta, tree(&b));
}

#[test]
fn generate_zero_images() {
    let dir = tempfile::tempdir().unwrap();
    let o = iaunet(&["generate", "--count", "0", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0);
    assert!(tree(dir.path()).is_empty());
}

/// Checks one annotation file against the schema by hand, independently of
/// the deserializer.
fn schema_problems(v: &Value) -> Vec<String> {
    let mut p = Vec::new();
    let Some(obj) = v.as_object() else { return vec!["not an object".into()] };
    let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    if keys != ["height", "image_id", "instances", "width"] {
        p.push(format!("keys {keys:?}"));
    }
    let h = obj.get("height").and_then(Value::as_u64).unwrap_or(0);
    let w = obj.get("width").and_then(Value::as_u64).unwrap_or(0);
    if h == 0 || w == 0 {
        p.push("height/width must be positive integers".into());
    }
    if !obj.get("image_id").is_some_and(Value::is_string) {
        p.push("image_id must be a string".into());
    }
    for (k, inst) in obj.get("instances").and_then(Value::as_array).into_iter().flatten().enumerate() {
        let Some(i) = inst.as_object() else {
            p.push(format!("instance {k} not an object"));
            continue;
        };
        if i.keys().map(String::as_str).collect::<Vec<_>>() != ["class_id", "polygon"] {
            p.push(format!("instance {k} keys"));
        }
        if !i.get("class_id").is_some_and(Value::is_u64) {
            p.push(format!("instance {k} class_id"));
        }
        let poly = i.get("polygon").and_then(Value::as_array).cloned().unwrap_or_default();
        if poly.len() < 3 {
            p.push(format!("instance {k} polygon too short"));
        }
        for pt in &poly {
            let xy: Vec<f64> = pt.as_array().into_iter().flatten().filter_map(Value::as_f64).collect();
            // cells may cross the border; only the rasterized mask is clipped
            if xy.len() != 2 || !xy.iter().all(|v| v.is_finite()) {
                p.push(format!("instance {k} point {pt}"));
            }
        }
    }
    p
}

#[test]
fn generated_annotations_match_schema() {
    let dir = tempfile::tempdir().unwrap();
    let o = iaunet(&["generate", "--seed", "3", "--count", "4", "--set", "data.scene.multi_class=true", "--set", "data.scene.max_instances=3", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let files = tree(&dir.path().join("annotations"));
    assert_eq!(files.len(), 4);
    for (name, bytes) in files {
        let v: Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(schema_problems(&v), Vec::<String>::new(), "{name:?}");
        assert!(v["instances"].as_array().unwrap().iter().any(|i| i["class_id"] == 1));
    }
}

#[test]
fn zero_steps_checkpoint_is_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = iaunet(&["train", "--config", p(&cfg), "--seed", "5", "--steps", "0", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("train_log.csv")).unwrap(), format!("{LOG_HEADER}\n"));
    let ck = Checkpoint::load(&out.join("checkpoint.bin")).unwrap();
    assert_eq!(ck, Checkpoint::capture(&Iaunet::new(ModelConfig::tiny(), 5).unwrap(), 0));
    let saved = RunConfig::load(&out.join("config.json")).unwrap();
    assert_eq!((saved.seed, saved.optim.steps), (5, 0));
}

#[test]
fn train_eval_predict_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let o = iaunet(&["train", "--config", p(&cfg), "--seed", "2", "--steps", "3", "--set", "optim.checkpoint_interval=2", "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().nth(3).unwrap().starts_with("3,"));
    assert!(run.join("checkpoint_step2.bin").exists());
    let ck = run.join("checkpoint.bin");

    // eval: identical bytes twice, values in [0, 1]
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    for e in [&e1, &e2] {
        let o = iaunet(&["eval", "--config", p(&cfg), "--checkpoint", p(&ck), "--out", p(e)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let bytes = fs::read(e1.join("eval.json")).unwrap();
    assert_eq!(bytes, fs::read(e2.join("eval.json")).unwrap());
    let r: EvalResult = serde_json::from_slice(&bytes).unwrap();
    for v in [r.ap, r.ap50, r.ap75, r.ap_s].into_iter().flatten().chain(r.per_image.values().flatten().copied()) {
        assert!((0.0..=1.0).contains(&v));
    }
    assert_eq!(r.per_image.len(), 2);

    // predict on a non-multiple-of-32 image
    let img = dir.path().join("in.ppm");
    write_ppm(&img, &RgbImage::new(40, 50, (0..3 * 40 * 50).map(|i| (i % 13) as f64 / 13.0).collect()).unwrap()).unwrap();
    let pout = dir.path().join("pred");
    let o = iaunet(&["predict", "--checkpoint", p(&ck), "--image", p(&img), "--score-floor", "0", "--out", p(&pout)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let file: PredictionFile = serde_json::from_slice(&fs::read(pout.join("in.json")).unwrap()).unwrap();
    assert_eq!((file.height, file.width, file.input_height, file.input_width), (40, 50, 64, 64));
    let files = tree(&pout);
    let masks = files.keys().filter(|k| k.extension().is_some_and(|e| e == "pgm")).count();
    assert_eq!(masks, file.instances.len());
    assert!(file.instances.iter().all(|i| i.mask_path.as_ref().is_some_and(|m| pout.join(m).exists())));
    let overlay = iaunet::data::read_ppm(&pout.join("in_overlay.ppm")).unwrap();
    assert_eq!((overlay.height, overlay.width), (40, 50));
}

#[test]
fn blank_image_prediction_is_valid_json() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.bin");
    Checkpoint::capture(&Iaunet::new(ModelConfig::tiny(), 1).unwrap(), 0).save(&ck).unwrap();
    let img = dir.path().join("blank.ppm");
    write_ppm(&img, &RgbImage::filled(32, 32, 0.0)).unwrap();
    let o = iaunet(&["predict", "--checkpoint", p(&ck), "--image", p(&img), "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let file: PredictionFile = serde_json::from_slice(&fs::read(dir.path().join("blank.json")).unwrap()).unwrap();
    assert_eq!(file.detections().unwrap().len(), file.instances.len());
}

#[test]
fn incompatible_checkpoint_named_per_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ck = dir.path().join("ck.bin");
    let other = ModelConfig { dim: 32, ..ModelConfig::tiny() };
    Checkpoint::capture(&Iaunet::new(other, 1).unwrap(), 0).save(&ck).unwrap();
    let o = iaunet(&["eval", "--config", p(&cfg), "--checkpoint", p(&ck), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("incompatible checkpoint"), "{err}");
    assert!(err.contains("queries.q: checkpoint shape [4, 32], model expects [4, 16]"), "{err}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&iaunet(&[])), 1);
    assert_eq!(code(&iaunet(&["train", "--steps", "many"])), 1);
    assert_eq!(code(&iaunet(&["eval"])), 1);
    assert_eq!(code(&iaunet(&["train", "--set", "optim.batch_size=0", "--out", p(dir.path())])), 2);
    assert_eq!(code(&iaunet(&["train", "--set", "model.no_such_toggle=1", "--out", p(dir.path())])), 2);
    assert_eq!(code(&iaunet(&["train", "--config", p(&dir.path().join("missing.json"))])), 2);
    let cfg = tiny_config(dir.path());
    let o = iaunet(&["train", "--config", p(&cfg), "--steps", "2", "--set", "loss.bce=1e308", "--out", p(&dir.path().join("nan"))]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("training aborted at step 1"), "{err}");
}

#[test]
fn gradcheck_fault_names_the_op() {
    let o = iaunet(&["gradcheck", "--samples-per-tensor", "1", "--fault-op", "layer_norm"]);
    assert_ne!(code(&o), 0);
    let out = stdout(&o);
    let verdict = out.lines().last().unwrap();
    assert!(verdict.starts_with("FAILED") && verdict.contains("layer_norm"), "{out}");
    assert!(!verdict.contains("conv2d"), "{out}");
}
