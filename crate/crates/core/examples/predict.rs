//! Trains briefly, then segments a fresh synthetic image and writes the
//! masks, the instance list and an overlay.
//!
//! `cargo run --release --example predict -- [steps] [out_dir]`

use std::path::PathBuf;

use iaunet::cli::overlay;
use iaunet::config::RunConfig;
use iaunet::data::{generate_dataset, generate_scene, write_pgm, write_ppm, SceneSpec};
use iaunet::infer::predict_image;
use iaunet::mask_head::DEFAULT_SCORE_FLOOR;
use iaunet::metrics::PredictionFile;
use iaunet::train::Trainer;

fn main() -> iaunet::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(150, |s| s.parse().expect("steps"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "predict_out".into()));
    let mut cfg = RunConfig { seed: 3, ..Default::default() };
    cfg.data.count = 8;
    let samples = generate_dataset(&cfg.data.scene, cfg.data.count)?;
    let mut trainer = Trainer::new(cfg)?;
    for _ in 0..steps {
        let rec = trainer.step(&samples)?;
        if rec.step % 50 == 0 {
            println!("step {} total {:.4}", rec.step, rec.loss.total);
        }
    }
    // 72x80 is not a multiple of 32: the image is zero-padded to 96x96
    let scene = SceneSpec { seed: 1234, height: 96, width: 96, ..Default::default() };
    let mut test = generate_scene(&scene)?.image;
    test = iaunet::data::RgbImage::new(72, 80, crop(&test, 72, 80))?;
    let pred = predict_image(&trainer.model, &test, DEFAULT_SCORE_FLOOR)?;
    std::fs::create_dir_all(&out).map_err(|e| iaunet::Error::Io { path: out.clone(), source: e })?;
    let file = PredictionFile::from_instances("test", test.height, test.width, (pred.input_height, pred.input_width), &pred.instances);
    for (k, inst) in pred.instances.iter().enumerate() {
        write_pgm(&out.join(format!("mask_{k:03}.pgm")), &inst.mask)?;
        println!("instance {k}: score {:.3} area {}", inst.score, inst.mask.area());
    }
    write_ppm(&out.join("overlay.ppm"), &overlay(&test, &pred.instances))?;
    std::fs::write(out.join("instances.json"), serde_json::to_string_pretty(&file).expect("serializes"))
        .map_err(|e| iaunet::Error::Io { path: out.clone(), source: e })?;
    println!("input {}x{} padded to {}x{}", test.height, test.width, pred.input_height, pred.input_width);
    Ok(())
}

fn crop(img: &iaunet::data::RgbImage, h: usize, w: usize) -> Vec<f64> {
    (0..3).flat_map(|c| (0..h).flat_map(move |y| (0..w).map(move |x| img.get(c, y, x)))).collect()
}
