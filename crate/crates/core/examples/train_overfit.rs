//! Overfits the default model on four synthetic scenes and reports the
//! training-set AP.
//!
//! `cargo run --release --example train_overfit -- [steps] [lr]`

use std::time::Instant;

use iaunet::config::RunConfig;
use iaunet::data::{generate_dataset, SceneSpec};
use iaunet::infer::evaluate_model;
use iaunet::mask_head::DEFAULT_SCORE_FLOOR;
use iaunet::train::Trainer;

fn main() -> iaunet::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig { seed: 7, ..Default::default() };
    cfg.data.scene = SceneSpec { seed: 7, ..Default::default() };
    if let Some(steps) = args.next() {
        cfg.optim.steps = steps.parse().expect("steps");
    }
    if let Some(lr) = args.next() {
        cfg.optim.lr = lr.parse().expect("lr");
    }
    let samples = generate_dataset(&cfg.data.scene, cfg.data.count)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let start = Instant::now();
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..cfg.optim.steps {
        let rec = trainer.step(&samples)?;
        first.get_or_insert(rec.loss.total);
        last = rec.loss.total;
        if rec.step % 25 == 0 || rec.step == 1 {
            println!("step {:4}  lr {:.2e}  total {:.4}  ({:.1}s)", rec.step, rec.lr, rec.loss.total, start.elapsed().as_secs_f64());
        }
    }
    let eval = evaluate_model(&trainer.model, &samples, DEFAULT_SCORE_FLOOR)?;
    let first = first.unwrap_or(f64::NAN);
    println!("loss ratio {:.4}  AP {:?}  AP50 {:?}  AP75 {:?}", last / first, eval.ap, eval.ap50, eval.ap75);
    Ok(())
}
