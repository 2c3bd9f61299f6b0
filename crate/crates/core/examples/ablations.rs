//! Runs a few training steps under every architecture toggle and compares
//! sequential and cyclic query updates on identical weights.
//!
//! `cargo run --release --example ablations -- [steps]`

use iaunet::config::RunConfig;
use iaunet::data::{generate_dataset, RgbImage};
use iaunet::model::{DeepSupervision, Iaunet, ModelConfig};
use iaunet::tensor::BnMode;
use iaunet::train::Trainer;
use iaunet::transformer::UpdateOrder;

fn main() -> iaunet::Result<()> {
    let steps = std::env::args().nth(1).map_or(5, |s| s.parse().expect("steps"));
    let base = ModelConfig::default();
    let variants = [
        ("baseline", base.clone()),
        ("no SE", ModelConfig { use_se: false, ..base.clone() }),
        ("no CoordConv", ModelConfig { use_coord_conv: false, ..base.clone() }),
        ("FFN 128", ModelConfig { ffn_dim: 128, ..base.clone() }),
        ("1 block per layer", ModelConfig { blocks_per_layer: 1, ..base.clone() }),
        ("cyclic order", ModelConfig { update_order: UpdateOrder::Cyclic, ..base.clone() }),
        ("supervision per layer", ModelConfig { deep_supervision: DeepSupervision::PerLayer, ..base.clone() }),
        ("no deep supervision", ModelConfig { deep_supervision: DeepSupervision::Off, ..base.clone() }),
        ("16 queries", ModelConfig { num_queries: 16, ..base.clone() }),
    ];
    let mut cfg = RunConfig { seed: 7, ..Default::default() };
    cfg.optim.batch_size = 2;
    let samples = generate_dataset(&cfg.data.scene, cfg.data.count)?;
    for (name, model) in variants {
        let mut trainer = Trainer::new(RunConfig { model, ..cfg.clone() })?;
        let mut last = None;
        for _ in 0..steps {
            last = Some(trainer.step(&samples)?);
        }
        let last = last.map_or(f64::NAN, |r| r.loss.total);
        println!("{name:<24} params {:>7}  loss after {steps} steps {last:.4}", count_params(&trainer.model));
    }

    let seq = Iaunet::new(base.clone(), 7)?;
    let cyc = Iaunet::new(ModelConfig { update_order: UpdateOrder::Cyclic, ..base }, 7)?;
    let x = RgbImage::batch(&[&samples[0].image])?;
    let a = seq.forward(&x, BnMode::Eval)?;
    let b = cyc.forward(&x, BnMode::Eval)?;
    let diff = a
        .final_point()
        .mask_logits
        .data()
        .iter()
        .zip(b.final_point().mask_logits.data())
        .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    println!("sequential vs cyclic, same weights: max |mask logit difference| {diff:.3e}");
    Ok(())
}

fn count_params(model: &Iaunet) -> usize {
    model.store.params().iter().map(|p| p.tensor().numel()).sum()
}
