//! End-to-end gradient verification: every differentiable primitive on
//! random inputs, then every parameter group of a small model through the
//! full training loss.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_dataset, RgbImage, SceneSpec};
use crate::error::{Error, Result};
use crate::loss::{bce_loss_rows, cross_entropy_rows, dice_loss_rows, total_loss, LossWeights};
use crate::model::{Iaunet, ModelConfig};
use crate::tensor::gradcheck::{check_op, relative_error, record_branches, replay_branches, STEP};
use crate::tensor::{
    batchnorm2d, bilinear_upsample2x, concat_channels, conv2d, depthwise_conv2d, layer_norm, linear, matmul, no_grad,
    BnMode, RunningStats, Tensor,
};
use crate::train::prepare_sample;

pub const DEFAULT_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub batch: usize,
    /// Entries checked per parameter tensor (all entries if smaller).
    pub samples_per_tensor: usize,
    pub threshold: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { seed: 0, batch: 4, samples_per_tensor: 4, threshold: DEFAULT_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub entries: usize,
    pub worst: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub ops: Vec<Check>,
    pub groups: Vec<Check>,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&Check> {
        self.ops.iter().chain(&self.groups).filter(|c| c.entries == 0 || !(c.worst < self.threshold)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut section = |title: &str, checks: &[Check]| {
            let _ = writeln!(s, "{title}");
            for c in checks {
                let status = if c.entries > 0 && c.worst < self.threshold { "ok" } else { "FAIL" };
                let _ = writeln!(
                    s,
                    "  {:<32} {:>4} entries  worst rel err {:.3e}  {status}",
                    c.name, c.entries, c.worst
                );
            }
        };
        section("primitive ops", &self.ops);
        section("parameter groups", &self.groups);
        let failed = self.failures();
        if failed.is_empty() {
            let _ = writeln!(s, "all checks below {:e}", self.threshold);
        } else {
            let names: Vec<&str> = failed.iter().map(|c| c.name.as_str()).collect();
            let _ = writeln!(s, "FAILED (threshold {:e}): {}", self.threshold, names.join(", "));
        }
        s
    }
}

type OpFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let stats = Rc::new(RefCell::new(RunningStats::new(3)));
    let gt: Vec<f64> = (0..12).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
    let gt2 = gt.clone();
    let valid: Vec<f64> = (0..12).map(|i| if i == 5 { 0.0 } else { 1.0 }).collect();
    let valid2 = valid.clone();
    vec![
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t: &[Tensor]| t[0].add(&t[1]))),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|t: &[Tensor]| t[0].sub(&t[1]))),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t: &[Tensor]| t[0].mul(&t[1]))),
        ("add_broadcast", vec![vec![2, 3, 4], vec![4]], Box::new(|t: &[Tensor]| t[0].add_broadcast(&t[1]))),
        ("scale", vec![vec![5]], Box::new(|t: &[Tensor]| Ok(t[0].scale(-1.7)))),
        ("relu", vec![vec![7]], Box::new(|t: &[Tensor]| Ok(t[0].relu()))),
        ("sigmoid", vec![vec![7]], Box::new(|t: &[Tensor]| Ok(t[0].sigmoid()))),
        ("sum", vec![vec![2, 3]], Box::new(|t: &[Tensor]| Ok(t[0].sum()))),
        ("mean", vec![vec![2, 3]], Box::new(|t: &[Tensor]| Ok(t[0].mean()))),
        ("reshape", vec![vec![2, 3]], Box::new(|t: &[Tensor]| t[0].reshape(&[3, 2]))),
        ("transpose_last2", vec![vec![2, 3, 4]], Box::new(|t: &[Tensor]| t[0].transpose_last2())),
        ("softmax", vec![vec![2, 5]], Box::new(|t: &[Tensor]| t[0].softmax_lastdim())),
        ("expand_batch", vec![vec![3, 2]], Box::new(|t: &[Tensor]| Ok(t[0].expand_batch(3)))),
        ("index_select0", vec![vec![4, 3]], Box::new(|t: &[Tensor]| t[0].index_select0(&[2, 0, 2]))),
        ("flatten_spatial", vec![vec![2, 3, 2, 2]], Box::new(|t: &[Tensor]| t[0].flatten_spatial())),
        ("global_avg_pool", vec![vec![2, 3, 2, 3]], Box::new(|t: &[Tensor]| t[0].global_avg_pool())),
        ("scale_channels", vec![vec![2, 3, 2, 2], vec![2, 3]], Box::new(|t: &[Tensor]| t[0].scale_channels(&t[1]))),
        ("swap_axes12", vec![vec![2, 3, 4, 2]], Box::new(|t: &[Tensor]| t[0].swap_axes12())),
        ("matmul", vec![vec![2, 3, 4], vec![2, 4, 5]], Box::new(|t: &[Tensor]| matmul(&t[0], &t[1]))),
        ("linear", vec![vec![2, 3, 4], vec![5, 4], vec![5]], Box::new(|t: &[Tensor]| linear(&t[0], &t[1], Some(&t[2])))),
        ("concat_channels", vec![vec![2, 1, 2, 2], vec![2, 3, 2, 2]], Box::new(|t: &[Tensor]| concat_channels(&[&t[0], &t[1]]))),
        (
            "conv2d",
            vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            Box::new(|t: &[Tensor]| conv2d(&t[0], &t[1], Some(&t[2]), 2, 1)),
        ),
        ("depthwise_conv2d", vec![vec![2, 3, 4, 4], vec![3, 1, 3, 3]], Box::new(|t: &[Tensor]| depthwise_conv2d(&t[0], &t[1], 1, 1))),
        ("bilinear_upsample2x", vec![vec![1, 2, 3, 3]], Box::new(|t: &[Tensor]| bilinear_upsample2x(&t[0]))),
        (
            "batchnorm2d",
            vec![vec![2, 3, 2, 2], vec![3], vec![3]],
            Box::new(move |t: &[Tensor]| batchnorm2d(&t[0], &t[1], &t[2], &stats, BnMode::Train)),
        ),
        ("layer_norm", vec![vec![2, 3, 6], vec![6], vec![6]], Box::new(|t: &[Tensor]| layer_norm(&t[0], &t[1], &t[2]))),
        (
            "dice_loss",
            vec![vec![2, 6]],
            Box::new(move |t: &[Tensor]| dice_loss_rows(&t[0].sigmoid(), &gt, &valid, &[0.5, 0.25])),
        ),
        ("bce_loss", vec![vec![2, 6]], Box::new(move |t: &[Tensor]| bce_loss_rows(&t[0], &gt2, &valid2, &[0.5, 0.25]))),
        (
            "cls_loss",
            vec![vec![3, 3]],
            Box::new(|t: &[Tensor]| cross_entropy_rows(&t[0], &[0, 2, 1], &[1.0, 1.0, 0.1], &[0.3, 0.3, 0.3])),
        ),
    ]
}

/// Worst relative error of every primitive op on random inputs.
pub fn check_primitives(seed: u64) -> Vec<Check> {
    primitives()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, f))| {
            let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
            let entries = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
            let worst = check_op(&refs, seed.wrapping_add(i as u64), f);
            Check { name: name.to_owned(), entries, worst }
        })
        .collect()
}

/// Compares analytic and central-difference gradients of the full training
/// loss for sampled entries of every parameter tensor, grouped by module.
///
/// The differences replay the ReLU masks and matchings of the unperturbed
/// pass, so they measure the same smooth piece the backward pass
/// differentiates even when a step would cross a kink.
pub fn check_model(cfg: &ModelConfig, opts: &GradcheckOptions) -> Result<Vec<Check>> {
    let model = Iaunet::new(cfg.clone(), opts.seed)?;
    let scene = SceneSpec {
        seed: opts.seed,
        height: cfg.image_size,
        width: cfg.image_size,
        min_instances: 1,
        max_instances: cfg.num_queries.min(3),
        min_axis: cfg.image_size as f64 / 10.0,
        max_axis: cfg.image_size as f64 / 5.0,
        ..Default::default()
    };
    let samples = generate_dataset(&scene, opts.batch)?;
    let mut images = Vec::new();
    let mut targets = Vec::new();
    for s in &samples {
        let (img, t) = prepare_sample(s, cfg.image_size, None)?;
        images.push(img);
        targets.push(t);
    }
    let x = RgbImage::batch(&images.iter().collect::<Vec<_>>())?;
    let weights = LossWeights::default();
    let loss = || -> Result<Tensor> {
        let out = model.forward(&x, BnMode::Train)?;
        Ok(total_loss(&out.points, &targets, &weights)?.0)
    };

    let (l, tape) = record_branches(loss);
    l?.backward()?;
    let store = &model.store;
    let analytic: Vec<Vec<f64>> = store
        .params()
        .iter()
        .map(|p| {
            let t = p.tensor();
            let g = t.grad().map(|g| g.clone());
            g.unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6ead);
    let mut groups: Vec<Check> = Vec::new();
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let p = &store.params()[pi];
        let base = p.tensor().data().to_vec();
        let mut order: Vec<usize> = (0..base.len()).collect();
        order.shuffle(&mut rng);
        let mut worst = 0.0f64;
        let checked = order.len().min(opts.samples_per_tensor);
        for &j in &order[..checked] {
            let eval_at = |v: f64| -> Result<f64> {
                let mut d = base.clone();
                d[j] = v;
                store.set(id, d)?;
                Ok(replay_branches(&tape, || no_grad(loss))?.item())
            };
            let numeric = (eval_at(base[j] + STEP)? - eval_at(base[j] - STEP)?) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[pi][j], numeric));
        }
        store.set(id, base)?;
        let name = p.group().to_owned();
        match groups.iter_mut().find(|g| g.name == name) {
            Some(g) => {
                g.entries += checked;
                g.worst = g.worst.max(worst);
            }
            None => groups.push(Check { name, entries: checked, worst }),
        }
    }
    if groups.is_empty() {
        return Err(Error::Contract("model has no parameters".into()));
    }
    Ok(groups)
}

/// Primitive checks followed by the model check on `cfg`.
pub fn run(cfg: &ModelConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    Ok(GradcheckReport { threshold: opts.threshold, ops: check_primitives(opts.seed), groups: check_model(cfg, opts)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::inject_backward_fault;

    #[test]
    fn primitives_pass_and_fault_is_named() {
        let ok = check_primitives(3);
        assert!(ok.iter().all(|c| c.worst < DEFAULT_THRESHOLD), "{ok:?}");
        inject_backward_fault(Some("depthwise_conv2d"));
        let bad = check_primitives(3);
        inject_backward_fault(None);
        let failed: Vec<&str> = bad.iter().filter(|c| c.worst >= DEFAULT_THRESHOLD).map(|c| c.name.as_str()).collect();
        assert_eq!(failed, ["depthwise_conv2d"]);
    }
}
