//! Central finite-difference gradient checking.
//!
//! These helpers never touch an op's backward closure when computing the
//! numerical side, so they serve as an independent oracle for it.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Branch decisions of non-smooth ops (ReLU masks, matching assignments)
/// in evaluation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BranchTape(Vec<Vec<usize>>);

impl BranchTape {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

enum BranchMode {
    Record(Vec<Vec<usize>>),
    Replay(Rc<BranchTape>, usize),
}

thread_local! {
    static BRANCHES: RefCell<Option<BranchMode>> = const { RefCell::new(None) };
}

/// `None` outside [`record_branches`]/[`replay_branches`]. Otherwise the
/// decisions to use: freshly computed by `decide` (and recorded), or the
/// recorded ones in replay.
pub(crate) fn frozen_branch(decide: impl FnOnce() -> Result<Vec<usize>>) -> Result<Option<Vec<usize>>> {
    let active = BRANCHES.with(|b| b.borrow().is_some());
    if !active {
        return Ok(None);
    }
    let replayed = BRANCHES.with(|b| match b.borrow_mut().as_mut() {
        Some(BranchMode::Replay(tape, next)) => {
            let d = tape.0.get(*next).cloned();
            *next += 1;
            Some(d)
        }
        _ => None,
    });
    match replayed {
        Some(Some(d)) => Ok(Some(d)),
        Some(None) => Err(Error::Contract("branch replay ran past the recorded tape".into())),
        None => {
            let d = decide()?;
            BRANCHES.with(|b| {
                if let Some(BranchMode::Record(tape)) = b.borrow_mut().as_mut() {
                    tape.push(d.clone());
                }
            });
            Ok(Some(d))
        }
    }
}

fn with_mode<T>(mode: BranchMode, f: impl FnOnce() -> T) -> (T, BranchMode) {
    let prev = BRANCHES.with(|b| b.borrow_mut().replace(mode));
    let out = f();
    let mode = BRANCHES.with(|b| std::mem::replace(&mut *b.borrow_mut(), prev)).expect("branch mode active");
    (out, mode)
}

/// Runs `f`, recording every branch decision it makes.
pub fn record_branches<T>(f: impl FnOnce() -> T) -> (T, BranchTape) {
    match with_mode(BranchMode::Record(Vec::new()), f) {
        (out, BranchMode::Record(tape)) => (out, BranchTape(tape)),
        _ => unreachable!("mode restored as recorded"),
    }
}

/// Runs `f` with every branch decision taken from `tape`, so the result is
/// the smooth piece of the function that was active when `tape` was
/// recorded. `f` must issue the same sequence of non-smooth ops.
pub fn replay_branches<T>(tape: &BranchTape, f: impl FnOnce() -> T) -> T {
    with_mode(BranchMode::Replay(Rc::new(tape.clone()), 0), f).0
}

/// Step used for every central difference in this crate.
pub const STEP: f64 = 1e-4;

/// Magnitude floor in the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `f` on random inputs of the given shapes.
///
/// The scalar objective is `sum(f(inputs) * r)` for a fixed random `r`, so
/// every output element contributes with a distinct weight. Returns the
/// worst elementwise relative error over all input entries.
pub fn check_op<F>(shapes: &[&[usize]], seed: u64, f: F) -> f64
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| (0..s.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    check_op_at(shapes, &values, seed ^ 0x9e37_79b9, f)
}

/// Like [`check_op`] but at caller-chosen input values.
pub fn check_op_at<F>(shapes: &[&[usize]], values: &[Vec<f64>], seed: u64, f: F) -> f64
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let build = |vals: &[Vec<f64>], grad: bool| -> Vec<Tensor> {
        shapes
            .iter()
            .zip(vals)
            .map(|(s, v)| {
                if grad {
                    Tensor::param(v.clone(), s).expect("shape")
                } else {
                    Tensor::new(v.clone(), s).expect("shape")
                }
            })
            .collect()
    };

    let inputs = build(values, true);
    let out = f(&inputs).expect("op failed");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objective = |out: &Tensor| -> f64 {
        out.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let w = Tensor::new(weights.clone(), out.shape()).unwrap();
    out.mul(&w).unwrap().sum().backward().expect("backward");

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = input.grad().map(|g| g.clone()).unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let mut vals = values.to_vec();
            vals[i][j] = values[i][j] + STEP;
            let plus = no_grad(|| objective(&f(&build(&vals, false)).unwrap()));
            vals[i][j] = values[i][j] - STEP;
            let minus = no_grad(|| objective(&f(&build(&vals, false)).unwrap()));
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    worst
}
