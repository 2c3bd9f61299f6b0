//! Batch and layer normalization.

use std::cell::RefCell;

use super::ops::dims4;
use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

/// Per-channel normalization of `[N, C, H, W]`.
///
/// Train mode normalizes with biased batch statistics and folds the same
/// biased statistics into `running` with momentum 0.1, so eval on the
/// training distribution reproduces train-mode normalization. Eval mode
/// applies the running statistics as a fixed affine map.
pub fn batchnorm2d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RefCell<RunningStats>,
    mode: BnMode,
) -> Result<Tensor> {
    let [n, c, h, w] = dims4("batchnorm2d", input)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm2d",
            format!("gamma/beta must be [{c}], got {:?}/{:?}", gamma.shape(), beta.shape()),
        ));
    }
    if n == 0 {
        return Err(Error::shape("batchnorm2d", "batch size must be >= 1"));
    }
    let s = h * w;
    let count = (n * s) as f64;
    let x = input.data();
    let plane = |ni: usize, ci: usize| &x[(ni * c + ci) * s..(ni * c + ci + 1) * s];

    let (mean, inv_std): (Vec<f64>, Vec<f64>) = match mode {
        BnMode::Train => {
            let mut means = vec![0.0; c];
            let mut vars = vec![0.0; c];
            for ci in 0..c {
                let m = (0..n).map(|ni| plane(ni, ci).iter().sum::<f64>()).sum::<f64>() / count;
                let v = (0..n)
                    .map(|ni| plane(ni, ci).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                    .sum::<f64>()
                    / count;
                means[ci] = m;
                vars[ci] = v;
            }
            let mut rs = running.borrow_mut();
            for ci in 0..c {
                rs.mean[ci] = (1.0 - BN_MOMENTUM) * rs.mean[ci] + BN_MOMENTUM * means[ci];
                rs.var[ci] = (1.0 - BN_MOMENTUM) * rs.var[ci] + BN_MOMENTUM * vars[ci];
            }
            let inv = vars.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            (means, inv)
        }
        BnMode::Eval => {
            let rs = running.borrow();
            (rs.mean.clone(), rs.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect())
        }
    };

    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * s;
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            for k in off..off + s {
                xhat[k] = (x[k] - mean[ci]) * inv_std[ci];
                out[k] = g * xhat[k] + b;
            }
        }
    }

    let gm = gamma.clone();
    Ok(Tensor::from_op(
        "batchnorm2d",
        out,
        vec![n, c, h, w],
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * s;
                    for k in off..off + s {
                        gg[ci] += g[k] * xhat[k];
                        gb[ci] += g[k];
                    }
                }
            }
            let mut gx = vec![0.0; g.len()];
            for ci in 0..c {
                let scale = gm.data()[ci] * inv_std[ci];
                let (mg, mgx) = match mode {
                    BnMode::Train => (gb[ci] / count, gg[ci] / count),
                    BnMode::Eval => (0.0, 0.0),
                };
                for ni in 0..n {
                    let off = (ni * c + ci) * s;
                    for k in off..off + s {
                        gx[k] = scale * (g[k] - mg - xhat[k] * mgx);
                    }
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }),
    ))
}

/// Normalizes over the last axis with learnable scale and shift.
pub fn layer_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let d = *input.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank 0 input"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape("layer_norm", format!("gamma/beta must be [{d}]")));
    }
    let inv_d = 1.0 / d as f64;
    let mut xhat = vec![0.0; input.numel()];
    let mut inv_std = Vec::with_capacity(input.numel() / d.max(1));
    for (row, xr) in input.data().chunks(d).zip(xhat.chunks_mut(d)) {
        let m = row.iter().sum::<f64>() * inv_d;
        let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() * inv_d;
        let is = 1.0 / (v + LN_EPS).sqrt();
        for (o, x) in xr.iter_mut().zip(row) {
            *o = (x - m) * is;
        }
        inv_std.push(is);
    }
    let out = xhat
        .iter()
        .enumerate()
        .map(|(k, xh)| gamma.data()[k % d] * xh + beta.data()[k % d])
        .collect();
    let gm = gamma.clone();
    Ok(Tensor::from_op(
        "layer_norm",
        out,
        input.shape().to_vec(),
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            let mut gx = vec![0.0; g.len()];
            for (r, ((gr, xr), gxr)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                let mut mean_dy = 0.0;
                let mut mean_dy_xhat = 0.0;
                for k in 0..d {
                    gg[k] += gr[k] * xr[k];
                    gb[k] += gr[k];
                    let dy = gr[k] * gm.data()[k];
                    mean_dy += dy;
                    mean_dy_xhat += dy * xr[k];
                }
                mean_dy *= inv_d;
                mean_dy_xhat *= inv_d;
                for k in 0..d {
                    let dy = gr[k] * gm.data()[k];
                    gxr[k] = inv_std[r] * (dy - mean_dy - xr[k] * mean_dy_xhat);
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_op;

    fn stats(c: usize) -> RefCell<RunningStats> {
        RefCell::new(RunningStats::new(c))
    }

    #[test]
    fn train_mode_standardizes() {
        let x = Tensor::new((0..48).map(|v| ((v * 7) % 11) as f64 * 37.0).collect(), &[2, 3, 2, 4])
            .unwrap();
        let y = batchnorm2d(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), &stats(3), BnMode::Train)
            .unwrap();
        for ci in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| y.data()[(n * 3 + ci) * 8..][..8].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 16.0;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let x = Tensor::new((0..16).map(|v| v as f64).collect(), &[1, 2, 2, 4]).unwrap();
        let beta = Tensor::new(vec![0.5, -2.0], &[2]).unwrap();
        let y = batchnorm2d(&x, &Tensor::zeros(&[2]), &beta, &stats(2), BnMode::Train).unwrap();
        assert!(y.data()[..8].iter().all(|&v| v == 0.5));
        assert!(y.data()[8..].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn running_stats_update_and_eval() {
        let x = Tensor::new(vec![1.0, 3.0, 5.0, 7.0], &[1, 1, 2, 2]).unwrap();
        let rs = stats(1);
        batchnorm2d(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), &rs, BnMode::Train).unwrap();
        let r = rs.borrow().clone();
        assert!((r.mean[0] - 0.4).abs() < 1e-12);
        // biased var = 5
        assert!((r.var[0] - (0.9 + 0.1 * 5.0)).abs() < 1e-12);
        let y = batchnorm2d(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), &rs, BnMode::Eval).unwrap();
        let expect = (1.0 - 0.4) / (r.var[0] + BN_EPS).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12);
        assert_eq!(rs.borrow().mean, r.mean, "eval must not touch running stats");
    }

    #[test]
    fn batchnorm_gradcheck() {
        let rs = stats(3);
        let err = check_op(&[&[2, 3, 3, 3], &[3], &[3]], 21, |t| {
            batchnorm2d(&t[0], &t[1], &t[2], &rs, BnMode::Train)
        });
        assert!(err < 1e-4, "{err}");
        let err = check_op(&[&[2, 3, 3, 3], &[3], &[3]], 22, |t| {
            batchnorm2d(&t[0], &t[1], &t[2], &rs, BnMode::Eval)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn layer_norm_gradcheck() {
        let err = check_op(&[&[3, 6], &[6], &[6]], 23, |t| layer_norm(&t[0], &t[1], &t[2]));
        assert!(err < 1e-5, "{err}");
    }
}
