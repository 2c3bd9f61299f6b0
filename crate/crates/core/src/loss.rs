//! Set-prediction loss: per-image Hungarian matching followed by weighted
//! class, dice and BCE terms, summed over supervision points.
//!
//! Row-wise losses take a coefficient per row so that "mean over matched
//! pairs of one image, then mean over images" is a single weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::matching::{hungarian, MatchAssignment};
use crate::tensor::gradcheck::frozen_branch;
use crate::tensor::{sigmoid, softmax_in_place, Tensor};

pub const DICE_EPS: f64 = 1.0;

/// Coefficients shared by the matching cost and the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub dice: f64,
    pub bce: f64,
    /// Class weight of "no object" in the cross entropy.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls: 1.0, dice: 2.0, bce: 5.0, no_object: 0.1 }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable `-[g ln s(x) + (1 - g) ln(1 - s(x))]`.
pub fn bce_with_logit(x: f64, g: f64) -> f64 {
    softplus(x) - x * g
}

fn dice_value(p: &[f64], g: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for ((p, g), w) in p.iter().zip(g).zip(w) {
        inter += w * p * g;
        sp += w * p;
        sg += w * g;
    }
    (inter, sp, sg)
}

fn check_rows(op: &'static str, x: &Tensor, len: usize, coeffs: &[f64]) -> Result<(usize, usize)> {
    let &[rows, cols] = x.shape() else {
        return Err(Error::shape(op, format!("expected [R, P], got {:?}", x.shape())));
    };
    if len != rows * cols || coeffs.len() != rows {
        return Err(Error::shape(op, format!("targets/weights do not match {:?}", x.shape())));
    }
    Ok((rows, cols))
}

/// `sum_r coeff[r] * (1 - (2 sum w p g + eps) / (sum w p + sum w g + eps))`
/// for probabilities `probs: [R, P]`, with per-pixel weights `valid`.
pub fn dice_loss_rows(probs: &Tensor, gt: &[f64], valid: &[f64], coeffs: &[f64]) -> Result<Tensor> {
    let (rows, cols) = check_rows("dice_loss", probs, gt.len(), coeffs)?;
    if valid.len() != gt.len() {
        return Err(Error::shape("dice_loss", "validity mask size"));
    }
    let mut total = 0.0;
    let mut parts = Vec::with_capacity(rows);
    for r in 0..rows {
        let s = r * cols..(r + 1) * cols;
        let (i, sp, sg) = dice_value(&probs.data()[s.clone()], &gt[s.clone()], &valid[s]);
        let num = 2.0 * i + DICE_EPS;
        let den = sp + sg + DICE_EPS;
        total += coeffs[r] * (1.0 - num / den);
        parts.push((num, den));
    }
    let (gt, valid, coeffs) = (gt.to_vec(), valid.to_vec(), coeffs.to_vec());
    Ok(Tensor::from_op(
        "dice_loss",
        vec![total],
        vec![],
        vec![probs.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; rows * cols];
            for (r, &(num, den)) in parts.iter().enumerate() {
                let c = g[0] * coeffs[r];
                for k in r * cols..(r + 1) * cols {
                    // d/dp of -num/den
                    gx[k] = -c * valid[k] * (2.0 * gt[k] * den - num) / (den * den);
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// `sum_r coeff[r] * mean_valid(bce(logit, g))` for `logits: [R, P]`.
pub fn bce_loss_rows(logits: &Tensor, gt: &[f64], valid: &[f64], coeffs: &[f64]) -> Result<Tensor> {
    let (rows, cols) = check_rows("bce_loss", logits, gt.len(), coeffs)?;
    if valid.len() != gt.len() {
        return Err(Error::shape("bce_loss", "validity mask size"));
    }
    let x = logits.data();
    let mut total = 0.0;
    let mut scale = Vec::with_capacity(rows);
    for r in 0..rows {
        let s = r * cols..(r + 1) * cols;
        let wsum: f64 = valid[s.clone()].iter().sum();
        let k = if wsum > 0.0 { coeffs[r] / wsum } else { 0.0 };
        let row: f64 = s.map(|i| valid[i] * bce_with_logit(x[i], gt[i])).sum();
        total += k * row;
        scale.push(k);
    }
    let (xt, gt, valid) = (logits.clone(), gt.to_vec(), valid.to_vec());
    Ok(Tensor::from_op(
        "bce_loss",
        vec![total],
        vec![],
        vec![logits.clone()],
        Box::new(move |g| {
            let x = xt.data();
            let gx = (0..rows * cols)
                .map(|i| g[0] * scale[i / cols] * valid[i] * (sigmoid(x[i]) - gt[i]))
                .collect();
            vec![Some(gx)]
        }),
    ))
}

/// `sum_r coeff[r] * class_weight[t_r] * CE(logits[r], t_r)`.
pub fn cross_entropy_rows(logits: &Tensor, targets: &[usize], class_weights: &[f64], coeffs: &[f64]) -> Result<Tensor> {
    let &[rows, k] = logits.shape() else {
        return Err(Error::shape("cls_loss", format!("expected [R, K+1], got {:?}", logits.shape())));
    };
    if targets.len() != rows || coeffs.len() != rows || class_weights.len() != k {
        return Err(Error::shape("cls_loss", "targets/weights do not match logits"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::shape("cls_loss", format!("target class {t} out of range for {k} logits")));
    }
    let mut probs = logits.data().to_vec();
    let mut total = 0.0;
    for (r, row) in probs.chunks_mut(k).enumerate() {
        let raw = &logits.data()[r * k..(r + 1) * k];
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + raw.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += coeffs[r] * class_weights[targets[r]] * (lse - raw[targets[r]]);
        softmax_in_place(row);
    }
    let (targets, class_weights, coeffs) = (targets.to_vec(), class_weights.to_vec(), coeffs.to_vec());
    Ok(Tensor::from_op(
        "cls_loss",
        vec![total],
        vec![],
        vec![logits.clone()],
        Box::new(move |g| {
            let mut gx = probs.clone();
            for (r, row) in gx.chunks_mut(k).enumerate() {
                row[targets[r]] -= 1.0;
                let c = g[0] * coeffs[r] * class_weights[targets[r]];
                row.iter_mut().for_each(|v| *v *= c);
            }
            vec![Some(gx)]
        }),
    ))
}

/// Dice loss of one probability map against a binary target.
pub fn dice_loss(pred_probs: &Tensor, gt: &[f64]) -> Result<Tensor> {
    let p = pred_probs.reshape(&[1, pred_probs.numel()])?;
    dice_loss_rows(&p, gt, &vec![1.0; gt.len()], &[1.0])
}

/// Mean binary cross entropy of one logit map.
pub fn bce_loss(pred_logits: &Tensor, gt: &[f64]) -> Result<Tensor> {
    let x = pred_logits.reshape(&[1, pred_logits.numel()])?;
    bce_loss_rows(&x, gt, &vec![1.0; gt.len()], &[1.0])
}

/// Weighted-mean cross entropy over queries; `targets[n] == K` is
/// "no object" and carries weight `no_object`.
pub fn cls_loss(class_logits: &Tensor, targets: &[usize], no_object: f64) -> Result<Tensor> {
    let k1 = *class_logits.shape().last().unwrap_or(&0);
    let weights = class_weights(k1, no_object);
    let wsum: f64 = targets.iter().map(|&t| weights.get(t).copied().unwrap_or(0.0)).sum();
    let coeffs = vec![1.0 / wsum; targets.len()];
    cross_entropy_rows(class_logits, targets, &weights, &coeffs)
}

fn class_weights(k1: usize, no_object: f64) -> Vec<f64> {
    let mut w = vec![1.0; k1];
    if let Some(last) = w.last_mut() {
        *last = no_object;
    }
    w
}

/// Ground truth of one image at mask-logit resolution.
#[derive(Debug, Clone)]
pub struct ImageTarget {
    pub classes: Vec<usize>,
    pub masks: Vec<BinaryMask>,
    /// Per-pixel weight (1 inside the image, 0 on padding), row-major.
    pub valid: Vec<f64>,
}

impl ImageTarget {
    /// Downsamples full-resolution masks and validity by `factor` with the
    /// majority rule.
    pub fn from_full_res(classes: Vec<usize>, masks: &[BinaryMask], valid: &BinaryMask, factor: usize) -> Result<Self> {
        let masks = masks.iter().map(|m| m.downsample_area(factor)).collect::<Result<Vec<_>>>()?;
        let valid = valid.downsample_area(factor)?.data.iter().map(|&v| f64::from(u8::from(v))).collect();
        Ok(ImageTarget { classes, masks, valid })
    }
}

/// Detached matching cost `[N, M]` for one image:
/// `-cls * p_n(class_k) + dice * Dice(n, k) + bce * BCE(n, k)`.
pub fn matching_cost(
    mask_logits: &[f64],
    class_logits: &[f64],
    num_queries: usize,
    target: &ImageTarget,
    weights: &LossWeights,
) -> Vec<Vec<f64>> {
    let n = num_queries;
    let p = mask_logits.len() / n.max(1);
    let k1 = class_logits.len() / n.max(1);
    let valid = &target.valid;
    let wsum: f64 = valid.iter().sum();
    let gts: Vec<Vec<f64>> = target.masks.iter().map(|m| m.data.iter().map(|&b| f64::from(u8::from(b))).collect()).collect();
    (0..n)
        .map(|q| {
            let x = &mask_logits[q * p..(q + 1) * p];
            let probs: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
            let mut cp = class_logits[q * k1..(q + 1) * k1].to_vec();
            softmax_in_place(&mut cp);
            let sp_sum: f64 = x.iter().zip(valid).map(|(&v, w)| w * softplus(v)).sum();
            gts.iter()
                .zip(&target.classes)
                .map(|(g, &cls)| {
                    let (i, sp, sg) = dice_value(&probs, g, valid);
                    let dice = 1.0 - (2.0 * i + DICE_EPS) / (sp + sg + DICE_EPS);
                    let xg: f64 = x.iter().zip(g).zip(valid).map(|((v, g), w)| w * v * g).sum();
                    let bce = if wsum > 0.0 { (sp_sum - xg) / wsum } else { 0.0 };
                    -weights.cls * cp[cls] + weights.dice * dice + weights.bce * bce
                })
                .collect()
        })
        .collect()
}

/// Predictions at one supervision point.
#[derive(Debug, Clone)]
pub struct SupervisionPoint {
    /// `[B, N, h, w]`
    pub mask_logits: Tensor,
    /// `[B, N, K + 1]`
    pub class_logits: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Unweighted class term, summed over supervision points.
    pub cls: f64,
    pub dice: f64,
    pub bce: f64,
    /// `cls * w.cls + dice * w.dice + bce * w.bce`.
    pub total: f64,
    pub per_supervision_point: Vec<f64>,
}

/// Loss of one supervision point and the matches it used.
pub fn point_loss(
    point: &SupervisionPoint,
    targets: &[ImageTarget],
    weights: &LossWeights,
) -> Result<(Tensor, [f64; 3], Vec<MatchAssignment>)> {
    let &[b, n, h, w] = point.mask_logits.shape() else {
        return Err(Error::shape("total_loss", "mask logits must be [B, N, h, w]"));
    };
    let k1 = point.class_logits.shape()[2];
    if targets.len() != b {
        return Err(Error::shape("total_loss", format!("{} targets for batch {b}", targets.len())));
    }
    let p = h * w;
    let mut cls_targets = vec![k1 - 1; b * n];
    let mut cls_coeffs = vec![0.0; b * n];
    let class_w = class_weights(k1, weights.no_object);
    let mut rows = Vec::new();
    let (mut gt, mut valid, mut mask_coeffs) = (Vec::new(), Vec::new(), Vec::new());
    let mut matches = Vec::with_capacity(b);
    for (bi, t) in targets.iter().enumerate() {
        if t.valid.len() != p || t.masks.iter().any(|m| m.data.len() != p) {
            return Err(Error::shape("total_loss", format!("image {bi}: targets not at {h}x{w}")));
        }
        if t.classes.iter().any(|&c| c + 1 >= k1) {
            return Err(Error::shape("total_loss", format!("image {bi}: class id out of range")));
        }
        let assign = if t.masks.is_empty() {
            MatchAssignment { pairs: vec![], unmatched_predictions: (0..n).collect() }
        } else {
            let ml = &point.mask_logits.data()[bi * n * p..(bi + 1) * n * p];
            let cl = &point.class_logits.data()[bi * n * k1..(bi + 1) * n * k1];
            let decide = || Ok(hungarian(&matching_cost(ml, cl, n, t, weights))?.pairs.iter().flat_map(|&(q, g)| [q, g]).collect());
            match frozen_branch(decide)? {
                Some(flat) => MatchAssignment::from_pairs(flat.chunks(2).map(|c| (c[0], c[1])).collect(), n),
                None => hungarian(&matching_cost(ml, cl, n, t, weights))?,
            }
        };
        for &(q, g) in &assign.pairs {
            cls_targets[bi * n + q] = t.classes[g];
            rows.push(bi * n + q);
            gt.extend(t.masks[g].data.iter().map(|&v| f64::from(u8::from(v))));
            valid.extend_from_slice(&t.valid);
            mask_coeffs.push(1.0 / (assign.pairs.len() * b) as f64);
        }
        let wsum: f64 = (0..n).map(|q| class_w[cls_targets[bi * n + q]]).sum();
        for q in 0..n {
            cls_coeffs[bi * n + q] = 1.0 / (wsum * b as f64);
        }
        matches.push(assign);
    }
    let cls = cross_entropy_rows(&point.class_logits.reshape(&[b * n, k1])?, &cls_targets, &class_w, &cls_coeffs)?;
    let mut total = cls.scale(weights.cls);
    let (mut dice_v, mut bce_v) = (0.0, 0.0);
    if !rows.is_empty() {
        let matched = point.mask_logits.reshape(&[b * n, p])?.index_select0(&rows)?;
        let dice = dice_loss_rows(&matched.sigmoid(), &gt, &valid, &mask_coeffs)?;
        let bce = bce_loss_rows(&matched, &gt, &valid, &mask_coeffs)?;
        dice_v = dice.item();
        bce_v = bce.item();
        total = total.add(&dice.scale(weights.dice))?.add(&bce.scale(weights.bce))?;
    }
    Ok((total, [cls.item(), dice_v, bce_v], matches))
}

/// Sum of [`point_loss`] over all supervision points.
pub fn total_loss(points: &[SupervisionPoint], targets: &[ImageTarget], weights: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    if points.is_empty() {
        return Err(Error::Contract("no supervision points".into()));
    }
    let mut total: Option<Tensor> = None;
    let mut br = LossBreakdown::default();
    for pt in points {
        let (t, [c, d, b], _) = point_loss(pt, targets, weights)?;
        br.cls += c;
        br.dice += d;
        br.bce += b;
        br.per_supervision_point.push(t.item());
        total = Some(match total {
            None => t,
            Some(acc) => acc.add(&t)?,
        });
    }
    let total = total.expect("non-empty");
    br.total = total.item();
    if !br.total.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite: {br:?}")));
    }
    Ok((total, br))
}
