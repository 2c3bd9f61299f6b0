//! Mask and class prediction from refined queries.
//!
//! The high-resolution map is `M(F(X_b) + U(X_m))`: a 1x1 projection of the
//! stride-4 backbone features plus the upsampled stride-8 mask features,
//! refined by two `[conv 3x3, ReLU]` layers. Each query's mask is the dot
//! product of its embedding with every pixel of that map.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::nn::{Conv2d, LayerNorm, Linear, ParamStore};
use crate::tensor::{bilinear_upsample2x, matmul, sigmoid, softmax_in_place, Tensor};

pub const DEFAULT_SCORE_FLOOR: f64 = 0.05;

pub struct MaskHead {
    pub feat_proj: Conv2d,
    pub refine: [Conv2d; 2],
    pub embed: Linear,
    pub class_head: Linear,
    /// Applied to the last query state to form the final prediction.
    pub final_norm: LayerNorm,
    pub num_classes: usize,
}

impl MaskHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, backbone_channels: usize, dim: usize, num_classes: usize) -> Self {
        MaskHead {
            feat_proj: Conv2d::new(store, rng, "head.feat_proj", backbone_channels, dim, 1, 1, true),
            refine: [
                Conv2d::new(store, rng, "head.refine1", dim, dim, 3, 1, true),
                Conv2d::new(store, rng, "head.refine2", dim, dim, 3, 1, true),
            ],
            embed: Linear::new(store, rng, "head.embed", dim, dim, 1.0),
            class_head: Linear::new(store, rng, "head.class", dim, num_classes + 1, 1.0),
            final_norm: LayerNorm::new(store, "head.final_norm", dim),
            num_classes,
        }
    }

    /// `M(F(x_b) + U(x_m))`, shape `[B, D, H/4, W/4]`.
    pub fn fuse_features(&self, store: &ParamStore, x_b: &Tensor, x_m: &Tensor) -> Result<Tensor> {
        let up = bilinear_upsample2x(x_m)?;
        let proj = self.feat_proj.forward(store, x_b)?;
        if proj.shape() != up.shape() {
            return Err(Error::shape(
                "predict_masks",
                format!("projected backbone map {:?} vs upsampled mask features {:?}", proj.shape(), up.shape()),
            ));
        }
        let y = self.refine[0].forward(store, &proj.add(&up)?)?.relu();
        Ok(self.refine[1].forward(store, &y)?.relu())
    }

    /// Mask logits `[B, N, H/4, W/4]` for one query state `[B, N, D]`.
    pub fn predict_masks(&self, store: &ParamStore, state: &Tensor, fused: &Tensor) -> Result<Tensor> {
        mask_logits(&self.embed.forward(store, state)?, fused)
    }

    /// Class logits `[B, N, K + 1]`; the last index is "no object".
    pub fn classify(&self, store: &ParamStore, state: &Tensor) -> Result<Tensor> {
        self.class_head.forward(store, state)
    }
}

/// `logits[b, n, p] = <q_c[b, n], fused[b, :, p]>`.
pub fn mask_logits(q_c: &Tensor, fused: &Tensor) -> Result<Tensor> {
    let (&[b, n, d], &[fb, fd, h, w]) = (q_c.shape(), fused.shape()) else {
        return Err(Error::shape(
            "mask_logits",
            format!("expected [B, N, D] and [B, D, H, W], got {:?} and {:?}", q_c.shape(), fused.shape()),
        ));
    };
    if (b, d) != (fb, fd) {
        return Err(Error::shape("mask_logits", format!("{:?} vs {:?}", q_c.shape(), fused.shape())));
    }
    matmul(q_c, &fused.reshape(&[b, d, h * w])?)?.reshape(&[b, n, h, w])
}

/// Detached per-image prediction.
#[derive(Debug, Clone)]
pub struct InstancePrediction {
    pub num_queries: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// `[N, H, W]` row-major.
    pub mask_logits: Vec<f64>,
    /// `[N, K + 1]`.
    pub class_logits: Vec<f64>,
}

/// One surviving query after postprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub query: usize,
    pub class_id: usize,
    pub score: f64,
    pub mask: BinaryMask,
}

/// Confidence pieces of one query: class confidence `c`, maskness `p` and
/// the rescored `c * p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryScore {
    pub class_id: usize,
    pub is_no_object: bool,
    pub class_conf: f64,
    pub maskness: f64,
    pub score: f64,
}

/// `c` is the largest real-class probability, `p` the mean mask
/// probability over pixels above 0.5 (0 when none are).
pub fn rescore(class_probs: &[f64], mask_probs: &[f64]) -> QueryScore {
    let k = class_probs.len() - 1;
    let (class_id, class_conf) = class_probs[..k]
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
    let (sum, count) = mask_probs
        .iter()
        .filter(|&&p| p > 0.5)
        .fold((0.0, 0usize), |(s, c), &p| (s + p, c + 1));
    let maskness = if count == 0 { 0.0 } else { sum / count as f64 };
    let argmax = class_probs
        .iter()
        .enumerate()
        .fold(0, |best, (i, &p)| if p > class_probs[best] { i } else { best });
    QueryScore {
        class_id,
        is_no_object: argmax == k,
        class_conf,
        maskness,
        score: class_conf * maskness,
    }
}

impl InstancePrediction {
    /// Splits batched head outputs into per-image predictions.
    pub fn from_batch(mask_logits: &Tensor, class_logits: &Tensor) -> Result<Vec<InstancePrediction>> {
        let (&[b, n, h, w], &[cb, cn, k1]) = (mask_logits.shape(), class_logits.shape()) else {
            return Err(Error::shape("InstancePrediction", "expected [B, N, H, W] and [B, N, K + 1]"));
        };
        if (b, n) != (cb, cn) || k1 < 2 {
            return Err(Error::shape(
                "InstancePrediction",
                format!("{:?} vs {:?}", mask_logits.shape(), class_logits.shape()),
            ));
        }
        Ok((0..b)
            .map(|i| InstancePrediction {
                num_queries: n,
                num_classes: k1 - 1,
                height: h,
                width: w,
                mask_logits: mask_logits.data()[i * n * h * w..(i + 1) * n * h * w].to_vec(),
                class_logits: class_logits.data()[i * n * k1..(i + 1) * n * k1].to_vec(),
            })
            .collect())
    }

    pub fn class_probs(&self, query: usize) -> Vec<f64> {
        let k1 = self.num_classes + 1;
        let mut p = self.class_logits[query * k1..(query + 1) * k1].to_vec();
        softmax_in_place(&mut p);
        p
    }

    pub fn mask_probs(&self, query: usize) -> Vec<f64> {
        let s = self.height * self.width;
        self.mask_logits[query * s..(query + 1) * s].iter().map(|&v| sigmoid(v)).collect()
    }

    pub fn scores(&self) -> Vec<QueryScore> {
        (0..self.num_queries).map(|q| rescore(&self.class_probs(q), &self.mask_probs(q))).collect()
    }

    /// Drops "no object" queries and scores below `score_floor`, binarizes
    /// at probability 0.5, upsamples to `out_h x out_w` (nearest) and sorts
    /// by score, descending, ties by query index.
    pub fn postprocess(&self, out_h: usize, out_w: usize, score_floor: f64) -> Vec<Instance> {
        let s = self.height * self.width;
        let mut out: Vec<Instance> = self
            .scores()
            .into_iter()
            .enumerate()
            .filter(|(_, sc)| !sc.is_no_object && sc.score >= score_floor)
            .map(|(q, sc)| {
                let logits = &self.mask_logits[q * s..(q + 1) * s];
                let mask = BinaryMask::new(self.height, self.width, logits.iter().map(|&v| v > 0.0).collect())
                    .expect("mask size")
                    .resize_nearest(out_h, out_w);
                Instance { query: q, class_id: sc.class_id, score: sc.score, mask }
            })
            .collect();
        out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.query.cmp(&b.query)));
        out
    }
}
