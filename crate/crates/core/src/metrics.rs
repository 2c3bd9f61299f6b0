//! Mask IoU and COCO-protocol average precision.
//!
//! Per class, area range and IoU threshold, detections (best score first,
//! at most 100 per image) are matched greedily to the best-IoU unmatched
//! ground truth of the same image. Ground truth outside the area range is
//! ignored: a detection matched to it, or an unmatched detection outside the
//! range, counts neither as a true nor a false positive. Precision is made
//! monotone and sampled at 101 recall points. Classes without ground truth
//! in a stratum are excluded from that stratum's mean.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::mask_head::Instance;

pub const MAX_DETECTIONS: usize = 100;
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;
const AREA_MAX: f64 = 1e10;

/// `|a & b| / |a | b|`, 0 for two empty masks.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn recall_points() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval {
    pub image_id: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

/// Metric values; `None` where a stratum has no ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub per_image: BTreeMap<String, Option<f64>>,
}

/// Matching outcome of one image for one class and area range at every
/// threshold.
struct Matched {
    /// Scores of the kept detections, best first.
    scores: Vec<f64>,
    /// `[threshold][detection]`: matched to a ground truth
    tp: Vec<Vec<bool>>,
    /// `[threshold][detection]`: excluded from the curve
    ignored: Vec<Vec<bool>>,
    /// Ground truths inside the area range.
    num_gt: usize,
}

fn match_image(dets: &[&Detection], gts: &[&GroundTruth], range: (f64, f64), thresholds: &[f64]) -> Matched {
    let outside = |area: usize| (area as f64) < range.0 || (area as f64) > range.1;
    // ground truth order: in-range first, stable
    let mut gt_order: Vec<usize> = (0..gts.len()).collect();
    gt_order.sort_by_key(|&g| outside(gts[g].mask.area()));
    let gt_ignored: Vec<bool> = gt_order.iter().map(|&g| outside(gts[g].mask.area())).collect();

    let mut det_order: Vec<usize> = (0..dets.len()).collect();
    det_order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    det_order.truncate(MAX_DETECTIONS);

    let ious: Vec<Vec<f64>> = det_order
        .iter()
        .map(|&d| gt_order.iter().map(|&g| mask_iou(&dets[d].mask, &gts[g].mask).expect("mask sizes")).collect())
        .collect();

    let nd = det_order.len();
    let mut tp = vec![vec![false; nd]; thresholds.len()];
    let mut ignored = vec![vec![false; nd]; thresholds.len()];
    for (ti, &t) in thresholds.iter().enumerate() {
        let mut gt_taken = vec![false; gt_order.len()];
        for d in 0..nd {
            let mut best = t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for g in 0..gt_order.len() {
                if gt_taken[g] {
                    continue;
                }
                // once matched to an in-range gt, ignored ones cannot win
                if m.is_some_and(|m| !gt_ignored[m]) && gt_ignored[g] {
                    break;
                }
                if ious[d][g] < best {
                    continue;
                }
                best = ious[d][g];
                m = Some(g);
            }
            match m {
                Some(g) => {
                    gt_taken[g] = true;
                    tp[ti][d] = true;
                    ignored[ti][d] = gt_ignored[g];
                }
                None => ignored[ti][d] = outside(dets[det_order[d]].mask.area()),
            }
        }
    }
    Matched {
        scores: det_order.iter().map(|&d| dets[d].score).collect(),
        tp,
        ignored,
        num_gt: gt_ignored.iter().filter(|&&i| !i).count(),
    }
}

/// 101-point interpolated precision for one threshold, or `None` without
/// ground truth.
fn interpolated_ap(matched: &[Matched], ti: usize) -> Option<f64> {
    let num_gt: usize = matched.iter().map(|m| m.num_gt).sum();
    if num_gt == 0 {
        return None;
    }
    // stable merge by score over images in input order
    let mut all: Vec<(f64, bool, bool)> = matched
        .iter()
        .flat_map(|m| (0..m.scores.len()).map(move |d| (m.scores[d], m.tp[ti][d], m.ignored[ti][d])))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tps, mut fps) = (0.0, 0.0);
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for &(_, tp, ign) in &all {
        if ign {
            continue;
        }
        if tp {
            tps += 1.0;
        } else {
            fps += 1.0;
        }
        recall.push(tps / num_gt as f64);
        // tps + fps >= 1 here, no epsilon needed
        precision.push(tps / (tps + fps));
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let rps = recall_points();
    let total: f64 = rps
        .iter()
        .map(|&r| {
            let idx = recall.partition_point(|&v| v < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / rps.len() as f64)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean AP over classes present in the ground truth and the given
/// thresholds, for one area range.
fn stratum_ap(images: &[ImageEval], classes: &[usize], range: (f64, f64), thresholds: &[f64]) -> Option<f64> {
    let per_class_threshold = classes.iter().flat_map(|&c| {
        let matched: Vec<Matched> = images
            .iter()
            .map(|im| {
                let dets: Vec<&Detection> = im.detections.iter().filter(|d| d.class_id == c).collect();
                let gts: Vec<&GroundTruth> = im.ground_truth.iter().filter(|g| g.class_id == c).collect();
                match_image(&dets, &gts, range, thresholds)
            })
            .collect();
        (0..thresholds.len()).map(move |ti| interpolated_ap(&matched, ti)).collect::<Vec<_>>()
    });
    mean(per_class_threshold)
}

fn classes_of(images: &[ImageEval]) -> Vec<usize> {
    let mut c: Vec<usize> = images
        .iter()
        .flat_map(|im| im.ground_truth.iter().map(|g| g.class_id).chain(im.detections.iter().map(|d| d.class_id)))
        .collect();
    c.sort();
    c.dedup();
    c
}

/// AP over all areas at a single IoU threshold.
pub fn ap_at_threshold(images: &[ImageEval], threshold: f64) -> Option<f64> {
    stratum_ap(images, &classes_of(images), (0.0, AREA_MAX), &[threshold])
}

pub fn evaluate(images: &[ImageEval]) -> EvalResult {
    let classes = classes_of(images);
    let all = (0.0, AREA_MAX);
    let ts = iou_thresholds();
    let per_image = images
        .iter()
        .map(|im| {
            let one = std::slice::from_ref(im);
            (im.image_id.clone(), stratum_ap(one, &classes_of(one), all, &ts))
        })
        .collect();
    EvalResult {
        ap: stratum_ap(images, &classes, all, &ts),
        ap50: stratum_ap(images, &classes, all, &[0.5]),
        ap75: stratum_ap(images, &classes, all, &[0.75]),
        ap_s: stratum_ap(images, &classes, (0.0, SMALL_AREA), &ts),
        ap_m: stratum_ap(images, &classes, (SMALL_AREA, MEDIUM_AREA), &ts),
        ap_l: stratum_ap(images, &classes, (MEDIUM_AREA, AREA_MAX), &ts),
        per_image,
    }
}

/// One predicted instance on disk; `rle` is `[start, len, ...]` over
/// row-major pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedInstance {
    pub class_id: usize,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    pub rle: Vec<usize>,
}

/// Predictions for one image. `input_height`/`input_width` is the size the
/// model saw; larger than the image when the image was zero-padded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub instances: Vec<PredictedInstance>,
}

impl PredictionFile {
    pub fn from_instances(image_id: &str, height: usize, width: usize, input: (usize, usize), instances: &[Instance]) -> Self {
        PredictionFile {
            image_id: image_id.to_owned(),
            height,
            width,
            input_height: input.0,
            input_width: input.1,
            instances: instances
                .iter()
                .map(|i| PredictedInstance { class_id: i.class_id, score: i.score, mask_path: None, rle: i.mask.to_rle() })
                .collect(),
        }
    }

    pub fn detections(&self) -> Result<Vec<Detection>> {
        self.instances
            .iter()
            .enumerate()
            .map(|(k, i)| {
                let mask = BinaryMask::from_rle(self.height, self.width, &i.rle)
                    .map_err(|e| Error::Validation(vec![format!("{}: instance {k}: {e}", self.image_id)]))?;
                Ok(Detection { class_id: i.class_id, score: i.score, mask })
            })
            .collect()
    }
}
