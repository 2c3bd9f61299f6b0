use iaunet::config::RunConfig;
use iaunet::loss::{total_loss, ImageTarget, LossWeights, SupervisionPoint};
use iaunet::mask::BinaryMask;
use iaunet::mask_head::rescore;
use iaunet::matching::hungarian;
use iaunet::metrics::{ap_at_threshold, evaluate, iou_thresholds, mask_iou, Detection, EvalResult, GroundTruth, ImageEval};
use iaunet::model::DeepSupervision;
use iaunet::transformer::UpdateOrder;
use iaunet::Tensor;
use proptest::prelude::*;

const SIDE: usize = 12;

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |d| BinaryMask::new(h, w, d).unwrap())
}

fn rect_strategy() -> impl Strategy<Value = BinaryMask> {
    (0..SIDE - 1, 0..SIDE - 1, 1..6usize, 1..6usize).prop_map(|(y, x, h, w)| {
        BinaryMask::from_fn(SIDE, SIDE, |r, c| (y..y + h).contains(&r) && (x..x + w).contains(&c))
    })
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Random head outputs and ground truth for one image at 6x6 logit
/// resolution.
#[derive(Debug, Clone)]
struct Scene {
    n: usize,
    k1: usize,
    mask_logits: Vec<Vec<f64>>,
    class_logits: Vec<f64>,
    classes: Vec<usize>,
    masks: Vec<BinaryMask>,
}

fn scene_strategy() -> impl Strategy<Value = Scene> {
    (2..6usize, 1..3usize).prop_flat_map(|(n, k)| {
        let points = prop::collection::vec(prop::collection::vec(-4.0..4.0f64, n * 36), 1..4);
        let cls = prop::collection::vec(-3.0..3.0f64, n * (k + 1));
        let gt = prop::collection::vec((0..k, mask_strategy(6, 6)), 1..=n);
        (points, cls, gt).prop_map(move |(mask_logits, class_logits, gt)| Scene {
            n,
            k1: k + 1,
            mask_logits,
            class_logits,
            classes: gt.iter().map(|g| g.0).collect(),
            masks: gt.into_iter().map(|g| g.1).collect(),
        })
    })
}

fn scene_loss(s: &Scene, order: &[usize]) -> f64 {
    let points: Vec<SupervisionPoint> = s
        .mask_logits
        .iter()
        .map(|m| SupervisionPoint {
            mask_logits: Tensor::new(m.clone(), &[1, s.n, 6, 6]).unwrap(),
            class_logits: Tensor::new(s.class_logits.clone(), &[1, s.n, s.k1]).unwrap(),
        })
        .collect();
    let target = ImageTarget {
        classes: order.iter().map(|&i| s.classes[i]).collect(),
        masks: order.iter().map(|&i| s.masks[i].clone()).collect(),
        valid: vec![1.0; 36],
    };
    total_loss(&points, &[target], &LossWeights::default()).unwrap().0.item()
}

/// Fisher-Yates driven by a 64-bit LCG.
fn shuffle<T>(v: &mut [T], seed: u64) {
    let mut state = seed;
    for i in (1..v.len()).rev() {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        v.swap(i, (state >> 33) as usize % (i + 1));
    }
}

fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], g: usize, used: &mut [bool], acc: f64) -> f64 {
        if g == cost[0].len() {
            return acc;
        }
        let mut best = f64::INFINITY;
        for p in 0..cost.len() {
            if !used[p] {
                used[p] = true;
                best = best.min(go(cost, g + 1, used, acc + cost[p][g]));
                used[p] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost.len()], 0.0)
}

fn image_strategy(max_det: usize) -> impl Strategy<Value = ImageEval> {
    let dets = prop::collection::vec((0..2usize, 0.0..1.0f64, rect_strategy()), 0..max_det);
    let gts = prop::collection::vec((0..2usize, rect_strategy()), 0..5);
    (dets, gts).prop_map(|(d, g)| ImageEval {
        image_id: String::new(),
        detections: d.into_iter().map(|(class_id, score, mask)| Detection { class_id, score, mask }).collect(),
        ground_truth: g.into_iter().map(|(class_id, mask)| GroundTruth { class_id, mask }).collect(),
    })
}

fn images_strategy() -> impl Strategy<Value = Vec<ImageEval>> {
    prop::collection::vec(image_strategy(7), 1..4).prop_map(|mut v| {
        for (i, im) in v.iter_mut().enumerate() {
            im.image_id = format!("im{i}");
        }
        v
    })
}

fn distinct_scores(images: &[ImageEval]) -> bool {
    let mut s: Vec<f64> = images.iter().flat_map(|im| im.detections.iter().map(|d| d.score)).collect();
    s.sort_by(f64::total_cmp);
    s.windows(2).all(|w| w[0] != w[1])
}

fn all_values(r: &EvalResult) -> Vec<Option<f64>> {
    [r.ap, r.ap50, r.ap75, r.ap_s, r.ap_m, r.ap_l].into_iter().chain(r.per_image.values().copied()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_ignores_ground_truth_order(s in scene_strategy(), perm_seed in any::<u64>()) {
        let m = s.masks.len();
        let mut order: Vec<usize> = (0..m).collect();
        shuffle(&mut order, perm_seed);
        let base = scene_loss(&s, &(0..m).collect::<Vec<_>>());
        let permuted = scene_loss(&s, &order);
        prop_assert!((base - permuted).abs() < 1e-9, "{base} vs {permuted}");
    }

    #[test]
    fn rescored_confidence_bounded(logits in prop::collection::vec(-8.0..8.0f64, 2..5), mask in prop::collection::vec(0.0..=1.0f64, 1..40)) {
        let probs = softmax(&logits);
        let q = rescore(&probs, &mask);
        prop_assert!((0.0..=1.0).contains(&q.score));
        prop_assert!(q.score <= q.class_conf);
        prop_assert!((0.0..=1.0).contains(&q.maskness));
        prop_assert_eq!(q.is_no_object, probs[..probs.len() - 1].iter().all(|&p| p < probs[probs.len() - 1]));
    }

    #[test]
    fn hungarian_is_optimal((n, m) in (1..7usize).prop_flat_map(|n| (Just(n), 0..=n)), seed_costs in prop::collection::vec(0.0..100.0f64, 49)) {
        let cost: Vec<Vec<f64>> = (0..n).map(|p| (0..m).map(|g| seed_costs[p * 7 + g]).collect()).collect();
        let a = hungarian(&cost).unwrap();
        prop_assert_eq!(a.pairs.len(), m);
        let mut gts: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        gts.sort();
        prop_assert_eq!(gts, (0..m).collect::<Vec<_>>());
        if m > 0 {
            let best = brute_force_min(&cost);
            prop_assert!((a.total(&cost) - best).abs() <= 1e-9 * best.abs().max(1.0));
        }
    }

    #[test]
    fn evaluation_ignores_prediction_order(images in images_strategy(), seed in any::<u64>()) {
        prop_assume!(distinct_scores(&images));
        let base = evaluate(&images);
        let mut shuffled = images.clone();
        for (i, im) in shuffled.iter_mut().enumerate() {
            shuffle(&mut im.detections, seed.wrapping_add(i as u64));
        }
        prop_assert_eq!(evaluate(&shuffled), base);
    }

    #[test]
    fn duplicate_detection_never_helps(images in images_strategy(), which in any::<prop::sample::Index>()) {
        // precondition: no detection reaches 0.5 IoU with two ground truths,
        // otherwise a duplicate can legitimately recover a second instance
        let ambiguous = images.iter().any(|im| im.detections.iter().any(|d| {
            im.ground_truth.iter().filter(|g| g.class_id == d.class_id && mask_iou(&d.mask, &g.mask).unwrap() >= 0.5).count() > 1
        }));
        prop_assume!(!ambiguous);
        let candidates: Vec<(usize, usize)> = images
            .iter()
            .enumerate()
            .flat_map(|(i, im)| (0..im.detections.len()).map(move |d| (i, d)))
            .collect();
        prop_assume!(!candidates.is_empty());
        let (i, d) = candidates[which.index(candidates.len())];
        let mut dup = images.clone();
        let copy = dup[i].detections[d].clone();
        dup[i].detections.push(copy);
        let (before, after) = (all_values(&evaluate(&images)), all_values(&evaluate(&dup)));
        for (b, a) in before.iter().zip(&after) {
            prop_assert_eq!(b.is_some(), a.is_some());
            if let (Some(b), Some(a)) = (b, a) {
                prop_assert!(a <= b, "{before:?} -> {after:?}");
            }
        }
    }

    #[test]
    fn ap_non_increasing_in_threshold(images in images_strategy()) {
        let aps: Vec<Option<f64>> = iou_thresholds().into_iter().map(|t| ap_at_threshold(&images, t)).collect();
        for w in aps.windows(2) {
            if let (Some(lo), Some(hi)) = (w[0], w[1]) {
                prop_assert!(hi <= lo, "{aps:?}");
            }
        }
    }

    #[test]
    fn rle_round_trip(mask in (1..9usize, 1..9usize).prop_flat_map(|(h, w)| mask_strategy(h, w))) {
        let rle = mask.to_rle();
        prop_assert_eq!(BinaryMask::from_rle(mask.height, mask.width, &rle).unwrap(), mask);
    }

    #[test]
    fn config_round_trips(
        seed in any::<u64>(),
        lr in 1e-6..1.0f64,
        use_se in any::<bool>(),
        coord in any::<bool>(),
        blocks in 1..4usize,
        cyclic in any::<bool>(),
        ds in 0..3usize,
        queries in 1..32usize,
        dice in 0.0..10.0f64,
    ) {
        let mut c = RunConfig { seed, ..Default::default() };
        c.optim.lr = lr;
        c.model.use_se = use_se;
        c.model.use_coord_conv = coord;
        c.model.blocks_per_layer = blocks;
        c.model.update_order = if cyclic { UpdateOrder::Cyclic } else { UpdateOrder::Sequential };
        c.model.deep_supervision = [DeepSupervision::PerBlock, DeepSupervision::PerLayer, DeepSupervision::Off][ds];
        c.model.num_queries = queries;
        c.loss.dice = dice;
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_json(), c.to_json());
    }
}
