//! Scores hand-built detections with mask AP.
//!
//! `cargo run --example evaluate`

use iaunet::mask::BinaryMask;
use iaunet::metrics::{evaluate, mask_iou, Detection, GroundTruth, ImageEval};

fn rect(y0: usize, y1: usize, x0: usize, x1: usize) -> BinaryMask {
    BinaryMask::from_fn(40, 40, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x))
}

fn main() -> iaunet::Result<()> {
    let gt = [rect(0, 10, 0, 10), rect(20, 30, 20, 30), rect(0, 8, 30, 38)];
    let dets = [
        (0.95, rect(0, 10, 0, 10)),  // exact
        (0.80, rect(20, 30, 22, 32)), // shifted by two columns
        (0.40, rect(30, 40, 0, 10)),  // false positive
    ];
    for (score, m) in &dets {
        let best = gt.iter().map(|g| mask_iou(m, g)).collect::<iaunet::Result<Vec<_>>>()?;
        println!("score {score:.2}  IoU with each GT {best:.3?}");
    }
    let image = ImageEval {
        image_id: "demo".into(),
        detections: dets.iter().map(|(s, m)| Detection { class_id: 0, score: *s, mask: m.clone() }).collect(),
        ground_truth: gt.iter().map(|m| GroundTruth { class_id: 0, mask: m.clone() }).collect(),
    };
    let r = evaluate(&[image]);
    println!("{}", serde_json::to_string_pretty(&r).expect("serializes"));
    Ok(())
}
