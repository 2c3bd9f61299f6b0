use std::collections::BTreeSet;

use iaunet::checkpoint::Checkpoint;
use iaunet::data::{generate_dataset, RgbImage, SceneSpec};
use iaunet::gradcheck::{check_model, GradcheckOptions};
use iaunet::model::{DeepSupervision, Iaunet, ModelConfig, MASK_STRIDE};
use iaunet::tensor::BnMode;

fn images(count: usize) -> Vec<RgbImage> {
    let spec = SceneSpec { seed: 4, height: 32, width: 32, min_axis: 4.0, max_axis: 7.0, max_instances: 3, ..Default::default() };
    generate_dataset(&spec, count).unwrap().into_iter().map(|s| s.image).collect()
}

fn batch(imgs: &[RgbImage]) -> iaunet::Tensor {
    RgbImage::batch(&imgs.iter().collect::<Vec<_>>()).unwrap()
}

#[test]
fn supervision_points_per_mode() {
    let x = batch(&images(1));
    for (blocks, mode, expected) in [
        (3, DeepSupervision::PerBlock, 10),
        (3, DeepSupervision::PerLayer, 4),
        (3, DeepSupervision::Off, 1),
        (1, DeepSupervision::PerBlock, 4),
        (1, DeepSupervision::Off, 1),
    ] {
        let cfg = ModelConfig { blocks_per_layer: blocks, deep_supervision: mode, ..ModelConfig::tiny() };
        let out = Iaunet::new(cfg, 0).unwrap().forward(&x, BnMode::Train).unwrap();
        assert_eq!(out.points.len(), expected, "{blocks} blocks, {mode:?}");
        assert_eq!(out.num_states, 3 * blocks);
    }
}

#[test]
fn output_shapes() {
    let cfg = ModelConfig { num_classes: 2, ..ModelConfig::tiny() };
    let model = Iaunet::new(cfg.clone(), 1).unwrap();
    let out = model.forward(&batch(&images(2)), BnMode::Train).unwrap();
    for p in &out.points {
        assert_eq!(p.mask_logits.shape(), &[2, cfg.num_queries, 32 / MASK_STRIDE, 32 / MASK_STRIDE]);
        assert_eq!(p.class_logits.shape(), &[2, cfg.num_queries, cfg.num_classes + 1]);
    }
}

#[test]
fn eval_predictions_do_not_depend_on_batch_mates() {
    let imgs = images(3);
    let model = Iaunet::new(ModelConfig::tiny(), 2).unwrap();
    let together = model.predict(&batch(&imgs)).unwrap();
    for (i, img) in imgs.iter().enumerate() {
        let alone = model.predict(&batch(std::slice::from_ref(img))).unwrap().remove(0);
        let worst = alone.mask_logits.iter().zip(&together[i].mask_logits).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(worst < 1e-12, "image {i}: {worst}");
    }
}

#[test]
fn restored_checkpoint_predicts_identically() {
    let model = Iaunet::new(ModelConfig { use_se: false, ..ModelConfig::tiny() }, 8).unwrap();
    let x = batch(&images(1));
    let back = Checkpoint::from_bytes(&Checkpoint::capture(&model, 3).to_bytes()).unwrap().into_model().unwrap();
    let (a, b) = (model.predict(&x).unwrap(), back.predict(&x).unwrap());
    assert_eq!(a[0].mask_logits, b[0].mask_logits);
    assert_eq!(a[0].class_logits, b[0].class_logits);
}

#[test]
fn gradcheck_lists_every_group_once() {
    let cfg = ModelConfig::tiny();
    let groups = check_model(&cfg, &GradcheckOptions { samples_per_tensor: 1, batch: 2, ..Default::default() }).unwrap();
    let names: Vec<&str> = groups.iter().map(|g| g.name.as_str()).collect();
    let unique: BTreeSet<&str> = names.iter().copied().collect();
    assert_eq!(unique.len(), names.len(), "{names:?}");
    let model = Iaunet::new(cfg, 0).unwrap();
    let expected: BTreeSet<String> = model.store.params().iter().map(|p| p.group().to_owned()).collect();
    assert_eq!(unique, expected.iter().map(String::as_str).collect());
    assert!(groups.iter().all(|g| g.entries > 0));
}
