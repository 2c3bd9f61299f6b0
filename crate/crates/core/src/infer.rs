//! Inference on whole images and evaluation of a model over a dataset.

use crate::data::{augment, AugmentParams, RgbImage, Sample};
use crate::error::Result;
use crate::mask::BinaryMask;
use crate::mask_head::Instance;
use crate::metrics::{evaluate, Detection, EvalResult, GroundTruth, ImageEval};
use crate::model::Iaunet;

/// Input sides must be multiples of this.
pub const SIZE_MULTIPLE: usize = 32;

/// Instances of one image, at the image's own resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrediction {
    pub instances: Vec<Instance>,
    /// Size fed to the network after bottom/right zero padding.
    pub input_height: usize,
    pub input_width: usize,
}

fn round_up(v: usize) -> usize {
    v.div_ceil(SIZE_MULTIPLE).max(1) * SIZE_MULTIPLE
}

/// Zero-pads bottom/right so both sides are multiples of [`SIZE_MULTIPLE`].
pub fn pad_to_multiple(image: &RgbImage) -> RgbImage {
    let (h, w) = (round_up(image.height), round_up(image.width));
    if (h, w) == (image.height, image.width) {
        return image.clone();
    }
    let sample = Sample {
        image: image.clone(),
        record: crate::data::AnnotationRecord {
            image_id: String::new(),
            height: image.height,
            width: image.width,
            instances: vec![],
        },
    };
    augment(&sample, AugmentParams::identity(h, w)).sample.image
}

fn crop(mask: &BinaryMask, h: usize, w: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| mask.get(y, x))
}

/// Runs the model on one image and postprocesses with `score_floor`.
pub fn predict_image(model: &Iaunet, image: &RgbImage, score_floor: f64) -> Result<ImagePrediction> {
    let input = pad_to_multiple(image);
    let pred = model.predict(&RgbImage::batch(&[&input])?)?.remove(0);
    let instances = pred
        .postprocess(input.height, input.width, score_floor)
        .into_iter()
        .map(|i| Instance { mask: crop(&i.mask, image.height, image.width), ..i })
        .collect();
    Ok(ImagePrediction { instances, input_height: input.height, input_width: input.width })
}

/// Predicts every sample and scores the result against its annotations.
pub fn evaluate_model(model: &Iaunet, samples: &[Sample], score_floor: f64) -> Result<EvalResult> {
    let images = samples
        .iter()
        .map(|s| {
            let p = predict_image(model, &s.image, score_floor)?;
            Ok(ImageEval {
                image_id: s.record.image_id.clone(),
                detections: p
                    .instances
                    .into_iter()
                    .map(|i| Detection { class_id: i.class_id, score: i.score, mask: i.mask })
                    .collect(),
                ground_truth: s
                    .record
                    .instances
                    .iter()
                    .map(|i| GroundTruth { class_id: i.class_id, mask: i.mask.clone() })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate(&images))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn padding_rounds_up_and_keeps_pixels() {
        let img = RgbImage::new(33, 20, (0..3 * 33 * 20).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let p = pad_to_multiple(&img);
        assert_eq!((p.height, p.width), (64, 32));
        assert_eq!(p.get(2, 32, 19), img.get(2, 32, 19));
        assert_eq!(p.get(1, 40, 25), 0.0);
        let same = RgbImage::filled(32, 64, 0.5);
        assert_eq!(pad_to_multiple(&same), same);
    }

    #[test]
    fn prediction_matches_image_size() {
        let model = Iaunet::new(ModelConfig::tiny(), 3).unwrap();
        let img = RgbImage::filled(40, 30, 0.4);
        let p = predict_image(&model, &img, 0.0).unwrap();
        assert_eq!((p.input_height, p.input_width), (64, 32));
        assert!(p.instances.iter().all(|i| (i.mask.height, i.mask.width) == (40, 30)));
    }
}
