//! Synthetic scenes, annotation records, augmentation and on-disk datasets.

mod augment;
mod io;
mod raster;
mod synth;

pub use augment::{augment, resize_longest_side, AugmentParams, Augmented, SCALE_RANGE};
pub use io::{
    load_dataset, read_pgm, read_ppm, save_dataset, save_sample, write_pgm, write_ppm, AnnotationFile,
    AnnotationFileInstance,
};
pub(crate) use io::{load_json, save_json};
pub use raster::{polygon_area, rasterize_polygon};
pub use synth::{generate_dataset, generate_scene, image_seed, SceneSpec};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

/// Planar RGB image with values in `[0, 1]`, layout `[3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::shape("image", format!("{} values for 3x{height}x{width}", data.len())));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        RgbImage { height, width, data: vec![value; 3 * height * width] }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Stacks images of equal size into `[B, 3, H, W]`.
    pub fn batch(images: &[&RgbImage]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Contract("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for im in images {
            if (im.height, im.width) != (h, w) {
                return Err(Error::shape("batch", format!("{}x{} vs {h}x{w}", im.height, im.width)));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::new(data, &[images.len(), 3, h, w])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedInstance {
    pub class_id: usize,
    /// `(x, y)` vertices in pixel units, origin top-left.
    pub polygon: Vec<[f64; 2]>,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<AnnotatedInstance>,
}

/// One image with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub record: AnnotationRecord,
}
