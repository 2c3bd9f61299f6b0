//! Scale jitter, fixed-size crop and flips, plus longest-side resizing.
//!
//! Both operations are the same geometric map: output pixel `(y, x)` sits at
//! `(y + oy, x + ox)` of the image rescaled by `scale`, optionally mirrored.
//! Pixels falling outside the rescaled image are padding (zero, invalid).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AnnotatedInstance, AnnotationRecord, RgbImage, Sample};
use crate::mask::BinaryMask;

pub const SCALE_RANGE: (f64, f64) = (0.8, 1.5);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    /// Crop origin in the rescaled image; negative values pad.
    pub offset_y: i64,
    pub offset_x: i64,
    pub hflip: bool,
    pub vflip: bool,
    pub out_height: usize,
    pub out_width: usize,
}

impl AugmentParams {
    /// No-op parameters for an image of the given size.
    pub fn identity(height: usize, width: usize) -> Self {
        AugmentParams { scale: 1.0, offset_y: 0, offset_x: 0, hflip: false, vflip: false, out_height: height, out_width: width }
    }

    /// Uniform scale in [`SCALE_RANGE`], uniform crop offset, fair flips.
    pub fn sample(rng: &mut ChaCha8Rng, height: usize, width: usize, out_height: usize, out_width: usize) -> Self {
        let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let mut offset = |src: usize, out: usize| -> i64 {
            let scaled = (src as f64 * scale).round() as i64;
            let (lo, hi) = if scaled >= out as i64 { (0, scaled - out as i64) } else { (scaled - out as i64, 0) };
            rng.random_range(lo..=hi)
        };
        let offset_y = offset(height, out_height);
        let offset_x = offset(width, out_width);
        AugmentParams {
            scale,
            offset_y,
            offset_x,
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            out_height,
            out_width,
        }
    }
}

/// Augmented sample plus the mask of pixels that came from the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub sample: Sample,
    pub valid: BinaryMask,
}

struct Geometry {
    p: AugmentParams,
    src_h: usize,
    src_w: usize,
    scaled_h: i64,
    scaled_w: i64,
}

impl Geometry {
    fn new(p: AugmentParams, src_h: usize, src_w: usize) -> Self {
        Geometry {
            p,
            src_h,
            src_w,
            scaled_h: (src_h as f64 * p.scale).round() as i64,
            scaled_w: (src_w as f64 * p.scale).round() as i64,
        }
    }

    /// Rescaled-image coordinates of output pixel `(y, x)`, if not padding.
    fn scaled_coord(&self, y: usize, x: usize) -> Option<(i64, i64)> {
        let y = if self.p.vflip { self.p.out_height - 1 - y } else { y };
        let x = if self.p.hflip { self.p.out_width - 1 - x } else { x };
        let (sy, sx) = (y as i64 + self.p.offset_y, x as i64 + self.p.offset_x);
        (sy >= 0 && sx >= 0 && sy < self.scaled_h && sx < self.scaled_w).then_some((sy, sx))
    }

    fn ratio(&self) -> (f64, f64) {
        (self.src_h as f64 / self.scaled_h as f64, self.src_w as f64 / self.scaled_w as f64)
    }

    fn nearest(&self, sy: i64, sx: i64) -> (usize, usize) {
        let (ry, rx) = self.ratio();
        let y = (((sy as f64 + 0.5) * ry).floor() as usize).min(self.src_h - 1);
        let x = (((sx as f64 + 0.5) * rx).floor() as usize).min(self.src_w - 1);
        (y, x)
    }

    fn map_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (ry, rx) = self.ratio();
        let mut x = p[0] / rx - self.p.offset_x as f64;
        let mut y = p[1] / ry - self.p.offset_y as f64;
        if self.p.hflip {
            x = self.p.out_width as f64 - x;
        }
        if self.p.vflip {
            y = self.p.out_height as f64 - y;
        }
        [x, y]
    }
}

fn bilinear(img: &RgbImage, c: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (img.height - 1) as f64);
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
    let bot = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Applies `params`: bilinear image resampling, nearest mask resampling.
/// Instances whose mask becomes empty are dropped.
pub fn augment(sample: &Sample, params: AugmentParams) -> Augmented {
    let (img, rec) = (&sample.image, &sample.record);
    let g = Geometry::new(params, img.height, img.width);
    let (oh, ow) = (params.out_height, params.out_width);
    let (ry, rx) = g.ratio();
    let mut data = vec![0.0; 3 * oh * ow];
    let mut valid = BinaryMask::empty(oh, ow);
    let mut sources = vec![None; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let Some((sy, sx)) = g.scaled_coord(y, x) else { continue };
            valid.set(y, x, true);
            sources[y * ow + x] = Some(g.nearest(sy, sx));
            let (fy, fx) = ((sy as f64 + 0.5) * ry - 0.5, (sx as f64 + 0.5) * rx - 0.5);
            for c in 0..3 {
                data[(c * oh + y) * ow + x] = bilinear(img, c, fy, fx);
            }
        }
    }
    let instances = rec
        .instances
        .iter()
        .filter_map(|inst| {
            let mask = BinaryMask::from_fn(oh, ow, |y, x| sources[y * ow + x].is_some_and(|(sy, sx)| inst.mask.get(sy, sx)));
            (!mask.is_empty()).then(|| AnnotatedInstance {
                class_id: inst.class_id,
                polygon: inst.polygon.iter().map(|&p| g.map_point(p)).collect(),
                mask,
            })
        })
        .collect();
    Augmented {
        sample: Sample {
            image: RgbImage { height: oh, width: ow, data },
            record: AnnotationRecord { image_id: rec.image_id.clone(), height: oh, width: ow, instances },
        },
        valid,
    }
}

/// Rescales so the longer side equals `target`, keeping the aspect ratio,
/// and zero-pads bottom/right to `target x target`.
pub fn resize_longest_side(sample: &Sample, target: usize) -> Augmented {
    let longest = sample.image.height.max(sample.image.width);
    let params = AugmentParams {
        scale: target as f64 / longest as f64,
        ..AugmentParams::identity(target, target)
    };
    augment(sample, params)
}
