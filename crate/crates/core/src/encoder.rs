//! Small convolutional backbone producing the four-scale feature pyramid.
//!
//! Layout: a stride-2 3x3 stem, then four stages of
//! `[conv3x3/2, BN, ReLU, conv3x3/1, BN, ReLU]`. The stem plus stage 1 give
//! stride 4; each later stage halves the resolution again.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, ParamStore};
use crate::tensor::{BnMode, Tensor};

/// Encoder maps at strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub s4: Tensor,
    pub s8: Tensor,
    pub s16: Tensor,
    pub s32: Tensor,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [&Tensor; 4] {
        [&self.s4, &self.s8, &self.s16, &self.s32]
    }
}

struct Stage {
    down: ConvBnRelu,
    refine: ConvBnRelu,
}

pub struct Encoder {
    stem: ConvBnRelu,
    stages: Vec<Stage>,
    pub channels: [usize; 4],
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        stem_channels: usize,
        channels: [usize; 4],
    ) -> Self {
        let stem = ConvBnRelu::new(store, rng, "encoder.stem", 3, stem_channels, 2);
        let mut cin = stem_channels;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let name = format!("encoder.stage{}", i + 1);
                let s = Stage {
                    down: ConvBnRelu::new(store, rng, &format!("{name}.down"), cin, c, 2),
                    refine: ConvBnRelu::new(store, rng, &format!("{name}.refine"), c, c, 1),
                };
                cin = c;
                s
            })
            .collect();
        Encoder { stem, stages, channels }
    }

    /// `image` is `[N, 3, H, W]` with `H` and `W` divisible by 32.
    pub fn encode(&self, store: &ParamStore, image: &Tensor, mode: BnMode) -> Result<FeaturePyramid> {
        match *image.shape() {
            [_, 3, h, w] if h % 32 == 0 && w % 32 == 0 && h > 0 && w > 0 => {}
            [_, 3, h, w] => {
                return Err(Error::shape(
                    "encode",
                    format!("input sides {h}x{w} must be positive multiples of 32"),
                ))
            }
            ref s => return Err(Error::shape("encode", format!("expected [N, 3, H, W], got {s:?}"))),
        }
        let mut x = self.stem.forward(store, image, mode)?;
        let mut taps = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.down.forward(store, &x, mode)?;
            x = stage.refine.forward(store, &x, mode)?;
            taps.push(x.clone());
        }
        let mut it = taps.into_iter();
        Ok(FeaturePyramid {
            s4: it.next().unwrap(),
            s8: it.next().unwrap(),
            s16: it.next().unwrap(),
            s32: it.next().unwrap(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn encoder() -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::new(&mut store, &mut rng, 16, [32, 64, 128, 256]);
        (store, enc)
    }

    #[test]
    fn pyramid_shapes() {
        let (store, enc) = encoder();
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        let p = enc.encode(&store, &x, BnMode::Train).unwrap();
        assert_eq!(p.s4.shape(), &[1, 32, 16, 16]);
        assert_eq!(p.s8.shape(), &[1, 64, 8, 8]);
        assert_eq!(p.s16.shape(), &[1, 128, 4, 4]);
        assert_eq!(p.s32.shape(), &[1, 256, 2, 2]);
        for l in p.levels() {
            assert!(l.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn rejects_indivisible_sides() {
        let (store, enc) = encoder();
        let err = enc.encode(&store, &Tensor::zeros(&[1, 3, 48, 64]), BnMode::Eval).unwrap_err();
        assert!(err.to_string().contains("multiples of 32"), "{err}");
    }

    #[test]
    fn single_pixel_reaches_coarsest_level() {
        let (store, enc) = encoder();
        let base: Vec<f64> = (0..3 * 64 * 64).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let x0 = Tensor::new(base.clone(), &[1, 3, 64, 64]).unwrap();
        let mut bumped = base;
        bumped[10 * 64 + 5] += 0.5;
        let x1 = Tensor::new(bumped, &[1, 3, 64, 64]).unwrap();
        let a = enc.encode(&store, &x0, BnMode::Eval).unwrap();
        let b = enc.encode(&store, &x1, BnMode::Eval).unwrap();
        let diff = a.s32.data().iter().zip(b.s32.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
        let again = enc.encode(&store, &x0, BnMode::Eval).unwrap();
        assert_eq!(again.s32.data(), a.s32.data());
    }
}
