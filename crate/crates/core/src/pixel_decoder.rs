//! Convolutional pixel decoder.
//!
//! Each level fuses an encoder skip with the upsampled main features of the
//! previous level and then refreshes the mask features:
//!
//! ```text
//! X   = SE( G_x([proj(X_s), X', coords]) + X' )
//! X_m = G_m( X_m' + X )
//! ```
//!
//! `G_x` is two `[depthwise 3x3, pointwise 1x1, BN, ReLU]` blocks and `G_m`
//! is two `[conv 3x3, BN, ReLU]` blocks. At the coarsest level `X'` is a
//! 1x1 projection of the 1/32 skip and `X_m'` is absent (treated as zero).
//! Levels run 1/32 -> 1/16 -> 1/8.

use rand_chacha::ChaCha8Rng;

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvBnRelu, DepthwiseConv2d, Linear, ParamStore, RELU_GAIN};
use crate::tensor::{bilinear_upsample2x, concat_channels, BnMode, Tensor};

/// Main and mask features of one decoder level (level 1 is the coarsest).
#[derive(Debug, Clone)]
pub struct DecoderLevelOutput {
    pub x_main: Tensor,
    pub x_mask: Tensor,
    pub level: usize,
}

/// Appends normalized x and y coordinate channels in `[-1, 1]`.
///
/// An axis with a single sample maps to -1.
pub fn inject_coords(x: &Tensor) -> Result<Tensor> {
    let [n, _, h, w] = match *x.shape() {
        [n, c, h, w] => [n, c, h, w],
        ref s => return Err(Error::shape("inject_coords", format!("expected rank 4, got {s:?}"))),
    };
    let lin = |len: usize, i: usize| {
        if len <= 1 {
            -1.0
        } else {
            -1.0 + 2.0 * i as f64 / (len - 1) as f64
        }
    };
    let mut coords = Vec::with_capacity(n * 2 * h * w);
    for _ in 0..n {
        for _ in 0..h {
            coords.extend((0..w).map(|xi| lin(w, xi)));
        }
        for y in 0..h {
            coords.extend(std::iter::repeat_n(lin(h, y), w));
        }
    }
    let coords = Tensor::new(coords, &[n, 2, h, w])?;
    concat_channels(&[x, &coords])
}

pub struct SeBlock {
    pub reduce: Linear,
    pub expand: Linear,
}

impl SeBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "SE block: {channels} channels not divisible by reduction ratio {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(SeBlock {
            reduce: Linear::new(store, rng, &format!("{name}.reduce"), channels, hidden, RELU_GAIN),
            expand: Linear::new(store, rng, &format!("{name}.expand"), hidden, channels, 1.0),
        })
    }

    /// pool -> linear -> ReLU -> linear -> sigmoid -> channel scaling
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let pooled = x.global_avg_pool()?;
        let hidden = self.reduce.forward(store, &pooled)?.relu();
        let gate = self.expand.forward(store, &hidden)?.sigmoid();
        x.scale_channels(&gate)
    }
}

pub struct GxBlock {
    pub depthwise: DepthwiseConv2d,
    pub pointwise: Conv2d,
    pub bn: BatchNorm2d,
}

impl GxBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        GxBlock {
            depthwise: DepthwiseConv2d::new(store, rng, &format!("{name}.dw"), cin, 3),
            pointwise: Conv2d::new(store, rng, &format!("{name}.pw"), cin, cout, 1, 1, false),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward(&self, store: &ParamStore, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let y = self.depthwise.forward(store, x)?;
        let y = self.pointwise.forward(store, &y)?;
        Ok(self.bn.forward(store, &y, mode)?.relu())
    }
}

pub struct DecoderLevel {
    pub skip_proj: Conv2d,
    pub gx: [GxBlock; 2],
    pub se: Option<SeBlock>,
    pub gm: [ConvBnRelu; 2],
    pub use_coords: bool,
}

impl DecoderLevel {
    /// `X = SE(G_x([proj(X_s), X'(, coords)]) + X')`
    pub fn fuse_skip(&self, store: &ParamStore, x_prev_up: &Tensor, skip: &Tensor, mode: BnMode) -> Result<Tensor> {
        if x_prev_up.shape()[2..] != skip.shape()[2..] || x_prev_up.shape()[0] != skip.shape()[0] {
            return Err(Error::shape(
                "fuse_skip",
                format!("decoder features {:?} vs skip {:?}", x_prev_up.shape(), skip.shape()),
            ));
        }
        let projected = self.skip_proj.forward(store, skip)?;
        let mut cat = concat_channels(&[&projected, x_prev_up])?;
        if self.use_coords {
            cat = inject_coords(&cat)?;
        }
        let g = self.gx[0].forward(store, &cat, mode)?;
        let g = self.gx[1].forward(store, &g, mode)?;
        let residual = g.add(x_prev_up)?;
        match &self.se {
            Some(se) => se.forward(store, &residual),
            None => Ok(residual),
        }
    }

    /// `X_m = G_m(X_m' + X)`; a missing `X_m'` counts as zero.
    pub fn update_mask_features(
        &self,
        store: &ParamStore,
        x_mask_prev_up: Option<&Tensor>,
        x_main: &Tensor,
        mode: BnMode,
    ) -> Result<Tensor> {
        let input = match x_mask_prev_up {
            Some(prev) => {
                if prev.shape() != x_main.shape() {
                    return Err(Error::shape(
                        "update_mask_features",
                        format!("{:?} vs {:?}", prev.shape(), x_main.shape()),
                    ));
                }
                prev.add(x_main)?
            }
            None => x_main.clone(),
        };
        let y = self.gm[0].forward(store, &input, mode)?;
        self.gm[1].forward(store, &y, mode)
    }
}

pub struct PixelDecoder {
    pub init_proj: Conv2d,
    pub levels: Vec<DecoderLevel>,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PixelDecoderConfig {
    pub dim: usize,
    pub use_se: bool,
    pub se_reduction: usize,
    pub use_coord_conv: bool,
}

impl PixelDecoder {
    /// `skip_channels` are the encoder widths at strides 4, 8, 16, 32.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        skip_channels: [usize; 4],
        cfg: PixelDecoderConfig,
    ) -> Result<Self> {
        let d = cfg.dim;
        let init_proj = Conv2d::new(store, rng, "pixel_decoder.init_proj", skip_channels[3], d, 1, 1, true);
        // coarse -> fine: skips at 1/32, 1/16, 1/8
        let skips = [skip_channels[3], skip_channels[2], skip_channels[1]];
        let mut levels = Vec::with_capacity(3);
        for (i, &cs) in skips.iter().enumerate() {
            let name = format!("pixel_decoder.level{}", i + 1);
            let cat = 2 * d + if cfg.use_coord_conv { 2 } else { 0 };
            let se = if cfg.use_se {
                Some(SeBlock::new(store, rng, &format!("{name}.se"), d, cfg.se_reduction)?)
            } else {
                None
            };
            levels.push(DecoderLevel {
                skip_proj: Conv2d::new(store, rng, &format!("{name}.skip_proj"), cs, d, 1, 1, true),
                gx: [
                    GxBlock::new(store, rng, &format!("{name}.gx0"), cat, d),
                    GxBlock::new(store, rng, &format!("{name}.gx1"), d, d),
                ],
                se,
                gm: [
                    ConvBnRelu::new(store, rng, &format!("{name}.gm0"), d, d, 1),
                    ConvBnRelu::new(store, rng, &format!("{name}.gm1"), d, d, 1),
                ],
                use_coords: cfg.use_coord_conv,
            });
        }
        Ok(PixelDecoder { init_proj, levels, dim: d })
    }

    /// Runs all levels, coarse to fine.
    pub fn decode(&self, store: &ParamStore, pyramid: &FeaturePyramid, mode: BnMode) -> Result<Vec<DecoderLevelOutput>> {
        let skips = [&pyramid.s32, &pyramid.s16, &pyramid.s8];
        let mut x_prev = self.init_proj.forward(store, &pyramid.s32)?;
        let mut xm_prev: Option<Tensor> = None;
        let mut out = Vec::with_capacity(self.levels.len());
        for (i, (level, skip)) in self.levels.iter().zip(skips).enumerate() {
            if let Some(prev) = out.last() {
                let prev: &DecoderLevelOutput = prev;
                x_prev = bilinear_upsample2x(&prev.x_main)?;
                xm_prev = Some(bilinear_upsample2x(&prev.x_mask)?);
            }
            let x = level.fuse_skip(store, &x_prev, skip, mode)?;
            let xm = level.update_mask_features(store, xm_prev.as_ref(), &x, mode)?;
            out.push(DecoderLevelOutput { x_main: x, x_mask: xm, level: i + 1 });
        }
        Ok(out)
    }
}
