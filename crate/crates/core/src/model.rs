//! The full network: encoder, pixel decoder, query transformer and heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::loss::SupervisionPoint;
use crate::mask_head::{InstancePrediction, MaskHead};
use crate::nn::ParamStore;
use crate::pixel_decoder::{PixelDecoder, PixelDecoderConfig};
use crate::tensor::{no_grad, BnMode, Tensor};
use crate::transformer::{TransformerConfig, TransformerDecoder, UpdateOrder};

/// Which query states are supervised in addition to the final prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeepSupervision {
    /// Every transformer block.
    #[default]
    PerBlock,
    /// The last block of every decoder layer.
    PerLayer,
    /// Final prediction only.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_queries: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub encoder_channels: [usize; 4],
    pub use_se: bool,
    pub se_reduction: usize,
    pub use_coord_conv: bool,
    pub blocks_per_layer: usize,
    pub update_order: UpdateOrder,
    pub deep_supervision: DeepSupervision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            num_queries: 8,
            dim: 64,
            ffn_dim: 256,
            heads: 1,
            num_classes: 1,
            stem_channels: 16,
            encoder_channels: [32, 64, 128, 256],
            use_se: true,
            se_reduction: 4,
            use_coord_conv: true,
            blocks_per_layer: 3,
            update_order: UpdateOrder::Sequential,
            deep_supervision: DeepSupervision::PerBlock,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for gradient checking.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 32,
            num_queries: 4,
            dim: 16,
            ffn_dim: 32,
            stem_channels: 8,
            encoder_channels: [8, 16, 16, 32],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.image_size == 0 || self.image_size % 32 != 0 {
            problems.push(format!("model.image_size {} must be a positive multiple of 32", self.image_size));
        }
        for (name, v) in [
            ("num_queries", self.num_queries),
            ("dim", self.dim),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("num_classes", self.num_classes),
            ("stem_channels", self.stem_channels),
            ("blocks_per_layer", self.blocks_per_layer),
        ] {
            if v == 0 {
                problems.push(format!("model.{name} must be >= 1"));
            }
        }
        if self.dim % 4 != 0 || self.heads == 0 || self.dim % self.heads != 0 {
            problems.push(format!("model.dim {} must be a multiple of 4 and of model.heads", self.dim));
        }
        if self.use_se && (self.se_reduction == 0 || self.dim % self.se_reduction != 0) {
            problems.push(format!("model.dim {} not divisible by model.se_reduction {}", self.dim, self.se_reduction));
        }
        if self.encoder_channels.contains(&0) {
            problems.push("model.encoder_channels must all be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Decoder layers (one per pixel-decoder level).
pub const DECODER_LEVELS: usize = 3;

/// Mask logits are predicted at this stride.
pub const MASK_STRIDE: usize = 4;

pub struct Iaunet {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub pixel_decoder: PixelDecoder,
    pub transformer: TransformerDecoder,
    pub head: MaskHead,
}

/// Everything one forward pass produces.
pub struct ModelOutput {
    /// Supervised predictions in order; the last one is the final output.
    pub points: Vec<SupervisionPoint>,
    /// Number of query states recorded by the transformer.
    pub num_states: usize,
}

impl ModelOutput {
    pub fn final_point(&self) -> &SupervisionPoint {
        self.points.last().expect("at least one supervision point")
    }
}

impl Iaunet {
    /// Builds a model with weights drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, cfg.stem_channels, cfg.encoder_channels);
        let pixel_decoder = PixelDecoder::new(
            &mut store,
            &mut rng,
            cfg.encoder_channels,
            PixelDecoderConfig {
                dim: cfg.dim,
                use_se: cfg.use_se,
                se_reduction: cfg.se_reduction,
                use_coord_conv: cfg.use_coord_conv,
            },
        )?;
        let transformer = TransformerDecoder::new(
            &mut store,
            &mut rng,
            TransformerConfig {
                num_queries: cfg.num_queries,
                dim: cfg.dim,
                ffn_dim: cfg.ffn_dim,
                heads: cfg.heads,
                levels: DECODER_LEVELS,
                blocks_per_level: cfg.blocks_per_layer,
                order: cfg.update_order,
            },
        )?;
        let head = MaskHead::new(&mut store, &mut rng, cfg.encoder_channels[0], cfg.dim, cfg.num_classes);
        Ok(Iaunet { cfg, store, encoder, pixel_decoder, transformer, head })
    }

    /// Indices of the recorded states that receive a loss.
    pub fn supervised_states(&self, num_states: usize) -> Vec<usize> {
        match self.cfg.deep_supervision {
            DeepSupervision::PerBlock => (0..num_states).collect(),
            DeepSupervision::PerLayer => {
                let per = self.cfg.blocks_per_layer;
                (0..num_states).filter(|i| (i + 1) % per == 0).collect()
            }
            DeepSupervision::Off => vec![],
        }
    }

    /// `images` is `[B, 3, H, W]`.
    pub fn forward(&self, images: &Tensor, mode: BnMode) -> Result<ModelOutput> {
        let store = &self.store;
        let pyramid = self.encoder.encode(store, images, mode)?;
        let levels = self.pixel_decoder.decode(store, &pyramid, mode)?;
        let qs = self.transformer.refine(store, &levels)?;
        let x_m = &levels.last().expect("decoder levels").x_mask;
        let fused = self.head.fuse_features(store, &pyramid.s4, x_m)?;
        let predict = |state: &Tensor| -> Result<SupervisionPoint> {
            Ok(SupervisionPoint {
                mask_logits: self.head.predict_masks(store, state, &fused)?,
                class_logits: self.head.classify(store, state)?,
            })
        };
        let mut points = self
            .supervised_states(qs.states.len())
            .into_iter()
            .map(|i| predict(&qs.states[i]))
            .collect::<Result<Vec<_>>>()?;
        let last = qs.states.last().expect("transformer states");
        points.push(predict(&self.head.final_norm.forward(store, last)?)?);
        Ok(ModelOutput { points, num_states: qs.states.len() })
    }

    /// Eval-mode final predictions, one per image, without building a graph.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<InstancePrediction>> {
        no_grad(|| {
            let out = self.forward(images, BnMode::Eval)?;
            let fp = out.final_point();
            InstancePrediction::from_batch(&fp.mask_logits, &fp.class_logits)
        })
    }
}
