//! Query refinement against the pixel decoder's mask features.
//!
//! Every (level, block) pair owns one cross-attention block followed by one
//! self-attention + FFN block. Queries and their positional embeddings are
//! shared by all blocks. The state after each block is recorded for deep
//! supervision.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, ParamId, ParamStore, RELU_GAIN};
use crate::pixel_decoder::DecoderLevelOutput;
use crate::tensor::{matmul, Tensor};

pub const POS_TEMPERATURE: f64 = 10000.0;

/// Order in which the blocks of the decoder layers are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    /// All blocks of level 1, then all of level 2, ...
    #[default]
    Sequential,
    /// Block `b` of every level before block `b + 1`.
    Cyclic,
}

/// 2-D sine embedding, `[H*W, D]` row-major over `(y, x)`.
///
/// The first `D/2` channels encode `y`, the rest `x`; within each half,
/// channel `2i` is `sin(p / T^(2i/(D/2)))` and `2i + 1` the matching cosine.
/// Coordinates are raw 0-based pixel indices.
pub fn sinusoidal_pos_embed(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!("positional embedding width {d} must be a positive multiple of 4")));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| POS_TEMPERATURE.powf((2 * (i / 2)) as f64 / half as f64))
        .collect();
    let encode = |p: f64, out: &mut [f64]| {
        for (i, (o, f)) in out.iter_mut().zip(&freqs).enumerate() {
            let a = p / f;
            *o = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    };
    let mut data = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * d..(y * w + x + 1) * d];
            let (ry, rx) = row.split_at_mut(half);
            encode(y as f64, ry);
            encode(x as f64, rx);
        }
    }
    Tensor::new(data, &[h * w, d])
}

/// Scaled dot-product attention. `q: [B, N, D]`, `k, v: [B, S, D]`.
///
/// Returns the attended values `[B, N, D]` and the weights `[B, heads, N, S]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    let [b, n, d] = match *q.shape() {
        [b, n, d] => [b, n, d],
        ref s => return Err(Error::shape("attention", format!("queries must be [B, N, D], got {s:?}"))),
    };
    let s = k.shape().get(1).copied().unwrap_or(0);
    if k.shape() != [b, s, d] || v.shape() != [b, s, d] {
        return Err(Error::shape(
            "attention",
            format!("keys {:?} / values {:?} incompatible with queries {:?}", k.shape(), v.shape(), q.shape()),
        ));
    }
    if s == 0 {
        return Err(Error::shape("attention", "empty key set"));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let split = |t: &Tensor, len: usize| -> Result<Tensor> {
        if heads == 1 {
            t.reshape(&[b, 1, len, d])
        } else {
            t.reshape(&[b, len, heads, dh])?.swap_axes12()
        }
    };
    let (qh, kh, vh) = (split(q, n)?, split(k, s)?, split(v, s)?);
    let scores = matmul(&qh, &kh.transpose_last2()?)?.scale(1.0 / (dh as f64).sqrt());
    let weights = scores.softmax_lastdim()?;
    let out = matmul(&weights, &vh)?;
    let out = if heads == 1 { out.reshape(&[b, n, d])? } else { out.swap_axes12()?.reshape(&[b, n, d])? };
    Ok((out, weights))
}

/// Keys/values for one decoder level: flattened mask features and their
/// positional embedding.
#[derive(Debug, Clone)]
pub struct AttentionContext {
    /// `[B, S, D]`
    pub source: Tensor,
    /// `[S, D]`
    pub pos: Tensor,
}

impl AttentionContext {
    pub fn from_level(x_mask: &Tensor) -> Result<Self> {
        let source = x_mask.flatten_spatial()?;
        let [h, w] = [x_mask.shape()[2], x_mask.shape()[3]];
        let pos = sinusoidal_pos_embed(h, w, x_mask.shape()[1])?;
        Ok(AttentionContext { source, pos })
    }
}

pub struct CrossAttentionBlock {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub norm: LayerNorm,
}

impl CrossAttentionBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        CrossAttentionBlock {
            q_proj: Linear::new(store, rng, &format!("{name}.q"), d, d, 1.0),
            k_proj: Linear::new(store, rng, &format!("{name}.k"), d, d, 1.0),
            v_proj: Linear::new(store, rng, &format!("{name}.v"), d, d, 1.0),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
        }
    }

    /// `LN(softmax(Q K^T / sqrt(d)) V + queries)` with `Q` from
    /// `queries + q_pos`, `K` from `source + pos` and `V` from `source`.
    pub fn forward(
        &self,
        store: &ParamStore,
        queries: &Tensor,
        q_pos: &Tensor,
        ctx: &AttentionContext,
        heads: usize,
    ) -> Result<(Tensor, Tensor)> {
        let q = self.q_proj.forward(store, &queries.add_broadcast(q_pos)?)?;
        let k = self.k_proj.forward(store, &ctx.source.add_broadcast(&ctx.pos)?)?;
        let v = self.v_proj.forward(store, &ctx.source)?;
        let (attended, weights) = attention(&q, &k, &v, heads)?;
        Ok((self.norm.forward(store, &attended.add(queries)?)?, weights))
    }
}

pub struct SelfAttentionFfnBlock {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub norm1: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm2: LayerNorm,
}

impl SelfAttentionFfnBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, ffn: usize) -> Self {
        SelfAttentionFfnBlock {
            q_proj: Linear::new(store, rng, &format!("{name}.q"), d, d, 1.0),
            k_proj: Linear::new(store, rng, &format!("{name}.k"), d, d, 1.0),
            v_proj: Linear::new(store, rng, &format!("{name}.v"), d, d, 1.0),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d, ffn, RELU_GAIN),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), ffn, d, 1.0),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
        }
    }

    pub fn forward(&self, store: &ParamStore, queries: &Tensor, q_pos: &Tensor, heads: usize) -> Result<Tensor> {
        let with_pos = queries.add_broadcast(q_pos)?;
        let q = self.q_proj.forward(store, &with_pos)?;
        let k = self.k_proj.forward(store, &with_pos)?;
        let v = self.v_proj.forward(store, queries)?;
        let (attended, _) = attention(&q, &k, &v, heads)?;
        let x = self.norm1.forward(store, &attended.add(queries)?)?;
        let h = self.fc1.forward(store, &x)?.relu();
        let y = self.fc2.forward(store, &h)?;
        self.norm2.forward(store, &y.add(&x)?)
    }
}

pub struct TransformerBlock {
    pub cross: CrossAttentionBlock,
    pub self_ffn: SelfAttentionFfnBlock,
}

/// Learnable queries plus the states recorded during one refinement.
#[derive(Debug, Clone)]
pub struct QuerySet {
    /// `[N, D]`
    pub q: Tensor,
    /// `[N, D]`
    pub q_pos: Tensor,
    /// One `[B, N, D]` state per executed block, in execution order.
    pub states: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerConfig {
    pub num_queries: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub levels: usize,
    pub blocks_per_level: usize,
    pub order: UpdateOrder,
}

pub struct TransformerDecoder {
    pub q: ParamId,
    pub q_pos: ParamId,
    /// `blocks[level][block]`
    pub blocks: Vec<Vec<TransformerBlock>>,
    pub cfg: TransformerConfig,
}

impl TransformerDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: TransformerConfig) -> Result<Self> {
        let (n, d) = (cfg.num_queries, cfg.dim);
        if n == 0 || cfg.levels == 0 || cfg.blocks_per_level == 0 {
            return Err(Error::Config("queries, levels and blocks per level must all be >= 1".into()));
        }
        if d % 4 != 0 || cfg.heads == 0 || d % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "width {d} must be a multiple of 4 and of the head count {}",
                cfg.heads
            )));
        }
        let mut normal = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.sample(StandardNormal)).collect() };
        let q = store.add("queries.q", normal(n * d), &[n, d]);
        let q_pos = store.add("queries.pos", normal(n * d), &[n, d]);
        let blocks = (0..cfg.levels)
            .map(|l| {
                (0..cfg.blocks_per_level)
                    .map(|b| {
                        let name = format!("transformer.level{}.block{}", l + 1, b + 1);
                        TransformerBlock {
                            cross: CrossAttentionBlock::new(store, rng, &format!("{name}.cross"), d),
                            self_ffn: SelfAttentionFfnBlock::new(store, rng, &format!("{name}.self"), d, cfg.ffn_dim),
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(TransformerDecoder { q, q_pos, blocks, cfg })
    }

    /// `(level, block)` pairs in execution order.
    pub fn schedule(&self) -> Vec<(usize, usize)> {
        let (levels, per) = (self.cfg.levels, self.cfg.blocks_per_level);
        match self.cfg.order {
            UpdateOrder::Sequential => (0..levels).flat_map(|l| (0..per).map(move |b| (l, b))).collect(),
            UpdateOrder::Cyclic => (0..per).flat_map(|b| (0..levels).map(move |l| (l, b))).collect(),
        }
    }

    /// Runs every block once against `levels` (coarse to fine).
    pub fn refine(&self, store: &ParamStore, levels: &[DecoderLevelOutput]) -> Result<QuerySet> {
        if levels.is_empty() {
            return Err(Error::Contract("refine needs at least one decoder level".into()));
        }
        if levels.len() != self.blocks.len() {
            return Err(Error::Contract(format!(
                "decoder produced {} levels but the transformer has {}",
                levels.len(),
                self.blocks.len()
            )));
        }
        let batch = levels[0].x_mask.shape()[0];
        let ctxs = levels
            .iter()
            .map(|l| AttentionContext::from_level(&l.x_mask))
            .collect::<Result<Vec<_>>>()?;
        let q = store.get(self.q);
        let q_pos = store.get(self.q_pos);
        let mut x = q.expand_batch(batch);
        let mut states = Vec::with_capacity(self.cfg.levels * self.cfg.blocks_per_level);
        for (l, b) in self.schedule() {
            let block = &self.blocks[l][b];
            let (y, _) = block.cross.forward(store, &x, &q_pos, &ctxs[l], self.cfg.heads)?;
            x = block.self_ffn.forward(store, &y, &q_pos, self.cfg.heads)?;
            states.push(x.clone());
        }
        Ok(QuerySet { q, q_pos, states })
    }
}
