//! Keypoint Interaction Module: post-norm transformer blocks of keypoint
//! self-attention, keypoint-to-image cross-attention and a feed-forward
//! network.

use candle_core::{DType, Device, Tensor};

use super::layers::{scalar, softmax_last, LayerNorm, Linear};
use super::params::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// `query (B, Lq, D)`, `key`/`value (B, Lk, D)`. `key_valid` is a `(B, Lk)`
    /// u8 tensor; keys where it is 0 receive no attention.
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor, key_valid: Option<&Tensor>) -> Result<Tensor> {
        let (b, lq, d) = query.dims3()?;
        let lk = key.dim(1)?;
        let dh = d / self.heads;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(key)?)?;
        let v = self.split_heads(&self.v.forward(value)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let scores = match key_valid {
            Some(mask) => {
                let shape = (b, self.heads, lq, lk);
                let mask = mask.reshape((b, 1, 1, lk))?.broadcast_as(shape)?;
                let neg = scalar(f64::NEG_INFINITY, scores.dtype(), scores.device())?.broadcast_as(shape)?;
                mask.where_cond(&scores, &neg)?
            }
            None => scores,
        };
        let attn = softmax_last(&scores)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, lq, d))?;
        self.out.forward(&ctx)
    }
}

#[derive(Debug, Clone)]
pub struct KimBlock {
    self_attn: MultiHeadAttention,
    self_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: LayerNorm,
}

impl KimBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_dim: usize) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads)?,
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), dim)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads)?,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), dim)?,
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), dim, ffn_dim)?,
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), ffn_dim, dim)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim)?,
        })
    }

    /// `slots (B, L, D)`; `memory (B, hw, D)` are the projected query-image
    /// cells and `memory_keys` the same plus position embedding.
    pub fn forward(&self, slots: &Tensor, slot_valid: &Tensor, memory: &Tensor, memory_keys: &Tensor) -> Result<Tensor> {
        let a = self.self_attn.forward(slots, slots, slots, Some(slot_valid))?;
        let x = self.self_norm.forward(&(slots + a)?)?;
        let c = self.cross_attn.forward(&x, memory_keys, memory, None)?;
        let x = self.cross_norm.forward(&(x + c)?)?;
        let f = self.ffn_out.forward(&self.ffn_in.forward(&x)?.relu()?)?;
        self.ffn_norm.forward(&(x + f)?)
    }
}

/// Fixed 2-D sine embedding for an `h x w` grid, `(h * w, dim)` row-major.
/// The first half of the channels encodes y, the second half x; within each
/// half channels alternate sin/cos over geometric frequencies.
pub fn sine_position_embedding(h: usize, w: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let two_pi = std::f64::consts::TAU;
    let freq = |k: usize| 10000f64.powf((2 * (k / 2)) as f64 / half as f64);
    let mut out = Vec::with_capacity(h * w * dim);
    for i in 0..h {
        let y = (i + 1) as f64 / h as f64 * two_pi;
        for j in 0..w {
            let x = (j + 1) as f64 / w as f64 * two_pi;
            for (coord, _) in [(y, 0), (x, 1)] {
                for k in 0..half {
                    let a = coord / freq(k);
                    out.push(if k % 2 == 0 { a.sin() } else { a.cos() });
                }
            }
        }
    }
    out
}

pub fn position_tensor(h: usize, w: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(sine_position_embedding(h, w, dim), (h * w, dim), device)?.to_dtype(dtype)?)
}
