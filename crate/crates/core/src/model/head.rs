//! Matching head: each refined keypoint feature is tiled over the query
//! feature grid, concatenated with the query features and decoded to a
//! single-channel heatmap by a shared conv/deconv decoder.

use candle_core::Tensor;

use super::layers::{Conv2d, Deconv2d, GroupNorm};
use super::params::{Init, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct MatchingHead {
    fuse: Conv2d,
    keypoint_dim: usize,
    query_dim: usize,
    deconvs: Vec<(Deconv2d, GroupNorm)>,
    out: Conv2d,
}

impl MatchingHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        keypoint_dim: usize,
        query_dim: usize,
        channels: usize,
        deconvs: usize,
        groups: usize,
    ) -> Result<Self> {
        let fuse = Conv2d::new(store, &format!("{name}.fuse"), keypoint_dim + query_dim, channels, 3, 1, 1, true)?;
        let deconvs = (0..deconvs)
            .map(|i| {
                Ok((
                    Deconv2d::new(store, &format!("{name}.deconv{i}"), channels, channels)?,
                    GroupNorm::new(store, &format!("{name}.deconv{i}_norm"), channels, groups)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let out = Conv2d::with_init(store, &format!("{name}.out"), (channels, 1, 1, 1, 0, true), Init::Normal(0.01))?;
        Ok(Self {
            fuse,
            keypoint_dim,
            query_dim,
            deconvs,
            out,
        })
    }

    /// `keypoints (N, D)` refined features, `episode (N)` u32 index of each
    /// keypoint's query in `query (B, C, h, w)`. Returns `(N, H, W)`.
    pub fn forward(&self, keypoints: &Tensor, episode: &Tensor, query: &Tensor) -> Result<Tensor> {
        let (_, d) = keypoints.dims2()?;
        let (_, _, h, w) = query.dims4()?;
        // The 3x3 conv over [Expand(f) ; F_Q] is linear in its input, so it
        // splits into a query part computed once per query image and a
        // keypoint part over a spatially constant input.
        let query_part = self.fuse.forward_channels(query, self.keypoint_dim, self.query_dim, true)?;
        let query_part = query_part.index_select(episode, 0)?;
        let keypoint_part = self.fuse.forward_constant(keypoints, 0, d, (h, w))?;
        let mut x = (query_part + keypoint_part)?.relu()?;
        for (deconv, norm) in &self.deconvs {
            x = norm.forward(&deconv.forward(&x)?)?.relu()?;
        }
        let y = self.out.forward(&x)?;
        Ok(y.squeeze(1)?)
    }

    /// The same decoder applied to the explicit channel concatenation; used to
    /// check the split evaluation above.
    pub fn forward_concat(&self, keypoints: &Tensor, episode: &Tensor, query: &Tensor) -> Result<Tensor> {
        let (n, d) = keypoints.dims2()?;
        let (_, _, h, w) = query.dims4()?;
        let tiled = keypoints.reshape((n, d, 1, 1))?.broadcast_as((n, d, h, w))?;
        let q = query.index_select(episode, 0)?;
        let cat = Tensor::cat(&[&tiled, &q], 1)?;
        let mut x = self.fuse.forward(&cat)?.relu()?;
        for (deconv, norm) in &self.deconvs {
            x = norm.forward(&deconv.forward(&x)?)?.relu()?;
        }
        Ok(self.out.forward(&x)?.squeeze(1)?)
    }
}
