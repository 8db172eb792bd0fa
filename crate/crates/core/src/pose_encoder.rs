//! Skeleton graph network mapping a pose to per-bone feature vectors.
//!
//! Two graph-convolution layers
//! `h'_i = sin(W_self h_i + W_nbr · mean_{j ∈ N(i)} h_j + b)` run over the
//! per-bone 6-D rotation parameters, followed by an independent two-layer
//! sine MLP per bone.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{xavier, Init, Linear, ParamBuilder};
use crate::skeleton::SkeletonTopology;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseEncoderConfig {
    pub conv_width: usize,
    pub mlp_width: usize,
    pub feature_dim: usize,
}

impl Default for PoseEncoderConfig {
    fn default() -> Self {
        Self {
            conv_width: 32,
            mlp_width: 32,
            feature_dim: 32,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    self_weight: Linear,
    neighbor_weight: crate::tensor::ParamId,
}

#[derive(Clone, Debug)]
pub struct PoseEncoder {
    cfg: PoseEncoderConfig,
    bones: usize,
    neighbor_mean: Tensor,
    conv: Vec<ConvLayer>,
    mlp: Vec<(Linear, Linear)>,
}

/// Row-stochastic neighbor-averaging matrix; a bone with no neighbors gets a
/// zero row.
pub fn neighbor_mean_matrix(topo: &SkeletonTopology) -> Tensor {
    let n = topo.bone_count();
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        let nbrs = topo.neighbors(i);
        for &j in &nbrs {
            a.set(i, j, 1.0 / nbrs.len() as f64);
        }
    }
    a
}

impl PoseEncoder {
    pub(crate) fn build(
        cfg: &PoseEncoderConfig,
        topo: &SkeletonTopology,
        pb: &mut ParamBuilder<'_>,
    ) -> Result<Self> {
        let n = topo.bone_count();
        let mut conv = Vec::new();
        let mut fan_in = 6;
        for l in 0..2 {
            let w = cfg.conv_width;
            conv.push(ConvLayer {
                self_weight: pb.linear(
                    &format!("pose_encoder/conv{l}_self"),
                    fan_in,
                    w,
                    xavier(fan_in, w),
                    Init::Zeros,
                )?,
                neighbor_weight: pb.get(
                    &format!("pose_encoder/conv{l}_nbr_w"),
                    fan_in,
                    w,
                    xavier(fan_in, w),
                    true,
                )?,
            });
            fan_in = w;
        }
        let mut mlp = Vec::with_capacity(n);
        for i in 0..n {
            let h = cfg.mlp_width;
            let l1 = pb.linear(
                &format!("pose_encoder/node{i}_l1"),
                fan_in,
                h,
                xavier(fan_in, h),
                Init::Zeros,
            )?;
            let l2 = pb.linear(
                &format!("pose_encoder/node{i}_l2"),
                h,
                cfg.feature_dim,
                xavier(h, cfg.feature_dim),
                Init::Zeros,
            )?;
            mlp.push((l1, l2));
        }
        Ok(Self {
            cfg: cfg.clone(),
            bones: n,
            neighbor_mean: neighbor_mean_matrix(topo),
            conv,
            mlp,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    /// `pose` is `[N_B, 6]`; returns bone features `[N_B, D_g]`.
    pub fn forward(&self, g: &mut Graph, pose: Var) -> Result<Var> {
        let h = self.convolve(g, pose)?;
        self.node_mlps(g, h)
    }

    pub(crate) fn convolve(&self, g: &mut Graph, pose: Var) -> Result<Var> {
        let adj = g.constant(self.neighbor_mean.clone());
        let mut h = pose;
        for layer in &self.conv {
            let own = layer.self_weight.forward(g, h)?;
            let agg = g.matmul(adj, h)?;
            let wn = g.param(layer.neighbor_weight);
            let nbr = g.matmul(agg, wn)?;
            let pre = g.add(own, nbr)?;
            h = g.sin(pre)?;
        }
        Ok(h)
    }

    /// Per-bone MLPs on conv features `[N_B, conv_width]`.
    pub(crate) fn node_mlps(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let mut rows = Vec::with_capacity(self.bones);
        for (i, (l1, l2)) in self.mlp.iter().enumerate() {
            let hi = g.slice_rows(h, i, 1)?;
            let z = l1.forward(g, hi)?;
            let z = g.sin(z)?;
            rows.push(l2.forward(g, z)?);
        }
        Ok(g.concat_rows(&rows)?)
    }

    #[cfg(test)]
    pub(crate) fn swap_node_weights(&mut self, a: usize, b: usize) {
        self.mlp.swap(a, b);
    }
}
