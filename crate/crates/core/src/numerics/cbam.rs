//! Convolutional block attention: channel gate then spatial gate.

use super::graph::{Graph, Var};
use super::tensor::Scalar;
use super::LayerSpec;
use crate::error::Result;

/// Spatial-gate kernel size.
pub const CBAM_KERNEL: usize = 7;

/// Graph handles for the parameters of one attention block over `channels`
/// inputs with a `hidden`-wide shared MLP.
#[derive(Clone, Copy, Debug)]
pub struct CbamVars {
    pub channels: usize,
    pub hidden: usize,
    pub mlp1_w: Var,
    pub mlp1_b: Var,
    pub mlp2_w: Var,
    pub mlp2_b: Var,
    pub spatial_w: Var,
    pub spatial_b: Var,
}

impl CbamVars {
    pub fn param_shapes(channels: usize, hidden: usize) -> [(&'static str, Vec<usize>); 6] {
        [
            ("mlp1.w", vec![hidden, channels, 1, 1]),
            ("mlp1.b", vec![hidden]),
            ("mlp2.w", vec![channels, hidden, 1, 1]),
            ("mlp2.b", vec![channels]),
            ("spatial.w", vec![1, 2, CBAM_KERNEL, CBAM_KERNEL]),
            ("spatial.b", vec![1]),
        ]
    }
}

/// Intermediate gates, exposed for inspection and tests.
pub struct CbamOutput {
    pub output: Var,
    pub channel_gate: Var,
    pub spatial_gate: Var,
}

impl<T: Scalar> Graph<T> {
    pub fn cbam_block(&mut self, x: Var, p: &CbamVars) -> Result<CbamOutput> {
        let l1 = LayerSpec::conv(p.channels, p.hidden, 1, 1, 0);
        let l2 = LayerSpec::conv(p.hidden, p.channels, 1, 1, 0);
        let avg = self.global_avg_pool(x)?;
        let max = self.global_max_pool(x)?;
        let mlp = |g: &mut Self, v: Var| -> Result<Var> {
            let h = g.conv2d(v, p.mlp1_w, Some(p.mlp1_b), &l1)?;
            let h = g.relu(h)?;
            g.conv2d(h, p.mlp2_w, Some(p.mlp2_b), &l2)
        };
        let a = mlp(self, avg)?;
        let m = mlp(self, max)?;
        let logits = self.add(a, m)?;
        let channel_gate = self.sigmoid(logits)?;
        let x1 = self.mul_bcast(x, channel_gate)?;

        let mean = self.channel_mean(x1)?;
        let mx = self.channel_max(x1)?;
        let desc = self.concat_channels(&[mean, mx])?;
        let ls = LayerSpec::conv(2, 1, CBAM_KERNEL, 1, CBAM_KERNEL / 2);
        let s = self.conv2d(desc, p.spatial_w, Some(p.spatial_b), &ls)?;
        let spatial_gate = self.sigmoid(s)?;
        let output = self.mul_bcast(x1, spatial_gate)?;
        Ok(CbamOutput {
            output,
            channel_gate,
            spatial_gate,
        })
    }
}
