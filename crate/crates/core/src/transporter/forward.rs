//! Whole-model passes: the training objective and inference-mode helpers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{BatchStats, BnMode, Forward, Keypoints, TransporterModel};
use crate::error::Result;
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Graph handles of one transport-and-reconstruct pass.
#[derive(Clone, Copy, Debug)]
pub struct TransportResult {
    pub psi_source: Var,
    pub psi_target: Var,
    pub source_keys: Keypoints,
    pub target_keys: Keypoints,
    pub epsilon: Var,
    pub reconstruction: Var,
}

pub struct TrainingForward<T> {
    pub loss: Var,
    pub result: TransportResult,
    /// Trainable leaves bound for the target branch and decoder.
    pub params: BTreeMap<String, Var>,
    /// Source-branch batch statistics first, then target-branch ones.
    pub stats: Vec<BatchStats<T>>,
}

/// Reconstruction loss of `target` from `source`.
///
/// The source branch runs on frozen parameters, so no gradient reaches the
/// networks through it; parameters learn only through the target features,
/// the target keypoints and the decoder.
pub fn training_forward<T: Scalar>(
    g: &mut Graph<T>,
    model: &TransporterModel<T>,
    source: &Tensor<T>,
    target: &Tensor<T>,
    mode: BnMode,
) -> Result<TrainingForward<T>> {
    training_forward_split(g, model, model, source, target, mode)
}

/// [`training_forward`] with the frozen source branch evaluated on its own
/// copy of the parameters. With identical copies the two agree exactly; the
/// gradient checker perturbs only `model` to differentiate the objective as
/// the optimizer sees it.
pub fn training_forward_split<T: Scalar>(
    g: &mut Graph<T>,
    source_model: &TransporterModel<T>,
    model: &TransporterModel<T>,
    source: &Tensor<T>,
    target: &Tensor<T>,
    mode: BnMode,
) -> Result<TrainingForward<T>> {
    let xs = g.constant(source.clone());
    let xt = g.constant(target.clone());

    let mut src = Forward::new(source_model, false, mode);
    let psi_s = src.ffcnn(g, xs)?;
    let psi_s = g.detach(psi_s);
    let kp_s = src.keynet(g, xs)?;
    let phi_s = g.detach(kp_s.heatmaps);

    let mut tgt = Forward::new(model, true, mode);
    let psi_t = tgt.ffcnn(g, xt)?;
    let kp_t = tgt.keynet(g, xt)?;
    let eps = g.transport(psi_s, psi_t, phi_s, kp_t.heatmaps, kp_t.weights)?;
    let recon = tgt.refine(g, eps)?;
    let loss = g.mse_loss(recon, xt)?;

    let params = tgt.binder.bound().map(|(k, v)| (k.to_string(), v)).collect();
    let mut stats = src.stats;
    stats.extend(tgt.stats);
    Ok(TrainingForward {
        loss,
        result: TransportResult {
            psi_source: psi_s,
            psi_target: psi_t,
            source_keys: Keypoints {
                heatmaps: phi_s,
                ..kp_s
            },
            target_keys: kp_t,
            epsilon: eps,
            reconstruction: recon,
        },
        params,
        stats,
    })
}

/// Keypoints of one frame in normalized and pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameKeypoints {
    /// `[x, y]` in `[-1, 1]`.
    pub coords: Vec<[f64; 2]>,
    /// `[x, y]` in input pixels.
    pub pixels: Vec<[f64; 2]>,
    pub sigma: Vec<f64>,
    pub weight: Vec<f64>,
    /// Peak softmax mass of each keypoint map.
    pub confidence: Vec<f64>,
}

/// Normalized coordinate to pixel position on an axis of `n` pixels.
pub fn to_pixel(c: f64, n: usize) -> f64 {
    (c + 1.0) / 2.0 * (n as f64 - 1.0)
}

/// Inference-mode keypoints for a batch `[N, C, S, S]`.
pub fn detect(model: &TransporterModel<f32>, batch: &Tensor<f32>) -> Result<Vec<FrameKeypoints>> {
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let kp = Forward::new(model, false, BnMode::Eval).keynet(&mut g, x)?;
    let k = model.config.k;
    let s = model.config.input_size;
    let coords = g.value(kp.coords).data();
    let sigma: Vec<f64> = g.value(kp.sigma).data().iter().map(|&v| v as f64).collect();
    let weight: Vec<f64> = match kp.weights {
        Some(w) => g.value(w).data().iter().map(|&v| v as f64).collect(),
        None => vec![1.0; k],
    };
    let probs = g.value(kp.probs);
    let hw = probs.shape()[2] * probs.shape()[3];
    let n = batch.shape()[0];
    Ok((0..n)
        .map(|i| {
            let c: Vec<[f64; 2]> = (0..k)
                .map(|j| [coords[(i * k + j) * 2] as f64, coords[(i * k + j) * 2 + 1] as f64])
                .collect();
            FrameKeypoints {
                pixels: c.iter().map(|p| [to_pixel(p[0], s), to_pixel(p[1], s)]).collect(),
                coords: c,
                sigma: sigma.clone(),
                weight: weight.clone(),
                confidence: (0..k)
                    .map(|j| {
                        let m = &probs.data()[(i * k + j) * hw..(i * k + j + 1) * hw];
                        m.iter().copied().fold(0.0f32, f32::max) as f64
                    })
                    .collect(),
            }
        })
        .collect())
}

/// Inference-mode feature maps `[N, C_f, S/4, S/4]`.
pub fn encode(model: &TransporterModel<f32>, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let psi = Forward::new(model, false, BnMode::Eval).ffcnn(&mut g, x)?;
    Ok(g.value(psi).clone())
}

/// Inference-mode reconstruction loss of a batch of pairs.
pub fn eval_loss(model: &TransporterModel<f32>, source: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    let mut g = Graph::new();
    let f = training_forward(&mut g, model, source, target, BnMode::Eval)?;
    Ok(g.value(f.loss).data()[0] as f64)
}
