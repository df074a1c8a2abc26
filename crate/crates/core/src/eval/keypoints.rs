//! Model inference over raw frames: keypoints in frame pixels and pooled
//! encoder embeddings.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::correction::{frame_average_correct, Reference};
use crate::error::Result;
use crate::numerics::Tensor;
use crate::rtfpm::{input_map, RtfpmConfig};
use crate::transporter::{detect, encode, to_pixel, FrameKeypoints, TransporterModel};

/// Network inputs of raw frames, batched `[N, C, S, S]`.
pub fn input_batch(frames: &[Array2<f32>], cfg: &RtfpmConfig) -> Result<Tensor<f32>> {
    let maps: Vec<Tensor<f32>> = frames
        .iter()
        .map(|f| {
            let m = input_map(f, cfg)?;
            let (c, h, w) = m.dim();
            Tensor::new(&[c, h, w], m.into_iter().collect())
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&maps)
}

/// Keypoints of every frame of one video, with `pixels` in the raw frame's
/// coordinates. `correction` subtracts the sequence's reference frame first;
/// the model is untouched either way.
pub fn detect_video(
    model: &TransporterModel<f32>,
    frames: &[Array2<f32>],
    cfg: &RtfpmConfig,
    correction: Option<Reference>,
    batch: usize,
) -> Result<Vec<FrameKeypoints>> {
    let corrected;
    let frames = match correction {
        Some(how) => {
            corrected = frame_average_correct(frames, how)?;
            &corrected[..]
        }
        None => frames,
    };
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(batch.max(1)) {
        let x = input_batch(chunk, cfg)?;
        for (f, mut kp) in chunk.iter().zip(detect(model, &x)?) {
            let (h, w) = f.dim();
            kp.pixels = kp.coords.iter().map(|c| [to_pixel(c[0], w), to_pixel(c[1], h)]).collect();
            out.push(kp);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub video: String,
    pub frame: usize,
    pub vector: Vec<f32>,
    pub label: Option<String>,
}

/// Channel means of the encoder features of each frame of `batch`.
pub fn pooled_features(model: &TransporterModel<f32>, batch: &Tensor<f32>) -> Result<Vec<Vec<f32>>> {
    let psi = encode(model, batch)?;
    let s = psi.shape();
    let hw = s[2] * s[3];
    Ok((0..s[0])
        .map(|i| {
            (0..s[1])
                .map(|c| {
                    let off = (i * s[1] + c) * hw;
                    let sum: f64 = psi.data()[off..off + hw].iter().map(|&v| v as f64).sum();
                    (sum / hw as f64) as f32
                })
                .collect()
        })
        .collect())
}

/// Embedding records for the frames of one video.
pub fn embed_video(
    model: &TransporterModel<f32>,
    video: &str,
    frames: &[(usize, Array2<f32>)],
    label: Option<&str>,
    cfg: &RtfpmConfig,
    batch: usize,
) -> Result<Vec<EmbeddingRecord>> {
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(batch.max(1)) {
        let imgs: Vec<Array2<f32>> = chunk.iter().map(|(_, f)| f.clone()).collect();
        let vecs = pooled_features(model, &input_batch(&imgs, cfg)?)?;
        for ((idx, _), v) in chunk.iter().zip(vecs) {
            out.push(EmbeddingRecord {
                video: video.to_string(),
                frame: *idx,
                vector: v,
                label: label.map(str::to_string),
            });
        }
    }
    Ok(out)
}
