//! Removal of static content by subtracting the per-pixel median (or mean)
//! frame of a sequence.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    #[default]
    Median,
    Mean,
}

/// Per-pixel reference frame. The median of an even count is the mean of
/// the two middle values.
pub fn reference_frame(frames: &[Array2<f32>], how: Reference) -> Result<Array2<f32>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InsufficientData("reference frame of an empty sequence".into()))?;
    if frames.iter().any(|f| f.dim() != first.dim()) {
        return Err(Error::dim("reference_frame", "frames differ in size"));
    }
    let n = frames.len();
    let mut column = vec![0.0f32; n];
    Ok(Array2::from_shape_fn(first.dim(), |ix| {
        for (c, f) in column.iter_mut().zip(frames) {
            *c = f[ix];
        }
        match how {
            Reference::Mean => (column.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32,
            Reference::Median => {
                column.sort_by(f32::total_cmp);
                if n % 2 == 1 {
                    column[n / 2]
                } else {
                    0.5 * (column[n / 2 - 1] + column[n / 2])
                }
            }
        }
    }))
}

/// `clamp(frame - reference, 0, 1)` for every frame; needs at least three.
pub fn frame_average_correct(frames: &[Array2<f32>], how: Reference) -> Result<Vec<Array2<f32>>> {
    if frames.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "frame-average correction needs at least 3 frames, got {}",
            frames.len()
        )));
    }
    let r = reference_frame(frames, how)?;
    Ok(frames
        .iter()
        .map(|f| {
            let mut out = f - &r;
            out.mapv_inplace(|v| v.clamp(0.0, 1.0));
            out
        })
        .collect())
}
