//! Keypoint specificity (SP) and sensitivity (SN) against landmark masks.

use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default detection radius at 256 px; scale with the frame side.
pub const DEFAULT_RADIUS_256: f64 = 8.0;

/// 4-connected components of a binary mask; each is a list of `(row, col)`.
pub fn components(mask: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if !mask[(r0, c0)] || seen[(r0, c0)] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(r0, c0)]);
            seen[(r0, c0)] = true;
            while let Some((r, c)) = queue.pop_front() {
                comp.push((r, c));
                let mut visit = |rr: usize, cc: usize| {
                    if mask[(rr, cc)] && !seen[(rr, cc)] {
                        seen[(rr, cc)] = true;
                        queue.push_back((rr, cc));
                    }
                };
                if r > 0 {
                    visit(r - 1, c);
                }
                if r + 1 < h {
                    visit(r + 1, c);
                }
                if c > 0 {
                    visit(r, c - 1);
                }
                if c + 1 < w {
                    visit(r, c + 1);
                }
            }
            out.push(comp);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub keypoints: usize,
    pub detecting: usize,
    pub components: usize,
    pub detected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub radius_px: f64,
    /// Mean over frames of the per-frame fractions.
    pub sp: f64,
    /// `None` when no frame has a landmark.
    pub sn: Option<f64>,
    /// Ratios of counts summed over all frames.
    pub sp_pooled: f64,
    pub sn_pooled: Option<f64>,
    pub frames: Vec<FrameScore>,
}

/// Squared distance from `(x, y)` to pixel `(row, col)`, whose centre sits at
/// `x = col, y = row`.
fn dist2(p: (f64, f64), rc: (usize, usize)) -> f64 {
    (p.0 - rc.1 as f64).powi(2) + (p.1 - rc.0 as f64).powi(2)
}

/// A keypoint detects a landmark when some pixel of the landmark lies within
/// `radius` of it. `keypoints[f]` holds `(x, y)` pixels of frame `f`.
pub fn sp_sn(keypoints: &[Vec<(f64, f64)>], masks: &[Array2<bool>], radius: f64) -> Result<EvalReport> {
    if !(radius >= 0.0) {
        return Err(Error::InvalidArgument(format!("radius {radius} must be >= 0")));
    }
    if keypoints.len() != masks.len() {
        return Err(Error::dim(
            "sp_sn",
            format!("{} keypoint frames vs {} masks", keypoints.len(), masks.len()),
        ));
    }
    if masks.is_empty() {
        return Err(Error::InsufficientData("sp_sn: no frames".into()));
    }
    let r2 = radius * radius;
    let mut frames = Vec::with_capacity(masks.len());
    for (kps, mask) in keypoints.iter().zip(masks) {
        let comps = components(mask);
        // hit[k][c]: keypoint k reaches component c.
        let hit: Vec<Vec<bool>> = kps
            .iter()
            .map(|&p| comps.iter().map(|c| c.iter().any(|&rc| dist2(p, rc) <= r2)).collect())
            .collect();
        frames.push(FrameScore {
            keypoints: kps.len(),
            detecting: hit.iter().filter(|h| h.iter().any(|&b| b)).count(),
            components: comps.len(),
            detected: (0..comps.len()).filter(|&c| hit.iter().any(|h| h[c])).count(),
        });
    }
    let ratio = |a: usize, b: usize| a as f64 / b as f64;
    let with_kp: Vec<&FrameScore> = frames.iter().filter(|f| f.keypoints > 0).collect();
    let with_lm: Vec<&FrameScore> = frames.iter().filter(|f| f.components > 0).collect();
    let sp = if with_kp.is_empty() {
        0.0
    } else {
        with_kp.iter().map(|f| ratio(f.detecting, f.keypoints)).sum::<f64>() / with_kp.len() as f64
    };
    let sn = (!with_lm.is_empty())
        .then(|| with_lm.iter().map(|f| ratio(f.detected, f.components)).sum::<f64>() / with_lm.len() as f64);
    let total = |g: fn(&FrameScore) -> usize| frames.iter().map(g).sum::<usize>();
    let (nk, nd, nc, nh) = (total(|f| f.keypoints), total(|f| f.detecting), total(|f| f.components), total(|f| f.detected));
    Ok(EvalReport {
        radius_px: radius,
        sp,
        sn,
        sp_pooled: if nk == 0 { 0.0 } else { ratio(nd, nk) },
        sn_pooled: (nc > 0).then(|| ratio(nh, nc)),
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Array2<bool> {
        let mut m = Array2::from_elem((h, w), false);
        for &p in on {
            m[p] = true;
        }
        m
    }

    #[test]
    fn four_connectivity_splits_diagonals() {
        let m = mask(4, 4, &[(0, 0), (1, 1), (1, 2), (3, 3)]);
        let mut sizes: Vec<usize> = components(&m).iter().map(|c| c.len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![1, 1, 2]);
    }

    #[test]
    fn keypoints_inside_the_only_landmark() {
        let m = mask(10, 10, &[(4, 4), (4, 5), (5, 4), (5, 5)]);
        let r = sp_sn(&[vec![(4.0, 4.0), (5.0, 5.0)]], &[m], 0.0).unwrap();
        assert_eq!((r.sp, r.sn), (1.0, Some(1.0)));
    }

    #[test]
    fn half_the_landmarks_found() {
        let m = mask(20, 20, &[(2, 2), (15, 15)]);
        let r = sp_sn(&[vec![(2.0, 3.0)]], &[m], 2.0).unwrap();
        assert_eq!(r.sn, Some(0.5));
        assert_eq!(r.sp, 1.0);
    }

    #[test]
    fn empty_masks_give_no_sensitivity() {
        let m = mask(5, 5, &[]);
        let r = sp_sn(&[vec![(1.0, 1.0)]], &[m], 3.0).unwrap();
        assert_eq!(r.sn, None);
        assert_eq!(r.sn_pooled, None);
        assert_eq!(r.sp, 0.0);
    }
}
