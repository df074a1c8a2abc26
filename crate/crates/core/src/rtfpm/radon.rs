//! Pixel-driven Radon transform and angle-restricted backprojection.
//!
//! Geometry: pixel `(row, col)` sits at `x = col - c`, `y = row - c` with
//! `c = floor(n / 2)`, and projects onto `rho = x cos(theta) + y sin(theta)`.
//! At `theta = 0` the projection therefore sums columns, and backprojecting
//! angles near 0 smears along columns, which rebuilds vertical structure.

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Union of closed angle intervals in degrees within `[0, 180]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngleBand {
    pub intervals: Vec<(f64, f64)>,
}

impl AngleBand {
    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self> {
        let b = AngleBand { intervals };
        b.validate()?;
        Ok(b)
    }

    /// Angles that rebuild vertical edges.
    pub fn vertical() -> Self {
        AngleBand {
            intervals: vec![(0.0, 30.0), (150.0, 180.0)],
        }
    }

    /// Angles that rebuild horizontal edges.
    pub fn horizontal() -> Self {
        AngleBand {
            intervals: vec![(65.0, 115.0)],
        }
    }

    pub fn full() -> Self {
        AngleBand {
            intervals: vec![(0.0, 180.0)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &(lo, hi) in &self.intervals {
            if !(0.0..=180.0).contains(&lo) || !(0.0..=180.0).contains(&hi) || lo > hi {
                return Err(Error::InvalidArgument(format!(
                    "angle interval [{lo}, {hi}] outside 0 <= lo <= hi <= 180"
                )));
            }
        }
        let mut sorted = self.intervals.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        if sorted.windows(2).any(|w| w[1].0 <= w[0].1) {
            return Err(Error::InvalidArgument(format!(
                "angle intervals overlap: {:?}",
                self.intervals
            )));
        }
        Ok(())
    }

    pub fn contains(&self, deg: f64) -> bool {
        self.intervals.iter().any(|&(lo, hi)| lo <= deg && deg <= hi)
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }
}

/// Sinogram `R(rho, theta)`: one row per angle, `n_rho` unit-width bins per
/// row with bin `n_rho / 2` at `rho = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub angles: Vec<f64>,
    pub image_size: usize,
    pub data: Array2<f64>,
}

impl Sinogram {
    pub fn n_rho(&self) -> usize {
        self.data.ncols()
    }

    pub fn rho_center(&self) -> usize {
        self.data.ncols() / 2
    }
}

/// `0, step, 2 step, ...` below 180 degrees.
pub fn angle_grid(step_deg: f64) -> Vec<f64> {
    let n = (180.0 / step_deg).round() as usize;
    (0..n).map(|i| i as f64 * step_deg).collect()
}

/// `(cos, sin)` with exact values on multiples of 90 degrees so axis-aligned
/// projections do not pick up rounding leakage into neighbouring bins.
fn cos_sin(deg: f64) -> (f64, f64) {
    if deg.rem_euclid(90.0) == 0.0 {
        match (deg.rem_euclid(360.0) / 90.0) as u32 {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = deg.to_radians();
        (r.cos(), r.sin())
    }
}

fn n_rho_for(n: usize) -> usize {
    let c = (n / 2) as f64;
    2 * ((c + 1.0) * std::f64::consts::SQRT_2).ceil() as usize + 3
}

pub fn radon(image: &Array2<f64>, angles: &[f64]) -> Result<Sinogram> {
    let (h, w) = image.dim();
    if h != w {
        return Err(Error::dim("radon", format!("image must be square, got {h}x{w}")));
    }
    if angles.is_empty() {
        return Err(Error::InvalidArgument("radon: empty angle list".into()));
    }
    if let Some(a) = angles.iter().find(|a| !(0.0..180.0).contains(*a)) {
        return Err(Error::InvalidArgument(format!("radon: angle {a} outside [0, 180)")));
    }
    let n = h;
    let c = (n / 2) as f64;
    let n_rho = n_rho_for(n);
    let r0 = (n_rho / 2) as f64;
    let mut data = Array2::<f64>::zeros((angles.len(), n_rho));
    for (ai, &deg) in angles.iter().enumerate() {
        let (ct, st) = cos_sin(deg);
        let mut row = data.row_mut(ai);
        let row = row.as_slice_mut().expect("contiguous");
        for r in 0..n {
            let y = r as f64 - c;
            for col in 0..n {
                let v = image[(r, col)];
                if v == 0.0 {
                    continue;
                }
                let pos = (col as f64 - c) * ct + y * st + r0;
                let lo = pos.floor();
                let frac = pos - lo;
                let i = lo as usize;
                row[i] += v * (1.0 - frac);
                if frac > 0.0 {
                    row[i + 1] += v * frac;
                }
            }
        }
    }
    Ok(Sinogram {
        angles: angles.to_vec(),
        image_size: n,
        data,
    })
}

fn ramp_filter(row: &[f64]) -> Vec<f64> {
    let n = row.len();
    let m = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);
    let mut buf: Vec<Complex64> = (0..m)
        .map(|i| Complex64::new(if i < n { row[i] } else { 0.0 }, 0.0))
        .collect();
    fwd.process(&mut buf);
    for (i, b) in buf.iter_mut().enumerate() {
        *b *= super::fft::freq(i, m).abs();
    }
    inv.process(&mut buf);
    buf[..n].iter().map(|c| c.re / m as f64).collect()
}

/// Min-max rescale to `[0, 1]`; constant images map to zero.
pub fn normalize(img: &mut Array2<f64>) {
    let (lo, hi) = img
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        img.fill(0.0);
        return;
    }
    let span = hi - lo;
    img.mapv_inplace(|v| (v - lo) / span);
}

/// Unfiltered backprojection over the sinogram angles inside `band`,
/// min-max normalized. `ramp` applies a ramp filter per projection first.
pub fn controlled_iradon(sino: &Sinogram, band: &AngleBand, ramp: bool) -> Result<Array2<f64>> {
    band.validate()?;
    let n = sino.image_size;
    let mut out = Array2::<f64>::zeros((n, n));
    let selected: Vec<usize> = (0..sino.angles.len())
        .filter(|&i| band.contains(sino.angles[i]))
        .collect();
    if selected.is_empty() {
        if band.is_empty() {
            log::warn!("controlled backprojection over an empty angle band");
        } else {
            log::warn!("no sinogram angle falls inside band {:?}", band.intervals);
        }
        return Ok(out);
    }
    let c = (n / 2) as f64;
    let r0 = sino.rho_center() as f64;
    let last = sino.n_rho() - 1;
    let dtheta = std::f64::consts::PI / 180.0;
    for &ai in &selected {
        let proj: Vec<f64> = if ramp {
            ramp_filter(sino.data.row(ai).as_slice().expect("contiguous"))
        } else {
            sino.data.row(ai).to_vec()
        };
        let (ct, st) = cos_sin(sino.angles[ai]);
        for r in 0..n {
            let y = r as f64 - c;
            for col in 0..n {
                let pos = (col as f64 - c) * ct + y * st + r0;
                let lo = pos.floor();
                let frac = pos - lo;
                let i = lo as usize;
                let v = if i >= last {
                    proj[last]
                } else {
                    proj[i] * (1.0 - frac) + proj[i + 1] * frac
                };
                out[(r, col)] += v * dtheta;
            }
        }
    }
    normalize(&mut out);
    Ok(out)
}

/// `normalize(iradon_band(radon(f))) * f` on a DGA-compensated frame.
pub fn enhance_orientation(frame_dga: &Array2<f64>, band: &AngleBand, angles: &[f64], ramp: bool) -> Result<Array2<f64>> {
    let sino = radon(frame_dga, angles)?;
    let ir = controlled_iradon(&sino, band, ramp)?;
    Ok(ir * frame_dga)
}

/// Mean squared value of `img` over the pixels where `mask` is set.
pub fn support_energy(img: &Array2<f64>, mask: &Array2<bool>) -> f64 {
    let (sum, n) = img
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Support energies of both enhanced images over a horizontal and a vertical
/// pattern sharing one frame.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Selectivity {
    /// `[horizontal pattern, vertical pattern]` under the horizontal band.
    pub horizontal_band: [f64; 2],
    /// Same supports under the vertical band.
    pub vertical_band: [f64; 2],
}

impl Selectivity {
    /// Horizontal-band energy on the horizontal pattern over the vertical one.
    pub fn horizontal_ratio(&self) -> f64 {
        self.horizontal_band[0] / self.horizontal_band[1]
    }

    pub fn vertical_ratio(&self) -> f64 {
        self.vertical_band[1] / self.vertical_band[0]
    }
}

pub fn orientation_selectivity(
    frame_dga: &Array2<f64>,
    horizontal_support: &Array2<bool>,
    vertical_support: &Array2<bool>,
    angles: &[f64],
    ramp: bool,
) -> Result<Selectivity> {
    let eh = enhance_orientation(frame_dga, &AngleBand::horizontal(), angles, ramp)?;
    let ev = enhance_orientation(frame_dga, &AngleBand::vertical(), angles, ramp)?;
    Ok(Selectivity {
        horizontal_band: [support_energy(&eh, horizontal_support), support_energy(&eh, vertical_support)],
        vertical_band: [support_energy(&ev, horizontal_support), support_energy(&ev, vertical_support)],
    })
}
