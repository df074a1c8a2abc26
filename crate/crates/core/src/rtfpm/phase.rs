//! Log-Gabor bandpass, local phase tensor, monogenic signal and the
//! phase / symmetry / backscatter maps combined into a probability map.

use std::f64::consts::{FRAC_PI_2, PI};

use ndarray::Array2;
use rustfft::num_complex::Complex64;

use super::fft;
use crate::error::{Error, Result};

/// Radial log-Gabor gain at angular frequency `omega` (radians per pixel).
/// `G(0) = 0`.
pub fn log_gabor_gain(omega: f64, lambda0: f64, sigma0: f64) -> f64 {
    let omega = omega.abs();
    if omega == 0.0 {
        return 0.0;
    }
    let omega0 = 2.0 * PI / lambda0;
    let l = (omega / omega0).ln();
    let s = sigma0.ln();
    (-(l * l) / (2.0 * s * s)).exp()
}

/// Frequency-domain log-Gabor filtering, real part. `lambda0 = 0` is the
/// unfiltered pass-through channel.
pub fn log_gabor_response(image: &Array2<f64>, lambda0: f64, sigma0: f64) -> Result<Array2<f64>> {
    if !(lambda0 >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda0 {lambda0} must be >= 0")));
    }
    if !(sigma0 > 0.0 && sigma0 < 1.0) {
        return Err(Error::InvalidArgument(format!("sigma0 {sigma0} must lie in (0, 1)")));
    }
    if lambda0 == 0.0 {
        return Ok(image.clone());
    }
    let mut spec = fft::forward(image);
    let (rows, cols) = (spec.rows, spec.cols);
    for r in 0..rows {
        let fy = fft::freq(r, rows);
        for c in 0..cols {
            let fx = fft::freq(c, cols);
            let omega = 2.0 * PI * (fx * fx + fy * fy).sqrt();
            spec.data[r * cols + c] *= log_gabor_gain(omega, lambda0, sigma0);
        }
    }
    Ok(fft::inverse_real(spec))
}

/// Scalar even / odd feature strengths and the local phase tensor image.
pub struct LocalPhase {
    pub lpt: Array2<f64>,
    /// Frobenius norm of `H H^T`, scaled with `t_odd` by a shared per-image
    /// maximum so both lie in `[0, 1]`.
    pub t_even: Array2<f64>,
    /// Frobenius norm of `-0.5 (g l^T + l g^T)` with `g` the gradient and
    /// `l` the gradient of the Laplacian.
    pub t_odd: Array2<f64>,
}

fn at(img: &Array2<f64>, r: isize, c: isize) -> f64 {
    let (h, w) = img.dim();
    img[(r.clamp(0, h as isize - 1) as usize, c.clamp(0, w as isize - 1) as usize)]
}

/// Central-difference derivatives with replicated borders.
pub(crate) struct Derivs {
    pub ix: f64,
    pub iy: f64,
    pub ixx: f64,
    pub iyy: f64,
    pub ixy: f64,
}

pub(crate) fn derivs(img: &Array2<f64>, r: usize, c: usize) -> Derivs {
    let (r, c) = (r as isize, c as isize);
    let v = at(img, r, c);
    Derivs {
        ix: 0.5 * (at(img, r, c + 1) - at(img, r, c - 1)),
        iy: 0.5 * (at(img, r + 1, c) - at(img, r - 1, c)),
        ixx: at(img, r, c + 1) - 2.0 * v + at(img, r, c - 1),
        iyy: at(img, r + 1, c) - 2.0 * v + at(img, r - 1, c),
        ixy: 0.25
            * (at(img, r + 1, c + 1) - at(img, r + 1, c - 1) - at(img, r - 1, c + 1)
                + at(img, r - 1, c - 1)),
    }
}

pub fn local_phase_tensor(bp: &Array2<f64>) -> LocalPhase {
    let (h, w) = bp.dim();
    let mut lap = Array2::<f64>::zeros((h, w));
    let mut te = Array2::<f64>::zeros((h, w));
    let mut grads = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let d = derivs(bp, r, c);
            lap[(r, c)] = d.ixx + d.iyy;
            // H H^T for symmetric H = [[a, b], [b, d]].
            let (a, b, dd) = (d.ixx, d.ixy, d.iyy);
            let e11 = a * a + b * b;
            let e12 = a * b + b * dd;
            let e22 = b * b + dd * dd;
            te[(r, c)] = (e11 * e11 + 2.0 * e12 * e12 + e22 * e22).sqrt();
            grads.push((d.ix, d.iy));
        }
    }
    let mut to = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let (ri, ci) = (r as isize, c as isize);
            let lx = 0.5 * (at(&lap, ri, ci + 1) - at(&lap, ri, ci - 1));
            let ly = 0.5 * (at(&lap, ri + 1, ci) - at(&lap, ri - 1, ci));
            let (gx, gy) = grads[r * w + c];
            let o11 = -0.5 * (2.0 * gx * lx);
            let o12 = -0.5 * (gx * ly + lx * gy);
            let o22 = -0.5 * (2.0 * gy * ly);
            to[(r, c)] = (o11 * o11 + 2.0 * o12 * o12 + o22 * o22).sqrt();
        }
    }
    let scale = te.iter().chain(to.iter()).fold(0.0f64, |m, &v| m.max(v));
    if scale > 0.0 {
        te.mapv_inplace(|v| v / scale);
        to.mapv_inplace(|v| v / scale);
    }
    let mut lpt = Array2::<f64>::zeros((h, w));
    for ((l, &e), &o) in lpt.iter_mut().zip(te.iter()).zip(to.iter()) {
        let phi = o.sqrt().atan2(e.sqrt());
        *l = (e * e + o * o).sqrt() * phi.cos();
    }
    LocalPhase {
        lpt,
        t_even: te,
        t_odd: to,
    }
}

/// `(M1, M2, M3)`: the input and its Riesz pair, computed with the
/// frequency kernels `-i u / |w|` and `-i v / |w|` (zero at DC).
pub fn monogenic(lpt: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let spec = fft::forward(lpt);
    let (rows, cols) = (spec.rows, spec.cols);
    let mut s2 = fft::Spectrum {
        rows,
        cols,
        data: spec.data.clone(),
    };
    let mut s3 = spec;
    for r in 0..rows {
        let v = fft::freq(r, rows);
        for c in 0..cols {
            let u = fft::freq(c, cols);
            let norm = (u * u + v * v).sqrt();
            let i = r * cols + c;
            if norm == 0.0 {
                s2.data[i] = Complex64::new(0.0, 0.0);
                s3.data[i] = Complex64::new(0.0, 0.0);
            } else {
                s2.data[i] *= Complex64::new(0.0, -u / norm);
                s3.data[i] *= Complex64::new(0.0, -v / norm);
            }
        }
    }
    (lpt.clone(), fft::inverse_real(s2), fft::inverse_real(s3))
}

/// `q`-quantile by linear interpolation between order statistics.
pub fn percentile(values: &Array2<f64>, q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub const FS_EPS: f64 = 1e-8;

/// Local phase `LP`, feature symmetry `FS` and integrated backscatter `IBS`,
/// each in `[0, 1]`.
///
/// `LP = 1 - atan(sqrt(M2^2 + M3^2) / M1)` lies in `(1 - pi/2, 1 + pi/2)`
/// and is shifted and scaled onto `[0, 1]`. `IBS` is the running sum of
/// `image^2` down each column divided by that column's total.
pub fn lp_fs_ibs(
    m: (&Array2<f64>, &Array2<f64>, &Array2<f64>),
    t_even: &Array2<f64>,
    t_odd: &Array2<f64>,
    image: &Array2<f64>,
    tau: f64,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau {tau} must be finite and >= 0")));
    }
    let (m1, m2, m3) = m;
    let dim = m1.dim();
    if m2.dim() != dim || m3.dim() != dim || t_even.dim() != dim || t_odd.dim() != dim || image.dim() != dim {
        return Err(Error::dim("lp_fs_ibs", "all maps must share one shape"));
    }
    let mut lp = Array2::<f64>::zeros(dim);
    let mut fs = Array2::<f64>::zeros(dim);
    for (idx, l) in lp.indexed_iter_mut() {
        let (a, b, c) = (m1[idx], m2[idx], m3[idx]);
        let odd = (b * b + c * c).sqrt();
        let angle = if a == 0.0 {
            if odd == 0.0 {
                0.0
            } else {
                FRAC_PI_2
            }
        } else {
            (odd / a).atan()
        };
        let raw = 1.0 - angle;
        *l = ((raw - (1.0 - FRAC_PI_2)) / PI).clamp(0.0, 1.0);
        let num = (t_even[idx] - t_odd[idx] - tau).max(0.0);
        fs[idx] = (num / (a * a + b * b + c * c + FS_EPS)).clamp(0.0, 1.0);
    }
    Ok((lp, fs, integrated_backscatter(image)))
}

pub fn integrated_backscatter(image: &Array2<f64>) -> Array2<f64> {
    let (h, w) = image.dim();
    let mut ibs = Array2::<f64>::zeros((h, w));
    for c in 0..w {
        let mut acc = 0.0;
        for r in 0..h {
            acc += image[(r, c)] * image[(r, c)];
            ibs[(r, c)] = acc;
        }
        if acc > 0.0 {
            for r in 0..h {
                ibs[(r, c)] = (ibs[(r, c)] / acc).min(1.0);
            }
        }
    }
    ibs
}
