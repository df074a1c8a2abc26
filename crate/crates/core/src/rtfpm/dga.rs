//! Depth-dependent attenuation mask.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// `chi(d) = 1 - exp(-a d) / max(exp(-a d))` over depth `d` in `[0, 1]`
/// (row 0 is depth 0). With `flip`, row order is reversed so the deep end is
/// suppressed instead of the shallow one.
pub fn dga_mask(height: usize, a: f64, flip: bool) -> Result<Array1<f64>> {
    if height < 2 {
        return Err(Error::InvalidArgument(format!("dga_mask: height {height} < 2")));
    }
    if !(a >= 0.0) {
        return Err(Error::InvalidArgument(format!("dga_mask: attenuation {a} must be >= 0")));
    }
    if a == 0.0 {
        log::warn!("DGA attenuation a = 0 suppresses the whole image");
    }
    // exp(-a d) peaks at d = 0 where it is 1; `a * 0` is NaN for infinite a.
    let decay = |d: f64| if d == 0.0 { 1.0 } else { (-a * d).exp() };
    let mut m: Array1<f64> = (0..height)
        .map(|r| 1.0 - decay(r as f64 / (height - 1) as f64))
        .collect();
    if flip {
        m.as_slice_mut().expect("contiguous").reverse();
    }
    Ok(m)
}

/// Scales row `r` by `mask[r]`.
pub fn apply_dga(frame: &Array2<f64>, mask: &Array1<f64>) -> Result<Array2<f64>> {
    if mask.len() != frame.nrows() {
        return Err(Error::dim(
            "apply_dga",
            format!("mask length {} vs frame height {}", mask.len(), frame.nrows()),
        ));
    }
    let mut out = frame.clone();
    for (mut row, &m) in out.rows_mut().into_iter().zip(mask) {
        row.mapv_inplace(|v| v * m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinite_attenuation_limit() {
        let m = dga_mask(4, f64::INFINITY, false).unwrap();
        assert_eq!(m.to_vec(), vec![0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_attenuation_suppresses_everything() {
        assert!(dga_mask(5, 0.0, false).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_attenuation_values() {
        let m = dga_mask(4, 1.0, false).unwrap();
        let expect = [0.0, 1.0 - (-1.0f64 / 3.0).exp(), 1.0 - (-2.0f64 / 3.0).exp(), 1.0 - (-1.0f64).exp()];
        for (a, b) in m.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((m[1] - 0.2835).abs() < 1e-4 && (m[2] - 0.4866).abs() < 1e-4 && (m[3] - 0.6321).abs() < 1e-4);
    }

    #[test]
    fn flip_reverses() {
        let m = dga_mask(6, 2.0, false).unwrap();
        let f = dga_mask(6, 2.0, true).unwrap();
        assert_eq!(m.iter().rev().copied().collect::<Vec<_>>(), f.to_vec());
    }

    #[test]
    fn apply_on_constant_frame_reproduces_mask() {
        let m = dga_mask(4, 1.0, false).unwrap();
        let out = apply_dga(&Array2::from_elem((4, 3), 1.0), &m).unwrap();
        for c in 0..3 {
            assert_eq!(out.column(c).to_vec(), m.to_vec());
        }
        let ones = Array1::from_elem(4, 1.0);
        let f = Array2::from_shape_fn((4, 3), |(r, c)| (r + c) as f64 / 10.0);
        assert_eq!(apply_dga(&f, &ones).unwrap(), f);
        assert!(apply_dga(&f, &Array1::zeros(4)).unwrap().iter().all(|&v| v == 0.0));
        assert!(apply_dga(&f, &Array1::zeros(3)).is_err());
    }

    #[test]
    fn rejects_short_or_negative() {
        assert!(dga_mask(1, 1.0, false).is_err());
        assert!(dga_mask(4, -1.0, false).is_err());
    }
}
