//! 2-D FFT over row-major real images.

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

pub(crate) struct Spectrum {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

fn transform_2d(data: &mut [Complex64], rows: usize, cols: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
    } else {
        (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
    };
    for row in data.chunks_mut(cols) {
        row_fft.process(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }
}

pub(crate) fn forward(image: &Array2<f64>) -> Spectrum {
    let (rows, cols) = image.dim();
    let mut data: Vec<Complex64> = image.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_2d(&mut data, rows, cols, false);
    Spectrum { rows, cols, data }
}

/// Inverse transform, keeping the real part.
pub(crate) fn inverse_real(mut s: Spectrum) -> Array2<f64> {
    transform_2d(&mut s.data, s.rows, s.cols, true);
    let scale = 1.0 / (s.rows * s.cols) as f64;
    Array2::from_shape_vec((s.rows, s.cols), s.data.iter().map(|c| c.re * scale).collect())
        .expect("spectrum size matches image")
}

/// Signed frequency in cycles per sample for FFT bin `i` of `n`.
pub(crate) fn freq(i: usize, n: usize) -> f64 {
    let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
    k / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = Array2::from_shape_fn((6, 5), |(r, c)| (r * 5 + c) as f64 * 0.37 - 2.0);
        let back = inverse_real(forward(&img));
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frequency_layout() {
        assert_eq!(freq(0, 8), 0.0);
        assert_eq!(freq(4, 8), 0.5);
        assert_eq!(freq(5, 8), -0.375);
    }
}
