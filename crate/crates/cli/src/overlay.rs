//! PNG overlays of keypoints on frames.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use sonokey::transporter::FrameKeypoints;
use sonokey::{Error, Result};

const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
];

/// The frame in gray with one filled disc per keypoint. The disc radius is
/// the keypoint's Gaussian width in frame pixels, at least 1.5.
pub fn render(frame: &Array2<f32>, kps: &FrameKeypoints) -> RgbImage {
    let (h, w) = frame.dim();
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = sonokey::io::quantize(frame[(y as usize, x as usize)]);
        Rgb([v, v, v])
    });
    for (j, p) in kps.pixels.iter().enumerate() {
        let r = (kps.sigma[j] * (w as f64 - 1.0) / 2.0).max(1.5);
        let color = Rgb(PALETTE[j % PALETTE.len()]);
        let (x0, x1) = ((p[0] - r).floor().max(0.0) as u32, (p[0] + r).ceil().min(w as f64 - 1.0) as u32);
        let (y0, y1) = ((p[1] - r).floor().max(0.0) as u32, (p[1] + r).ceil().min(h as f64 - 1.0) as u32);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if (x as f64 - p[0]).powi(2) + (y as f64 - p[1]).powi(2) <= r * r {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img
}

pub fn save(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}
