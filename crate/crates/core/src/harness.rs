//! Synthetic grayscale videos with ground-truth landmark masks and element
//! tracks.
//!
//! Speckle is multiplicative uniform noise `(1 + s u)`, `u ~ U[-1, 1]`; it
//! is not a physical ultrasound model. Frames are quantized to 8 bits so the
//! in-memory video equals what is written to disk.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{dequantize, frame_name, quantize, write_pgm};

/// Minimum distance in pixels between any element and the image border.
pub const BORDER_MARGIN: f64 = 16.0;
/// Required contrast of landmark pixels over the background.
pub const MIN_CONTRAST: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Motion {
    pub amplitude: f64,
    /// Frames per cycle.
    pub period: f64,
    /// Radians.
    #[serde(default)]
    pub phase: f64,
}

impl Motion {
    pub const STILL: Motion = Motion {
        amplitude: 0.0,
        period: 1.0,
        phase: 0.0,
    };

    pub fn offset(&self, t: usize) -> f64 {
        self.amplitude * (2.0 * PI * t as f64 / self.period + self.phase).sin()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Element {
    /// Bright horizontal segment oscillating vertically.
    HorizontalBand {
        y: f64,
        x_start: f64,
        x_end: f64,
        thickness: f64,
        intensity: f64,
        motion: Motion,
        #[serde(default)]
        speckle: f64,
    },
    /// Bright vertical segment oscillating horizontally.
    VerticalStreak {
        x: f64,
        y_start: f64,
        y_end: f64,
        thickness: f64,
        intensity: f64,
        motion: Motion,
        #[serde(default)]
        speckle: f64,
    },
    /// Fixed bright rectangle; an artifact, never a landmark.
    StaticOverlay {
        x_start: f64,
        x_end: f64,
        y_start: f64,
        y_end: f64,
        intensity: f64,
    },
    /// Disc moving on an ellipse.
    MovingBlob {
        x: f64,
        y: f64,
        radius: f64,
        intensity: f64,
        motion_x: Motion,
        motion_y: Motion,
        #[serde(default)]
        speckle: f64,
    },
}

impl Element {
    fn intensity(&self) -> f64 {
        match *self {
            Element::HorizontalBand { intensity, .. }
            | Element::VerticalStreak { intensity, .. }
            | Element::StaticOverlay { intensity, .. }
            | Element::MovingBlob { intensity, .. } => intensity,
        }
    }

    fn speckle(&self) -> f64 {
        match *self {
            Element::HorizontalBand { speckle, .. }
            | Element::VerticalStreak { speckle, .. }
            | Element::MovingBlob { speckle, .. } => speckle,
            Element::StaticOverlay { .. } => 0.0,
        }
    }

    pub fn is_landmark(&self) -> bool {
        !matches!(self, Element::StaticOverlay { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Element::HorizontalBand { .. } => "horizontal_band",
            Element::VerticalStreak { .. } => "vertical_streak",
            Element::StaticOverlay { .. } => "static_overlay",
            Element::MovingBlob { .. } => "moving_blob",
        }
    }

    /// Centroid `(x, y)` at frame `t`.
    pub fn centroid(&self, t: usize) -> (f64, f64) {
        match *self {
            Element::HorizontalBand {
                y, x_start, x_end, motion, ..
            } => (0.5 * (x_start + x_end), y + motion.offset(t)),
            Element::VerticalStreak {
                x, y_start, y_end, motion, ..
            } => (x + motion.offset(t), 0.5 * (y_start + y_end)),
            Element::StaticOverlay {
                x_start,
                x_end,
                y_start,
                y_end,
                ..
            } => (0.5 * (x_start + x_end), 0.5 * (y_start + y_end)),
            Element::MovingBlob {
                x, y, motion_x, motion_y, ..
            } => (x + motion_x.offset(t), y + motion_y.offset(t)),
        }
    }

    /// Whether pixel `(row, col)` lies on the element at frame `t`.
    pub fn covers(&self, t: usize, row: usize, col: usize) -> bool {
        let (r, c) = (row as f64, col as f64);
        match *self {
            Element::HorizontalBand {
                x_start, x_end, thickness, ..
            } => {
                let (_, y) = self.centroid(t);
                (r - y).abs() <= 0.5 * thickness && c >= x_start && c <= x_end
            }
            Element::VerticalStreak {
                y_start, y_end, thickness, ..
            } => {
                let (x, _) = self.centroid(t);
                (c - x).abs() <= 0.5 * thickness && r >= y_start && r <= y_end
            }
            Element::StaticOverlay {
                x_start,
                x_end,
                y_start,
                y_end,
                ..
            } => c >= x_start && c <= x_end && r >= y_start && r <= y_end,
            Element::MovingBlob { radius, .. } => {
                let (x, y) = self.centroid(t);
                (c - x).powi(2) + (r - y).powi(2) <= radius * radius
            }
        }
    }

    /// Bounding box `(x0, x1, y0, y1)` over all frames of the motion.
    fn extent(&self) -> (f64, f64, f64, f64) {
        match *self {
            Element::HorizontalBand {
                y,
                x_start,
                x_end,
                thickness,
                motion,
                ..
            } => {
                let a = motion.amplitude.abs() + 0.5 * thickness;
                (x_start, x_end, y - a, y + a)
            }
            Element::VerticalStreak {
                x,
                y_start,
                y_end,
                thickness,
                motion,
                ..
            } => {
                let a = motion.amplitude.abs() + 0.5 * thickness;
                (x - a, x + a, y_start, y_end)
            }
            Element::StaticOverlay {
                x_start,
                x_end,
                y_start,
                y_end,
                ..
            } => (x_start, x_end, y_start, y_end),
            Element::MovingBlob {
                x,
                y,
                radius,
                motion_x,
                motion_y,
                ..
            } => {
                let ax = motion_x.amplitude.abs() + radius;
                let ay = motion_y.amplitude.abs() + radius;
                (x - ax, x + ax, y - ay, y + ay)
            }
        }
    }

    fn motions(&self) -> Vec<Motion> {
        match *self {
            Element::HorizontalBand { motion, .. } | Element::VerticalStreak { motion, .. } => vec![motion],
            Element::StaticOverlay { .. } => vec![],
            Element::MovingBlob { motion_x, motion_y, .. } => vec![motion_x, motion_y],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default = "default_size")]
    pub size: usize,
    pub n_frames: usize,
    #[serde(default)]
    pub background: f64,
    #[serde(default)]
    pub background_speckle: f64,
    #[serde(default)]
    pub elements: Vec<Element>,
    #[serde(default)]
    pub seed: u64,
}

fn default_size() -> usize {
    256
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("scene: {m}")));
        if self.n_frames == 0 {
            return bad("n_frames must be >= 1".into());
        }
        if (self.size as f64) < 2.0 * BORDER_MARGIN + 2.0 {
            return bad(format!("size {} leaves no room inside the border margin", self.size));
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.background) || !unit.contains(&self.background_speckle) {
            return bad("background and background_speckle must lie in [0, 1]".into());
        }
        let bg_max = (self.background * (1.0 + self.background_speckle)).min(1.0);
        let hi = self.size as f64 - 1.0 - BORDER_MARGIN;
        for (i, e) in self.elements.iter().enumerate() {
            let (int, sp) = (e.intensity(), e.speckle());
            if !unit.contains(&int) || !unit.contains(&sp) {
                return bad(format!("element {i}: intensity and speckle must lie in [0, 1]"));
            }
            if e.is_landmark() && int * (1.0 - sp) < bg_max + MIN_CONTRAST + 1.0 / 255.0 {
                return bad(format!(
                    "element {i}: darkest landmark value {:.3} is not {MIN_CONTRAST} above the brightest background {bg_max:.3}",
                    int * (1.0 - sp)
                ));
            }
            if e.motions().iter().any(|m| m.amplitude != 0.0 && !(m.period > 0.0)) {
                return bad(format!("element {i}: moving elements need a positive period"));
            }
            let (x0, x1, y0, y1) = e.extent();
            if x0 < BORDER_MARGIN || y0 < BORDER_MARGIN || x1 > hi || y1 > hi || x0 > x1 || y0 > y1 {
                return bad(format!(
                    "element {i} ({}) spans x [{x0:.1}, {x1:.1}] y [{y0:.1}, {y1:.1}], outside the {BORDER_MARGIN} px margin of a {} px frame",
                    e.name(),
                    self.size
                ));
            }
        }
        Ok(())
    }
}

/// Per-frame centroids of every landmark element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tracks {
    pub elements: Vec<String>,
    /// `points[frame][element] = [x, y]` in pixels.
    pub points: Vec<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub frames: Vec<Array2<f32>>,
    pub masks: Vec<Array2<bool>>,
    pub tracks: Tracks,
}

fn render_frame(spec: &SceneSpec, t: usize) -> (Array2<f32>, Array2<bool>) {
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut img = Array2::<f64>::zeros((n, n));
    for v in img.iter_mut() {
        let u: f64 = rng.random_range(-1.0..=1.0);
        *v = spec.background * (1.0 + spec.background_speckle * u);
    }
    let mut mask = Array2::from_elem((n, n), false);
    for e in &spec.elements {
        let (int, sp) = (e.intensity(), e.speckle());
        for r in 0..n {
            for c in 0..n {
                if !e.covers(t, r, c) {
                    continue;
                }
                let u: f64 = rng.random_range(-1.0..=1.0);
                let v = int * (1.0 + sp * u);
                img[(r, c)] = img[(r, c)].max(v);
                if e.is_landmark() {
                    mask[(r, c)] = true;
                }
            }
        }
    }
    let frame = img.mapv(|v| dequantize(quantize(v as f32)));
    (frame, mask)
}

pub fn generate(spec: &SceneSpec) -> Result<SyntheticVideo> {
    spec.validate()?;
    let mut frames = Vec::with_capacity(spec.n_frames);
    let mut masks = Vec::with_capacity(spec.n_frames);
    for t in 0..spec.n_frames {
        let (f, m) = render_frame(spec, t);
        frames.push(f);
        masks.push(m);
    }
    let landmarks: Vec<&Element> = spec.elements.iter().filter(|e| e.is_landmark()).collect();
    let tracks = Tracks {
        elements: landmarks.iter().map(|e| e.name().to_string()).collect(),
        points: (0..spec.n_frames)
            .map(|t| {
                landmarks
                    .iter()
                    .map(|e| {
                        let (x, y) = e.centroid(t);
                        [x, y]
                    })
                    .collect()
            })
            .collect(),
    };
    Ok(SyntheticVideo { frames, masks, tracks })
}

/// Mean over frames and track points of the distance from each track point
/// to its nearest keypoint. `keypoints[frame]` lists `(x, y)` pixels.
pub fn oracle_score(tracks: &Tracks, keypoints: &[Vec<(f64, f64)>]) -> Result<f64> {
    if tracks.points.len() != keypoints.len() {
        return Err(Error::dim(
            "oracle_score",
            format!("{} track frames vs {} keypoint frames", tracks.points.len(), keypoints.len()),
        ));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (pts, kps) in tracks.points.iter().zip(keypoints) {
        if pts.is_empty() {
            continue;
        }
        if kps.is_empty() {
            return Err(Error::InvalidArgument("oracle_score: frame without keypoints".into()));
        }
        for p in pts {
            let d = kps
                .iter()
                .map(|&(x, y)| ((x - p[0]).powi(2) + (y - p[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            sum += d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InsufficientData("oracle_score: no track points".into()));
    }
    Ok(sum / count as f64)
}

/// Writes frames, masks and tracks of one video in the dataset layout.
pub fn write_video(root: &Path, video: &str, v: &SyntheticVideo) -> Result<()> {
    let fdir = root.join("videos").join(video);
    let mdir = root.join("masks").join(video);
    let tdir = root.join("tracks");
    for d in [&fdir, &mdir, &tdir] {
        fs::create_dir_all(d).map_err(Error::io(d))?;
    }
    for (i, (f, m)) in v.frames.iter().zip(&v.masks).enumerate() {
        write_pgm(&fdir.join(frame_name(i)), f)?;
        write_pgm(&mdir.join(frame_name(i)), &m.mapv(|b| if b { 1.0 } else { 0.0 }))?;
    }
    let p = tdir.join(format!("{video}.json"));
    fs::write(&p, serde_json::to_vec(&v.tracks)?).map_err(Error::io(&p))
}

/// Scene families used by the examples and acceptance checks, all scaled to
/// a `size`-pixel frame.
pub mod scenes {
    use super::*;

    fn s(size: usize, v: f64) -> f64 {
        v * size as f64 / 128.0
    }

    /// Oscillating horizontal band above two swaying vertical streaks, plus
    /// a static bright rectangle in the lower right.
    pub fn band_streaks_overlay(size: usize, n_frames: usize, seed: u64) -> SceneSpec {
        let sp = |v| s(size, v);
        SceneSpec {
            size,
            n_frames,
            background: 0.1,
            background_speckle: 0.5,
            seed,
            elements: vec![
                Element::HorizontalBand {
                    y: sp(40.0),
                    x_start: sp(24.0),
                    x_end: sp(104.0),
                    thickness: sp(5.0),
                    intensity: 0.9,
                    motion: Motion {
                        amplitude: sp(8.0),
                        period: 24.0,
                        phase: 0.0,
                    },
                    speckle: 0.15,
                },
                Element::VerticalStreak {
                    x: sp(44.0),
                    y_start: sp(62.0),
                    y_end: sp(104.0),
                    thickness: sp(4.0),
                    intensity: 0.8,
                    motion: Motion {
                        amplitude: sp(6.0),
                        period: 32.0,
                        phase: 0.0,
                    },
                    speckle: 0.15,
                },
                Element::VerticalStreak {
                    x: sp(78.0),
                    y_start: sp(62.0),
                    y_end: sp(104.0),
                    thickness: sp(4.0),
                    intensity: 0.8,
                    motion: Motion {
                        amplitude: sp(6.0),
                        period: 32.0,
                        phase: PI,
                    },
                    speckle: 0.15,
                },
                Element::StaticOverlay {
                    x_start: sp(94.0),
                    x_end: sp(108.0),
                    y_start: sp(90.0),
                    y_end: sp(108.0),
                    intensity: 1.0,
                },
            ],
        }
    }

    /// Still horizontal band above a still vertical streak: the two
    /// orientation test patterns, in one frame so they compete for the
    /// backprojection's normalization. `speckle` scales the background.
    pub fn orientation_pair(size: usize, background: f64, speckle: f64, seed: u64) -> SceneSpec {
        SceneSpec {
            size,
            n_frames: 1,
            background,
            background_speckle: speckle,
            seed,
            elements: vec![
                Element::HorizontalBand {
                    y: s(size, 48.0),
                    x_start: s(size, 24.0),
                    x_end: s(size, 104.0),
                    thickness: s(size, 5.0),
                    intensity: 0.9,
                    motion: Motion::STILL,
                    speckle: 0.15,
                },
                Element::VerticalStreak {
                    x: s(size, 64.0),
                    y_start: s(size, 60.0),
                    y_end: s(size, 104.0),
                    thickness: s(size, 4.0),
                    intensity: 0.9,
                    motion: Motion::STILL,
                    speckle: 0.15,
                },
            ],
        }
    }

    /// Two horizontal bands, positions jittered by `seed`.
    pub fn band_class(size: usize, n_frames: usize, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut j = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let y1 = j(34.0, 44.0);
        let y2 = j(74.0, 90.0);
        let band = |y: f64, x0: f64, x1: f64, ph: f64| Element::HorizontalBand {
            y: s(size, y),
            x_start: s(size, x0),
            x_end: s(size, x1),
            thickness: s(size, 5.0),
            intensity: 0.9,
            motion: Motion {
                amplitude: s(size, 6.0),
                period: 20.0,
                phase: ph,
            },
            speckle: 0.15,
        };
        let elements = vec![
            band(y1, j(20.0, 30.0), j(96.0, 108.0), j(0.0, 6.28)),
            band(y2, j(20.0, 30.0), j(96.0, 108.0), j(0.0, 6.28)),
        ];
        SceneSpec {
            size,
            n_frames,
            background: 0.1,
            background_speckle: 0.5,
            elements,
            seed,
        }
    }

    /// Three vertical streaks, positions jittered by `seed`.
    pub fn streak_class(size: usize, n_frames: usize, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut j = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let mut elements = Vec::new();
        for base in [36.0, 64.0, 92.0] {
            let x = base + j(-4.0, 4.0);
            elements.push(Element::VerticalStreak {
                x: s(size, x),
                y_start: s(size, j(24.0, 36.0)),
                y_end: s(size, j(96.0, 108.0)),
                thickness: s(size, 4.0),
                intensity: 0.85,
                motion: Motion {
                    amplitude: s(size, 5.0),
                    period: 20.0,
                    phase: j(0.0, 6.28),
                },
                speckle: 0.15,
            });
        }
        SceneSpec {
            size,
            n_frames,
            background: 0.1,
            background_speckle: 0.5,
            elements,
            seed,
        }
    }
}
