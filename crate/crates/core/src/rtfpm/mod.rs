//! Radon-transformed feature probability maps: the 10-channel network input
//! built from a raw grayscale frame.

pub mod dga;
mod fft;
pub mod phase;
pub mod radon;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use dga::{apply_dga, dga_mask};
pub use phase::{integrated_backscatter, local_phase_tensor, log_gabor_gain, log_gabor_response, lp_fs_ibs, monogenic};
pub use radon::{angle_grid, controlled_iradon, enhance_orientation, orientation_selectivity, radon, support_energy, AngleBand, Selectivity, Sinogram};

pub const N_SCALES: usize = 5;
pub const N_CHANNELS: usize = 2 * N_SCALES;

/// `lambda0(k) = 4.2 pi * 3k * (k - 1)` for `k = 1..=5`; the first entry is
/// the unfiltered channel.
pub fn default_lambda0() -> Vec<f64> {
    (1..=N_SCALES)
        .map(|k| 4.2 * std::f64::consts::PI * 3.0 * k as f64 * (k - 1) as f64)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Full feature probability map.
    Fpm,
    /// Clipped intensity normalizations of the raw frame (ablation baseline).
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TauPolicy {
    /// Quantile in `[0, 1]` of `t_even - t_odd` over the image, floored at 0.
    Percentile(f64),
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgaConfig {
    pub enabled: bool,
    pub a: f64,
    pub flip: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RtfpmConfig {
    pub size: usize,
    pub input: InputMode,
    pub dga: DgaConfig,
    pub angle_step_deg: f64,
    pub horizontal_band: AngleBand,
    pub vertical_band: AngleBand,
    pub ramp_filter: bool,
    pub lambda0: Vec<f64>,
    pub sigma0: f64,
    pub tau: TauPolicy,
}

impl Default for RtfpmConfig {
    fn default() -> Self {
        RtfpmConfig {
            size: 256,
            input: InputMode::Fpm,
            dga: DgaConfig {
                enabled: true,
                a: 2.0,
                flip: false,
            },
            angle_step_deg: 1.0,
            horizontal_band: AngleBand::horizontal(),
            vertical_band: AngleBand::vertical(),
            ramp_filter: false,
            lambda0: default_lambda0(),
            sigma0: 0.55,
            tau: TauPolicy::Percentile(0.1),
        }
    }
}

impl RtfpmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.size < 8 {
            return bad(format!("rtfpm.size {} must be >= 8", self.size));
        }
        if self.lambda0.len() != N_SCALES {
            return bad(format!("rtfpm.lambda0 needs {N_SCALES} values, got {}", self.lambda0.len()));
        }
        if self.lambda0.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("rtfpm.lambda0 values must be finite and >= 0".into());
        }
        if !(self.sigma0 > 0.0 && self.sigma0 < 1.0) {
            return bad(format!("rtfpm.sigma0 {} must lie in (0, 1)", self.sigma0));
        }
        if !(self.dga.a >= 0.0) {
            return bad(format!("rtfpm.dga.a {} must be >= 0", self.dga.a));
        }
        if !(self.angle_step_deg > 0.0 && self.angle_step_deg <= 90.0) {
            return bad(format!("rtfpm.angle_step_deg {} must lie in (0, 90]", self.angle_step_deg));
        }
        match self.tau {
            TauPolicy::Percentile(q) if !(0.0..=1.0).contains(&q) => {
                return bad(format!("rtfpm.tau percentile {q} outside [0, 1]"))
            }
            TauPolicy::Fixed(t) if !(t >= 0.0 && t.is_finite()) => return bad(format!("rtfpm.tau {t} must be >= 0")),
            _ => {}
        }
        self.horizontal_band.validate()?;
        self.vertical_band.validate()
    }

    /// SHA-256 of the canonical JSON encoding; keys caches and checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-frame network input: `[10, size, size]` values in `[0, 1]`, ordered
/// horizontal-enhanced scales first, then vertical-enhanced scales.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureProbabilityMap {
    pub channels: Array3<f32>,
    pub lambda0: Vec<f64>,
}

impl FeatureProbabilityMap {
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (c, h, w) = self.channels.dim();
        Tensor::new(&[c, h, w], self.channels.iter().copied().collect()).expect("shape matches")
    }
}

/// Bilinear resampling with corner pixels anchored to corner pixels.
pub fn resize(img: &Array2<f64>, size: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    if h == size && w == size {
        return img.clone();
    }
    let tap = |o: usize, n_in: usize| -> (usize, usize, f64) {
        if n_in == 1 || size == 1 {
            return (0, 0, 0.0);
        }
        let s = o as f64 * (n_in - 1) as f64 / (size - 1) as f64;
        let i0 = (s.floor() as usize).min(n_in - 1);
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    Array2::from_shape_fn((size, size), |(r, c)| {
        let (r0, r1, fr) = tap(r, h);
        let (c0, c1, fc) = tap(c, w);
        let top = img[(r0, c0)] * (1.0 - fc) + img[(r0, c1)] * fc;
        let bot = img[(r1, c0)] * (1.0 - fc) + img[(r1, c1)] * fc;
        top * (1.0 - fr) + bot * fr
    })
}

fn prepare(frame: &Array2<f32>, size: usize) -> Result<Array2<f64>> {
    if frame.nrows() < 2 || frame.ncols() < 2 {
        return Err(Error::dim("rtfpm", format!("frame {:?} too small", frame.dim())));
    }
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("rtfpm: frame contains non-finite pixels".into()));
    }
    let f = frame.mapv(|v| (v as f64).clamp(0.0, 1.0));
    Ok(resize(&f, size))
}

/// Probability map (local phase x feature symmetry x inverted backscatter)
/// for one enhanced orientation image at one scale.
fn probability_channel(enhanced: &Array2<f64>, lambda0: f64, cfg: &RtfpmConfig) -> Result<Array2<f64>> {
    let bp = log_gabor_response(enhanced, lambda0, cfg.sigma0)?;
    let lp = local_phase_tensor(&bp);
    let (m1, m2, m3) = monogenic(&lp.lpt);
    let tau = match cfg.tau {
        TauPolicy::Fixed(t) => t,
        TauPolicy::Percentile(q) => phase::percentile(&(&lp.t_even - &lp.t_odd), q).max(0.0),
    };
    let (lpm, fs, ibs) = lp_fs_ibs((&m1, &m2, &m3), &lp.t_even, &lp.t_odd, enhanced, tau)?;
    let mut t = lpm * fs * ibs.mapv(|v| 1.0 - v);
    t.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(t)
}

/// Full pipeline: resize, DGA, horizontal / vertical Radon enhancement, then
/// one probability channel per scale and orientation.
pub fn fpm(frame: &Array2<f32>, cfg: &RtfpmConfig) -> Result<FeatureProbabilityMap> {
    cfg.validate()?;
    let f = prepare(frame, cfg.size)?;
    let f = if cfg.dga.enabled {
        apply_dga(&f, &dga_mask(cfg.size, cfg.dga.a, cfg.dga.flip)?)?
    } else {
        f
    };
    let angles = angle_grid(cfg.angle_step_deg);
    let sino = radon(&f, &angles)?;
    let mut out = Array3::<f32>::zeros((N_CHANNELS, cfg.size, cfg.size));
    for (o, band) in [&cfg.horizontal_band, &cfg.vertical_band].into_iter().enumerate() {
        let enhanced = controlled_iradon(&sino, band, cfg.ramp_filter)? * &f;
        for (s, &lambda0) in cfg.lambda0.iter().enumerate() {
            let t = probability_channel(&enhanced, lambda0, cfg)?;
            let mut ch = out.index_axis_mut(ndarray::Axis(0), o * N_SCALES + s);
            ch.zip_mut_with(&t, |d, &v| *d = v as f32);
        }
    }
    Ok(FeatureProbabilityMap {
        channels: out,
        lambda0: cfg.lambda0.clone(),
    })
}

/// Means used by [`normalization_channels`]: evenly spaced over `[0.3, 0.7]`.
pub fn normalization_means() -> Vec<f64> {
    (0..N_CHANNELS)
        .map(|c| 0.3 + 0.4 * c as f64 / (N_CHANNELS - 1) as f64)
        .collect()
}

/// Baseline input: channel `c` is `clamp((f - mu_c) / 0.5, 0, 1)`.
pub fn normalization_channels(frame: &Array2<f32>, size: usize) -> Result<Array3<f32>> {
    let f = prepare(frame, size)?;
    let mut out = Array3::<f32>::zeros((N_CHANNELS, size, size));
    for (c, mu) in normalization_means().into_iter().enumerate() {
        let mut ch = out.index_axis_mut(ndarray::Axis(0), c);
        ch.zip_mut_with(&f, |d, &v| *d = ((v - mu) / 0.5).clamp(0.0, 1.0) as f32);
    }
    Ok(out)
}

/// Network input for one frame under `cfg.input`.
pub fn input_map(frame: &Array2<f32>, cfg: &RtfpmConfig) -> Result<Array3<f32>> {
    match cfg.input {
        InputMode::Fpm => Ok(fpm(frame, cfg)?.channels),
        InputMode::Normalized => {
            cfg.validate()?;
            normalization_channels(frame, cfg.size)
        }
    }
}

/// Record stored next to preprocessed maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtfpmManifest {
    pub config_hash: String,
    pub config: RtfpmConfig,
    pub lambda0: Vec<f64>,
    pub channel_order: Vec<String>,
}

impl RtfpmManifest {
    pub fn new(cfg: &RtfpmConfig) -> Self {
        let mut order = Vec::new();
        for o in ["horizontal", "vertical"] {
            for l in &cfg.lambda0 {
                order.push(format!("{o}:lambda0={l}"));
            }
        }
        RtfpmManifest {
            config_hash: cfg.hash(),
            config: cfg.clone(),
            lambda0: cfg.lambda0.clone(),
            channel_order: order,
        }
    }
}
