//! Feature encoder, keypoint network and refinement decoder.
//!
//! All three are stacks of conv + batchnorm + ReLU blocks. Features and
//! heatmaps live at a quarter of the input resolution: the encoder and the
//! keypoint network downsample twice, the decoder upsamples twice.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Binder, CbamVars, Graph, LayerSpec, ParamStore, Scalar, Tensor, Var, BN_MOMENTUM};
use crate::rtfpm::N_CHANNELS;

/// Gaussian width of every keypoint at creation, in normalized units.
pub const SIGMA_INIT: f64 = 0.1;
/// Floor added to the softplus in learned-width mode.
pub const SIGMA_FLOOR: f64 = 1e-3;
/// Raw transport-strength logit at creation; sigmoid(2) is about 0.88.
pub const WEIGHT_RAW_INIT: f64 = 2.0;
/// Channel reduction of the attention block's MLP.
pub const CBAM_REDUCTION: usize = 8;

const FFCNN_STRIDES: [usize; 6] = [1, 1, 2, 1, 2, 1];
const KEYNET_STRIDES: [usize; 5] = [1, 1, 2, 1, 2];
/// Encoder block after which the attention block sits.
const CBAM_AFTER: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Plain transport, fixed keypoint width.
    None,
    /// Per-keypoint learnable transport strength in `[0, 1]`.
    TransportWeight,
    /// Per-keypoint learnable Gaussian width.
    LearnedSigma,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Side of the square network input; must be a multiple of 4.
    pub input_size: usize,
    pub in_channels: usize,
    pub k: usize,
    pub feature_channels: usize,
    /// Hidden channel width of every block.
    pub width: usize,
    pub attention: AttentionMode,
    pub cbam: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 256,
            in_channels: N_CHANNELS,
            k: 10,
            feature_channels: 32,
            width: 32,
            attention: AttentionMode::None,
            cbam: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("model: {m}")));
        if self.input_size < 8 || self.input_size % 4 != 0 {
            return bad(format!("input_size {} must be a multiple of 4 and >= 8", self.input_size));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.in_channels == 0 || self.feature_channels == 0 || self.width == 0 {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    /// Feature and heatmap side.
    pub fn feature_size(&self) -> usize {
        self.input_size / 4
    }

    fn cbam_hidden(&self) -> usize {
        (self.width / CBAM_REDUCTION).max(1)
    }

    fn ffcnn_layers(&self) -> Vec<LayerSpec> {
        FFCNN_STRIDES
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let (cin, cout) = match i {
                    0 => (self.in_channels, self.width),
                    5 => (self.width, self.feature_channels),
                    _ => (self.width, self.width),
                };
                let k = if i == 0 { 7 } else { 3 };
                LayerSpec::conv(cin, cout, k, s, k / 2)
            })
            .collect()
    }

    /// Conv + BN + ReLU blocks, then the 1x1 head to `k` logits.
    fn keynet_layers(&self) -> (Vec<LayerSpec>, LayerSpec) {
        let blocks = KEYNET_STRIDES
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let cin = if i == 0 { self.in_channels } else { self.width };
                let k = if i == 0 { 7 } else { 3 };
                LayerSpec::conv(cin, self.width, k, s, k / 2)
            })
            .collect();
        (blocks, LayerSpec::conv(self.width, self.k, 1, 1, 0))
    }

    /// Five conv + BN + ReLU blocks with a x2 upsample after the second and
    /// the fourth, then the output conv.
    fn refine_layers(&self) -> (Vec<LayerSpec>, LayerSpec) {
        let blocks = (0..5)
            .map(|i| {
                let cin = if i == 0 { self.feature_channels } else { self.width };
                LayerSpec::conv(cin, self.width, 3, 1, 1)
            })
            .collect();
        (blocks, LayerSpec::conv(self.width, self.in_channels, 3, 1, 1))
    }

    /// Every parameter and buffer name with its shape; buffers flagged.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut out = Vec::new();
        let block = |out: &mut Vec<(String, Vec<usize>, bool)>, p: String, l: &LayerSpec| {
            let oc = l.out_channels;
            out.push((format!("{p}.w"), vec![oc, l.in_channels, l.kernel.0, l.kernel.1], false));
            out.push((format!("{p}.gamma"), vec![oc], false));
            out.push((format!("{p}.beta"), vec![oc], false));
            out.push((format!("{p}.running_mean"), vec![oc], true));
            out.push((format!("{p}.running_var"), vec![oc], true));
        };
        let head = |out: &mut Vec<(String, Vec<usize>, bool)>, p: String, l: &LayerSpec| {
            out.push((format!("{p}.w"), vec![l.out_channels, l.in_channels, l.kernel.0, l.kernel.1], false));
            out.push((format!("{p}.b"), vec![l.out_channels], false));
        };
        for (i, l) in self.ffcnn_layers().iter().enumerate() {
            block(&mut out, format!("ffcnn.{i}"), l);
        }
        if self.cbam {
            for (n, s) in CbamVars::param_shapes(self.width, self.cbam_hidden()) {
                out.push((format!("ffcnn.cbam.{n}"), s, false));
            }
        }
        let (kb, kh) = self.keynet_layers();
        for (i, l) in kb.iter().enumerate() {
            block(&mut out, format!("keynet.{i}"), l);
        }
        head(&mut out, format!("keynet.{}", kb.len()), &kh);
        match self.attention {
            AttentionMode::None => {}
            AttentionMode::TransportWeight => out.push(("keynet.weight_raw".into(), vec![self.k], false)),
            AttentionMode::LearnedSigma => out.push(("keynet.sigma_raw".into(), vec![self.k], false)),
        }
        let (rb, rh) = self.refine_layers();
        for (i, l) in rb.iter().enumerate() {
            block(&mut out, format!("refine.{i}"), l);
        }
        head(&mut out, format!("refine.{}", rb.len()), &rh);
        out
    }

    /// Fingerprint of the architecture: config plus every tensor shape.
    pub fn arch_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        for (name, shape, _) in self.parameter_shapes() {
            h.update(format!("{name}{shape:?};"));
        }
        crate::rtfpm::hex(&h.finalize())
    }
}

/// Inverse of softplus, for setting an initial width.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Parameters of all three networks.
#[derive(Clone, Debug, PartialEq)]
pub struct TransporterModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl TransporterModel<f32> {
    /// Kaiming-uniform conv weights, zero biases, unit BN scale, running
    /// statistics at (0, 1).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, is_buffer) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let t = if is_buffer {
                let v = if name.ends_with("running_var") { 1.0 } else { 0.0 };
                Tensor::full(&shape, v)
            } else if name.ends_with(".gamma") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with("sigma_raw") {
                Tensor::full(&shape, softplus_inv(SIGMA_INIT - SIGMA_FLOOR) as f32)
            } else if name.ends_with("weight_raw") {
                Tensor::full(&shape, WEIGHT_RAW_INIT as f32)
            } else if shape.len() == 4 {
                let fan_in = n / shape[0];
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::uniform(&shape, -bound, bound, &mut rng)
            } else {
                Tensor::zeros(&shape)
            };
            if is_buffer {
                params.insert_buffer(name, t);
            } else {
                params.insert_param(name, t);
            }
        }
        Ok(TransporterModel { config, params })
    }
}

impl<T: Scalar> TransporterModel<T> {
    pub fn cast<U: Scalar>(&self) -> TransporterModel<U> {
        TransporterModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Folds batch statistics into the running statistics, in the order the
    /// batches were seen.
    pub fn apply_bn_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        let m = T::from_f64c(BN_MOMENTUM);
        for s in stats {
            let mut upd = Vec::with_capacity(2);
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("{}.{suffix}", s.block);
                let old = self.params.buffer(&name)?;
                let data = old
                    .data()
                    .iter()
                    .zip(batch)
                    .map(|(&o, &b)| (T::one() - m) * o + m * b)
                    .collect();
                upd.push((name, Tensor::new(old.shape(), data)?));
            }
            self.params.apply_buffer_updates(upd)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics collected for later update.
    Train,
    /// Running statistics.
    Eval,
}

/// Batch mean and unbiased variance seen by one batchnorm in train mode.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub block: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Keypoint network outputs for a batch.
#[derive(Clone, Copy, Debug)]
pub struct Keypoints {
    /// `[N, K, 2]`, x then y, in `[-1, 1]`.
    pub coords: Var,
    /// Softmax maps `[N, K, h, w]`.
    pub probs: Var,
    /// `[K]` Gaussian widths.
    pub sigma: Var,
    /// `[K]` transport strengths, or `None` for unit strength.
    pub weights: Option<Var>,
    /// Rendered Gaussians `[N, K, h, w]`.
    pub heatmaps: Var,
}

/// One forward pass over a shared parameter store.
pub struct Forward<'s, T: Scalar> {
    pub config: &'s ModelConfig,
    pub binder: Binder<'s, T>,
    pub mode: BnMode,
    pub stats: Vec<BatchStats<T>>,
}

impl<'s, T: Scalar> Forward<'s, T> {
    pub fn new(model: &'s TransporterModel<T>, trainable: bool, mode: BnMode) -> Self {
        let binder = if trainable {
            Binder::trainable(&model.params)
        } else {
            Binder::frozen(&model.params)
        };
        Forward {
            config: &model.config,
            binder,
            mode,
            stats: Vec::new(),
        }
    }

    fn block(&mut self, g: &mut Graph<T>, x: Var, prefix: &str, spec: &LayerSpec) -> Result<Var> {
        let w = self.binder.var(g, &format!("{prefix}.w"))?;
        let gamma = self.binder.var(g, &format!("{prefix}.gamma"))?;
        let beta = self.binder.var(g, &format!("{prefix}.beta"))?;
        let y = g.conv2d(x, w, None, spec)?;
        let y = match self.mode {
            BnMode::Train => {
                let (y, mean, var) = g.batchnorm_train(y, gamma, beta)?;
                self.stats.push(BatchStats {
                    block: prefix.to_string(),
                    mean,
                    var,
                });
                y
            }
            BnMode::Eval => {
                let rm = self.binder.buffer(&format!("{prefix}.running_mean"))?;
                let rv = self.binder.buffer(&format!("{prefix}.running_var"))?;
                g.batchnorm_eval(y, gamma, beta, rm.data(), rv.data())?
            }
        };
        g.relu(y)
    }

    fn head(&mut self, g: &mut Graph<T>, x: Var, prefix: &str, spec: &LayerSpec) -> Result<Var> {
        let w = self.binder.var(g, &format!("{prefix}.w"))?;
        let b = self.binder.var(g, &format!("{prefix}.b"))?;
        g.conv2d(x, w, Some(b), spec)
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let (_, c, h, w) = g.value(x).dims4("transporter input")?;
        let cfg = self.config;
        if c != cfg.in_channels || h != cfg.input_size || w != cfg.input_size {
            return Err(Error::dim(
                "transporter input",
                format!(
                    "got [{c}, {h}, {w}], model expects [{}, {s}, {s}]",
                    cfg.in_channels,
                    s = cfg.input_size
                ),
            ));
        }
        Ok(())
    }

    /// Feature encoder: `[N, 10, S, S] -> [N, C_f, S/4, S/4]`.
    pub fn ffcnn(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let mut h = x;
        for (i, l) in self.config.ffcnn_layers().iter().enumerate() {
            h = self.block(g, h, &format!("ffcnn.{i}"), l)?;
            if i == CBAM_AFTER && self.config.cbam {
                let mut v = |n: &str| self.binder.var(g, &format!("ffcnn.cbam.{n}"));
                let p = CbamVars {
                    channels: self.config.width,
                    hidden: self.config.cbam_hidden(),
                    mlp1_w: v("mlp1.w")?,
                    mlp1_b: v("mlp1.b")?,
                    mlp2_w: v("mlp2.w")?,
                    mlp2_b: v("mlp2.b")?,
                    spatial_w: v("spatial.w")?,
                    spatial_b: v("spatial.b")?,
                };
                h = g.cbam_block(h, &p)?.output;
            }
        }
        Ok(h)
    }

    /// Keypoint network: spatial-softmax coordinates and rendered heatmaps.
    pub fn keynet(&mut self, g: &mut Graph<T>, x: Var) -> Result<Keypoints> {
        self.check_input(g, x)?;
        let (blocks, head) = self.config.keynet_layers();
        let mut h = x;
        for (i, l) in blocks.iter().enumerate() {
            h = self.block(g, h, &format!("keynet.{i}"), l)?;
        }
        let logits = self.head(g, h, &format!("keynet.{}", blocks.len()), &head)?;
        let (coords, probs) = g.spatial_softmax_keypoints(logits)?;
        let k = self.config.k;
        let sigma = match self.config.attention {
            AttentionMode::LearnedSigma => {
                let raw = self.binder.var(g, "keynet.sigma_raw")?;
                let sp = g.softplus(raw)?;
                g.add_scalar(sp, T::from_f64c(SIGMA_FLOOR))?
            }
            _ => g.constant(Tensor::full(&[k], T::from_f64c(SIGMA_INIT))),
        };
        let weights = match self.config.attention {
            AttentionMode::TransportWeight => {
                let raw = self.binder.var(g, "keynet.weight_raw")?;
                Some(g.sigmoid(raw)?)
            }
            _ => None,
        };
        let fs = self.config.feature_size();
        let heatmaps = g.gaussian_render(coords, sigma, fs, fs)?;
        Ok(Keypoints {
            coords,
            probs,
            sigma,
            weights,
            heatmaps,
        })
    }

    /// Decoder: `[N, C_f, S/4, S/4] -> [N, 10, S, S]` in `(0, 1)`.
    pub fn refine(&mut self, g: &mut Graph<T>, eps: Var) -> Result<Var> {
        let (blocks, head) = self.config.refine_layers();
        let mut h = eps;
        for (i, l) in blocks.iter().enumerate() {
            h = self.block(g, h, &format!("refine.{i}"), l)?;
            if i == 1 || i == 3 {
                h = g.bilinear_upsample(h, 2)?;
            }
        }
        let out = self.head(g, h, &format!("refine.{}", blocks.len()), &head)?;
        g.sigmoid(out)
    }
}
