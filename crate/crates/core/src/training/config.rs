use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rtfpm::{RtfpmConfig, N_CHANNELS};
use crate::transporter::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Size of the fixed training pair pool, drawn once per run.
    pub pairs_train: usize,
    pub pairs_val: usize,
    /// Source frames are taken one per `source_stride` frames.
    pub source_stride: usize,
    /// Target offset is uniform on `[1, max_offset]`.
    pub max_offset: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub rtfpm: RtfpmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            lr: 1e-3,
            lr_decay: 0.95,
            lr_decay_every: 10,
            pairs_train: 1024,
            pairs_val: 512,
            source_stride: 10,
            max_offset: 10,
            seed: 0,
            model: ModelConfig::default(),
            rtfpm: RtfpmConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train: {m}")));
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("lr_decay_every", self.lr_decay_every),
            ("pairs_train", self.pairs_train),
            ("source_stride", self.source_stride),
            ("max_offset", self.max_offset),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} must lie in (0, 1]", self.lr_decay));
        }
        self.model.validate()?;
        self.rtfpm.validate()?;
        if self.model.input_size != self.rtfpm.size {
            return bad(format!(
                "model.input_size {} differs from rtfpm.size {}",
                self.model.input_size, self.rtfpm.size
            ));
        }
        if self.model.in_channels != N_CHANNELS {
            return bad(format!("model.in_channels must be {N_CHANNELS}, got {}", self.model.in_channels));
        }
        Ok(())
    }

    /// Learning rate during epoch `e` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.001);
        assert_eq!(c.lr_at(9), 0.001);
        assert_eq!(c.lr_at(10), 0.001 * 0.95);
        assert!((c.lr_at(10) - 0.00095).abs() < 1e-15);
        assert!((c.lr_at(99) - 0.000630249).abs() < 1e-9, "{}", c.lr_at(99));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "learning_rate": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.batch_size, 16);
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let mut c = TrainConfig::default();
        c.model.input_size = 128;
        assert!(c.validate().is_err());
        c.rtfpm.size = 128;
        c.validate().unwrap();
        c.lr_decay = 1.5;
        assert!(c.validate().is_err());
    }
}
