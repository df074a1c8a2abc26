pub mod checkpoint;
pub mod forward;
pub mod model;
pub mod transport;

pub use checkpoint::{Checkpoint, Manifest};
pub use forward::{detect, encode, eval_loss, to_pixel, training_forward, FrameKeypoints, TrainingForward, TransportResult};
pub use model::{AttentionMode, BatchStats, BnMode, Forward, Keypoints, ModelConfig, TransporterModel};
