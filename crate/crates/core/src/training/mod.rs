pub mod cache;
pub mod config;
pub mod pairs;
pub mod train;

pub use cache::{preprocess_cache, CacheManifest, CacheStats, FpmCache, FrameSource, MemoryFrames};
pub use config::TrainConfig;
pub use pairs::{pair_pools, sample_pairs, split_segments, PairIndex, Sampled, Segment};
pub use train::{mean_eval_loss, read_metrics, train, EpochMetrics, TrainData, TrainOutcome};
