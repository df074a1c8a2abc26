pub mod correction;
pub mod keypoints;
pub mod knn;
pub mod metrics;
pub mod tsne;

pub use correction::{frame_average_correct, reference_frame, Reference};
pub use keypoints::{detect_video, embed_video, input_batch, pooled_features, EmbeddingRecord};
pub use knn::{classification_metrics, knn_coclassify, knn_predict, ClassMetrics, CoclassifyReport};
pub use metrics::{components, sp_sn, EvalReport, FrameScore, DEFAULT_RADIUS_256};
pub use tsne::{calibrated_affinities, tsne, TsneConfig, TsneResult};
