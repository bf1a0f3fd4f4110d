//! Recurrent pillar detector: tiny residual backbone, short- and long-range
//! memory per scale, skip-sum fusion, one square anchor per cell.

mod anchors;
mod config;
mod data;
mod evaluate;
mod loss;
mod model;
mod nms;
mod train;


pub use anchors::{all_anchors, assign_targets, decode_deltas, encode_deltas, scale_anchors, AnchorTarget, ClassTarget};
pub use config::{DetectorConfig, MemoryVariant, STRIDES};
pub use data::{benchmark_scene, overfit_sequence, standard_benchmark, Benchmark, BenchmarkSpec, CLASS_SIDES};
pub use evaluate::{
    detections_to_csv, evaluate, parse_detections_csv, predict, read_detections_file, sweep_pillars,
    write_detections_file, Predictions,
};
pub use loss::{focal_loss, focal_loss_normalized, positive_count, smooth_l1, smooth_l1_normalized};
pub use model::{
    bind_state, read_state, Detector, DetectorState, Head, INFERENCE_MODE, ResBlock, ScaleState, ScaleVars, StepOutput, WindowLoss,
};
pub use nms::{decode_and_nms, nms, Detection};
pub use train::{input_sensitivity, steps_per_epoch, train_sequences, StepRecord, TrainReport};
