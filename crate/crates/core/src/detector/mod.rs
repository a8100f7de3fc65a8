//! Single-cell detector: six conv blocks over a GAF tensor, a dense head
//! predicting two `(width, confidence)` pairs plus class scores, the
//! detection loss and the training loop.

mod loss;
mod model;
mod train;

pub use loss::{detection_loss, iou_1d, loss_terms, responsible_pair, LossTerms, LossWeights};
pub use model::{
    window_from_norm, Detector, DetectorArchitecture, DetectorOutput, BLOCKS, OUTPUT_LEN,
    POOLED_BLOCKS,
};
pub use train::{
    evaluate_examples, stack_examples, train, train_step, write_log_csv, EpochStats, Example,
    SetMetrics, TrainConfig, TrainOutcome,
};

#[cfg(test)]
mod tests;
