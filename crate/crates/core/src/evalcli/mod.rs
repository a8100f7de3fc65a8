//! Evaluation metrics, SVG chart rendering and the command-line surface.

mod cli;
mod metrics;
mod render;

pub use cli::{cli_main, CHECKPOINT_FILE, SEED_ENV, TRAIN_LOG_FILE};
pub use metrics::{
    evaluate, evaluate_predictions, predict_labels, ClassAccuracy, EvalReport, Label,
};
pub use render::{render_chart, RenderSpec};
