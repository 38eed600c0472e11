//! Corpus windows and the training loop.

mod corpus;
mod trainer;

pub use corpus::Corpus;
pub use trainer::{
    build_model, checkpoint_name, model_delta_ti, read_metrics, run, run_trainer, MetricsRow, RunOutput, Trainer,
    DIAGNOSTICS_FILE, FINAL_CHECKPOINT, FINAL_REPORT, METRICS_FILE,
};
