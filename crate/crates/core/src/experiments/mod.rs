//! Metrics, training, baselines and the two studies: the prediction-horizon
//! sweep and the origin/new-scene reconstruction table.

pub mod fusion;
pub mod metrics;
pub mod predictors;
pub mod report;
pub mod train;

use thiserror::Error;

pub use fusion::{generalization_table, relative_degradation, train_fusion, FusionMethod, FusionModel, Table2Row};
pub use metrics::{cosine_similarity, mean_cosine, mean_nmse, nmse, MetricError};
pub use predictors::{
    horizon_curve, predict_samples, train_gpt, train_mlp, BaselineKind, GptSequence, IdentityHold, LinearAr,
    MlpConfig, MlpPredictor, MlpSequence, SequencePredictor,
};
pub use report::{CurveRow, MetricsReport};
pub use train::{fit, LrSchedule, TrainConfig, TrainError, TrainReport};

use crate::dataset::{CsiSample, DatasetError};
use crate::neural::NeuralError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment setup: {0}")]
    Config(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// NMSE of the first `n` predicted slots for `n = 1..=horizon`, one curve
/// per predictor, from a single `horizon`-slot rollout each.
pub fn horizon_sweep(
    predictors: &[&dyn SequencePredictor],
    test: &[CsiSample],
    width: usize,
    horizon: usize,
) -> Result<Vec<(String, Vec<f64>)>, ExperimentError> {
    if test.is_empty() {
        return Err(ExperimentError::Config("empty test split".into()));
    }
    if test[0].future.len() < horizon * width {
        return Err(ExperimentError::Config(format!(
            "test windows hold {} future slots, sweep needs {horizon}",
            test[0].future.len() / width
        )));
    }
    predictors
        .iter()
        .map(|p| {
            let pred = predict_samples(*p, test, width, horizon)?;
            Ok((p.name().to_string(), horizon_curve(&pred, test, width, horizon)?))
        })
        .collect()
}
