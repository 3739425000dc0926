//! Short-window forecaster, representation augmentation, training and
//! evaluation.

mod checkpoint;
mod metrics;
mod model;
mod repr;
mod train;

pub use checkpoint::{ForecasterCheckpoint, FORECASTER_KIND};
pub use metrics::{evaluate, HorizonMetrics, MetricSet, Metrics, DEFAULT_ZERO_THRESHOLD, REPORT_HORIZONS};
pub use model::{
    augment, truncate_and_project, AugmentBranch, ConvLayer, ForecastHead, Forecaster, ForecasterConfig, Predictor,
};
pub use repr::{extract_representations, RepresentationCache, CACHE_KIND};
pub use train::{
    check_compatibility, evaluate_predictions, predict_anchors, representations_for, split_anchors, train_forecaster,
    EvalMetrics, ForecastEpoch, ForecastHistory, ForecastTrainConfig, SplitPredictions,
};
