//! Experiment configuration, command implementations and run reports.
//! The `dmae` binary is a thin wrapper over this module.

mod commands;
mod config;
mod report;

pub use commands::{
    checkpoint_path, cmd_eval, cmd_pretrain, cmd_report, cmd_run, cmd_sweep, cmd_synth, cmd_train, default_forecaster,
    forecast_loss_path, forecaster_path, load_predictions, load_synth_spec, mirage_metrics, predictions_path,
    prepare_data, pretrain_loss_path, run_names, Prepared, SynthArtifacts, CONFIG_FILE, MAX_MIRAGE_OVERLAYS,
    PREDICTIONS_KIND, PRETRAIN_REPORT_FILE, RUN_REPORT_FILE, SWEEP_RATIOS,
};
pub use config::{AblationMode, DataSource, ExperimentConfig, MaeSection, SynthPreset, SynthSource, OUTPUT_ROOT_ENV};
pub use report::{
    Comparison, DatasetInfo, Environment, EvalReport, ForecastRunReport, MirageMetrics, PhaseReport, PretrainReport,
    ReportSummary, RunReport, SplitReport, SweepReport, SweepRow, FIRST_LOSSES,
};
