//! Training loop, evaluation metrics and the experiment protocols
//! (alignment ablation, robustness to corruption, bottleneck sweep).
//!
//! Every run is a pure function of its [`ExperimentConfig`]: the same
//! config and seed reproduce checkpoints, metrics and emitted files bit for
//! bit. Timings are never written to files.

mod config;
mod experiments;
mod metrics;
mod train;

pub use config::{DataConfig, DataSource, ExperimentConfig, SweepConfig, Task, TrainConfig};
pub use experiments::{
    ablation_run, bottleneck_sweep, robustness_grid, robustness_sweep, run_jobs, sweep_threads, AblationReport,
    AblationRow, BottleneckCell, BottleneckGrid, CurvePoint, RobustnessTable, ABLATION_VARIANTS, CURVE_HEADER,
    DELETION_RATIOS, OUTLIER_RATIOS, PERTURB_SIGMAS,
};
pub use metrics::{
    classification_accuracy, dataset_miou, evaluate_classification, evaluate_normals, evaluate_segmentation,
    part_miou, predict_classes, predict_parts, ClassAccuracy, SegmentationMetrics,
};
pub use train::{
    corrupt_dataset, evaluate, load_datasets, train, train_model, EpochSummary, MetricsReport, RunResult, StepRecord,
    TrainOutcome, CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE, METRICS_FILE,
};
