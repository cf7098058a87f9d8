//! Training loop, multi-view evaluation, ablations, configuration and plots.

mod ablation;
mod config;
mod data;
mod eval;
pub mod plot;
mod train;

pub use ablation::{mean_std, run_ablation, AblationRow, AblationTable, Axis};
pub use config::{
    AugConfig, BatchConfig, EvalPolicy, LocalizerConfig, MaskConfig, RunConfig, SslConfig, CONFIG_SCHEMA_VERSION,
};
pub use data::{audio_stats, model_steps, video_stats, spectrogram, waveform_window, TrainData};
pub use eval::{crop_origins, crop_resize, evaluate, sample_views, segment_starts, EvalReport};
pub use train::{
    effective_weights, ema_momentum, rampup, read_metrics, row_softmax, train_run, train_step, MetricsLine, MixTrace, RunOutcome, RunSummary, StepOptions,
    StepTrace, TrainState, CHECKPOINT_DIR, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE,
};
