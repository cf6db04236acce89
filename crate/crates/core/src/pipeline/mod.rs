//! Episode orchestration: checkpoints, the tolerance gate with rollback,
//! layer-wise fallback, the resumable full run and its reports.

pub mod checkpoint;
pub mod config;
pub mod episode;
pub mod report;
pub mod run;

pub use checkpoint::Checkpoint;
pub use config::{DatasetKind, PruneConfig, Splits};
pub use episode::{
    global_quotas, layerwise_fallback, rollback, run_episode, tolerance_gate, EpisodeLog, EpisodeOutcome,
    FallbackCursor, PairLog, Phase,
};
pub use report::{emit_report, max_abs_rho, read_summary, write_report, Summary};
pub use run::{read_logs, run_full_pipeline, save_network, train_baseline, Pipeline, RunResult, RunState};
