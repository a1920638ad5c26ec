//! Stage runner, configuration, report generation and the synthetic
//! dataset generator.

mod config;
mod report;
mod stages;
mod synth;

pub use config::{DataPaths, KeyValues, PipelineConfig};
pub use report::{build_report, write_report, Comparison, Report, ReportRow};
pub use stages::{run_stage, stage_names, EvalIndex, StageInfo, SONG_APPROACHES, STAGES};
pub use synth::{desk_config, generate_synthetic_dataset, SyntheticSpec};
