//! End-to-end orchestration with cached stages, run reports, overlays and
//! results tables.

mod cache;
mod config;
mod overlay;
mod report;
mod run;
mod table;

pub use cache::{file_sha256, KeyBuilder, StageCache, StageKey, WorkLock};
pub use config::{ClusteringMethod, ExtractorChoice, NormTargetMode, PipelineConfig};
pub use overlay::{palette_index, render_overlay, OverlayLayout, PALETTE};
pub use report::{result_label, ClusterSummary, ConfigResult, CorpusInfo, LevelMetrics, RunReport, StageTiming};
pub use run::{run_pipeline, Pipeline, RunOutcome, StageName, REPORT_FILE};
pub use table::{collect_rows, render_csv, render_text, TableRow};
