//! Run configuration, file-based pipeline stages, run manifests and the
//! ablation grid behind the command-line tool.

mod ablate;
mod config;
mod manifest;
mod serve;
mod stages;

pub use ablate::{ablate, AblationReport, AblationRow, Variant};
pub use config::{
    AblateConfig, BenchConfig, DataConfig, EvalConfig, FusionSettings, GeneratorSettings, Mode,
    ModelConfig, QuantizerConfig, RunConfig, SeedUse, TrainSettings,
};
pub use manifest::{manifest_path, version, OutputGuard, RunManifest};
pub use serve::Recommender;
pub use stages::{
    bench, dominance, evaluate, export_embeddings, load_aligned, prepare_data, quantize, recommend,
    synth_data, train_stage1_cmd, train_stage2_cmd, CostComparison,
};

/// File names inside a run directory.
pub mod files {
    pub const INTERACTIONS: &str = "interactions.tsv";
    pub const CORPUS: &str = "corpus.json";
    pub const LOAD_STATS: &str = "load_stats.json";
    pub const CATEGORIES: &str = "categories.json";
    pub const SEMANTIC: &str = "semantic.unge";
    pub const COLLABORATIVE: &str = "collaborative.unge";
    pub const INTEGRATED: &str = "integrated.unge";
    pub const STAGE1: &str = "stage1";
    pub const STAGE1_LOG: &str = "stage1_log.json";
    pub const CODES: &str = "codes.tsv";
    pub const CODEBOOKS: &str = "codebooks";
    pub const QUANTIZE_REPORT: &str = "quantize_report.json";
    pub const STAGE2: &str = "stage2";
    pub const STAGE2_LOG: &str = "stage2_log.json";
    pub const RECOMMENDATIONS: &str = "recommendations.json";
    pub const METRICS: &str = "metrics.json";
    pub const METRICS_TEXT: &str = "metrics.txt";
    pub const POPULARITY_METRICS: &str = "popularity_metrics.json";
    pub const DOMINANCE: &str = "dominance.json";
    pub const COST: &str = "cost.json";
    pub const ABLATE_DIR: &str = "ablate";
    pub const ABLATION: &str = "ablation.json";
    pub const ABLATION_TEXT: &str = "ablation.txt";
}
