//! Ranking metrics, the modality dominance analysis and fusion baselines.

mod baselines;
mod dominance;
mod metrics;

pub use baselines::{concat_baseline, zscore_columns, Pca};
pub use dominance::{dominance_similarity, DominanceReport, DEFAULT_CLUSTERS, MAX_ANCHORS};
pub use metrics::{ndcg_at_k, popularity_ranking, recall_at_k, MetricReport};
