//! Scoring, metrics, embedding export and ablation sweeps.

pub mod ablation;
pub mod metrics;
pub mod score;

pub use ablation::{mean_std, plot_svg, protocol2_summary, run_ablation, table_to_text, AblationRow, Sweep};
pub use metrics::{compute_metrics, dev_threshold, metrics_at, rank_auc, ErrorCounts, MetricsReport, ScoreEntry, ScoreSet};
pub use score::{embeddings_to_text, export_embeddings, score_split, EmbeddingRow};
