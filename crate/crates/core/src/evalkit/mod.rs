//! Datasets, ranking metrics, synthetic corpora and ablation sweeps.

mod ablation;
mod dataset;
mod evaluate;
mod metrics;
mod synth;

pub use ablation::{ablation_run, AblationAxes, AblationBase, AblationReport, AblationRow};
pub use dataset::{Passage, QueryRecord, RankingDataset};
pub use evaluate::{effective_mode, evaluate, rank_passages, EvalReport, QueryAp, RankMode};
pub use metrics::{average_precision, mean_average_precision};
pub use synth::{synthesize, synthesize_dataset, SynthConfig};
