use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::RankingDataset;
use super::metrics::{average_precision, mean_average_precision};
use crate::embedder::{EmbeddingProvider, TextItem};
use crate::error::{Error, Result};
use crate::inference::{direct_rerank, iterative_rerank, IterConfig, RankedResult};
use crate::model::Ranker;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMode {
    #[default]
    Iterative,
    Direct,
}

impl FromStr for RankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iterative" => Ok(Self::Iterative),
            "direct" => Ok(Self::Direct),
            other => Err(Error::Config(format!("unknown rank mode `{other}`"))),
        }
    }
}

impl fmt::Display for RankMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Iterative => "iterative",
            Self::Direct => "direct",
        })
    }
}

/// Embeds and ranks one passage list.
pub fn rank_passages(
    ranker: &Ranker,
    provider: &dyn EmbeddingProvider,
    query: TextItem<'_>,
    passages: &[TextItem<'_>],
    iter_cfg: &IterConfig,
    mode: RankMode,
) -> Result<RankedResult> {
    let (q, p) = ranker.embed_inputs(provider, query, passages)?;
    let scorer = |subset: &[usize]| -> Result<Vec<f64>> {
        Ok(ranker.score_subset(&q, &p, subset)?.into_iter().map(|b| b.s_final).collect())
    };
    match effective_mode(ranker, mode) {
        RankMode::Iterative => iterative_rerank(passages.len(), iter_cfg, scorer),
        RankMode::Direct => direct_rerank(passages.len(), scorer),
    }
}

/// Scores that ignore the other passages make iterative ranking equal to a
/// direct sort, so such models always rank directly.
pub fn effective_mode(ranker: &Ranker, mode: RankMode) -> RankMode {
    if ranker.config().feature_mode.is_listwise() {
        mode
    } else {
        RankMode::Direct
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAp {
    pub query_id: String,
    /// Absent when the query has no positive passage.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: RankMode,
    pub iterative_applicable: bool,
    pub map: f64,
    pub queries: usize,
    pub skipped: usize,
    pub per_query: Vec<QueryAp>,
    pub runtime_secs: f64,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let rows = [
            ("mode", self.mode.to_string()),
            (
                "iterative",
                if self.iterative_applicable { "applicable" } else { "inapplicable" }.to_string(),
            ),
            ("queries", self.queries.to_string()),
            ("skipped", self.skipped.to_string()),
            ("mAP", format!("{:.4}", self.map)),
            ("runtime_s", format!("{:.3}", self.runtime_secs)),
        ];
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
    }
}

pub fn evaluate(
    ranker: &Ranker,
    provider: &dyn EmbeddingProvider,
    dataset: &RankingDataset,
    iter_cfg: &IterConfig,
    mode: RankMode,
) -> Result<EvalReport> {
    if provider.dim() != ranker.config().dim {
        return Err(Error::Config(format!(
            "embedding dimension {} does not match model dimension {}",
            provider.dim(),
            ranker.config().dim
        )));
    }
    iter_cfg.validate()?;
    let start = Instant::now();
    let per_query: Vec<QueryAp> = dataset
        .records
        .par_iter()
        .map(|r| {
            if r.positives() == 0 {
                return Ok(QueryAp {
                    query_id: r.query_id.clone(),
                    ap: None,
                });
            }
            let items: Vec<TextItem<'_>> = r.passages.iter().map(|p| TextItem { id: &p.id, text: &p.text }).collect();
            let query = TextItem {
                id: &r.query_id,
                text: &r.query,
            };
            let ranked = rank_passages(ranker, provider, query, &items, iter_cfg, mode)?;
            Ok(QueryAp {
                query_id: r.query_id.clone(),
                ap: average_precision(&ranked.ranks, &r.labels())?,
            })
        })
        .collect::<Result<_>>()?;
    let aps: Vec<Option<f64>> = per_query.iter().map(|q| q.ap).collect();
    let (map, skipped) = mean_average_precision(&aps);
    Ok(EvalReport {
        mode,
        iterative_applicable: ranker.config().feature_mode.is_listwise(),
        map,
        queries: dataset.len(),
        skipped,
        per_query,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}
