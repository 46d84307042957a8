use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::RankingDataset;
use super::evaluate::{evaluate, RankMode};
use crate::embedder::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::inference::IterConfig;
use crate::loss::LossKind;
use crate::model::{AttentionVariant, FeatureMode, ModelConfig, Ranker};
use crate::trainer::{train, EmbeddedData, TrainConfig};

/// Values to sweep per axis. An empty axis keeps the base setting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationAxes {
    #[serde(default)]
    pub attention_variant: Vec<AttentionVariant>,
    #[serde(default)]
    pub feature_mode: Vec<FeatureMode>,
    #[serde(default)]
    pub loss: Vec<LossKind>,
    #[serde(default)]
    pub layers: Vec<usize>,
}

impl AblationAxes {
    /// Parses axis names and values given as strings.
    pub fn from_strings(axes: &BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut out = Self::default();
        for (axis, values) in axes {
            match axis.as_str() {
                "attention_variant" => {
                    out.attention_variant = values.iter().map(|v| v.parse()).collect::<Result<_>>()?
                }
                "feature_mode" => out.feature_mode = values.iter().map(|v| v.parse()).collect::<Result<_>>()?,
                "loss" => out.loss = values.iter().map(|v| v.parse()).collect::<Result<_>>()?,
                "layers" => {
                    out.layers = values
                        .iter()
                        .map(|v| match v.parse::<usize>() {
                            Ok(l) if l >= 1 => Ok(l),
                            _ => Err(Error::Config(format!("invalid layer count `{v}`"))),
                        })
                        .collect::<Result<_>>()?
                }
                other => return Err(Error::Config(format!("unknown ablation axis `{other}`"))),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationBase {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub iter: IterConfig,
    pub mode: RankMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub attention_variant: AttentionVariant,
    pub feature_mode: FeatureMode,
    pub loss: LossKind,
    pub layers: usize,
    pub map: f64,
    pub iterative_applicable: bool,
    pub steps: usize,
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let header = ["attention", "features", "loss", "layers", "iterative", "mAP"];
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.attention_variant.to_string(),
                    r.feature_mode.to_string(),
                    r.loss.to_string(),
                    r.layers.to_string(),
                    if r.iterative_applicable { "yes" } else { "n/a" }.to_string(),
                    format!("{:.4}", r.map),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cols: Vec<&str>| -> String {
            let parts: Vec<String> = cols.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(header.to_vec());
        for row in &cells {
            out += &line(row.iter().map(String::as_str).collect());
        }
        out
    }
}

fn or_base<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Trains and evaluates one model per cell of the cartesian product of
/// `axes`, all from the base seed.
pub fn ablation_run(
    base: &AblationBase,
    axes: &AblationAxes,
    provider: &dyn EmbeddingProvider,
    train_set: &RankingDataset,
    eval_set: &RankingDataset,
) -> Result<AblationReport> {
    let mut cells = Vec::new();
    for &a in &or_base(&axes.attention_variant, base.model.attention) {
        for &f in &or_base(&axes.feature_mode, base.model.feature_mode) {
            for &l in &or_base(&axes.loss, base.train.loss) {
                for &d in &or_base(&axes.layers, base.model.layers) {
                    cells.push((a, f, l, d));
                }
            }
        }
    }
    let data = EmbeddedData::new(train_set, provider)?;
    let rows = cells
        .par_iter()
        .map(|&(attention, feature_mode, loss, layers)| {
            let model = ModelConfig {
                attention,
                feature_mode,
                layers,
                ..base.model.clone()
            };
            model.validate()?;
            let tc = TrainConfig {
                loss,
                ..base.train.clone()
            };
            let mut ranker = Ranker::init(&model)?;
            let stage_data = vec![&data; tc.stages.len()];
            let tr = train(&mut ranker, &tc, &stage_data)?;
            let rep = evaluate(&ranker, provider, eval_set, &base.iter, base.mode)?;
            Ok(AblationRow {
                attention_variant: attention,
                feature_mode,
                loss,
                layers,
                map: rep.map,
                iterative_applicable: rep.iterative_applicable,
                steps: tr.records.len(),
                runtime_secs: rep.runtime_secs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { rows })
}
