//! Staged training with a first/second-moment optimizer.
//!
//! Each stage names the parameters it keeps frozen. The default schedule
//! trains the transformer and heads with the embedding adapter frozen, then
//! trains everything with a larger margin.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::{EmbeddingProvider, TextItem, ADAPTER_BIAS, ADAPTER_WEIGHT};
use crate::error::{Error, Result};
use crate::evalkit::RankingDataset;
use crate::loss::{
    bce_loss, bce_loss_grad, circle_loss_with_weights, circle_weights, CircleLossConfig,
    LabeledScores, LossKind,
};
use crate::model::{record_full, ModelConfig, Ranker};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

fn default_epochs() -> usize {
    1
}
fn default_batch_size() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-3
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_group_size() -> usize {
    8
}
fn default_gamma() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Stop the stage after this many optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Query groups per batch.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub margin: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub frozen: Vec<String>,
    /// Rescale the gradient to at most this global L2 norm.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    /// Training data for this stage; falls back to the run's dataset.
    #[serde(default)]
    pub data: Option<PathBuf>,
}

impl StageConfig {
    pub fn new(margin: f64) -> Self {
        Self {
            epochs: default_epochs(),
            max_steps: None,
            batch_size: default_batch_size(),
            margin,
            learning_rate: default_lr(),
            frozen: Vec::new(),
            grad_clip: default_clip(),
            data: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stages: Vec<StageConfig>,
    /// Passages sampled per query.
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Write a checkpoint every this many steps (and at stage ends) when
    /// `checkpoint_dir` is set.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut first = StageConfig::new(-0.2);
        first.epochs = 4;
        first.frozen = vec![ADAPTER_WEIGHT.into(), ADAPTER_BIAS.into()];
        let mut second = StageConfig::new(0.1);
        second.epochs = 2;
        Self {
            stages: vec![first, second],
            group_size: default_group_size(),
            seed: 0,
            loss: LossKind::Circle,
            gamma: default_gamma(),
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!("group_size must be at least 2, got {}", self.group_size)));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one training stage is required".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.batch_size == 0 {
                return Err(Error::Config(format!("stage {i}: batch_size must be positive")));
            }
            if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
                return Err(Error::Config(format!("stage {i}: learning_rate must be positive")));
            }
            if s.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
                return Err(Error::Config(format!("stage {i}: grad_clip must be positive")));
            }
            CircleLossConfig::new(s.margin, self.gamma)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub stage: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub elapsed_secs: f64,
}

/// Passage indices sampled for one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryGroup {
    pub query: usize,
    pub passages: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batches {
    pub batches: Vec<Vec<QueryGroup>>,
    /// Queries with no passages.
    pub skipped: usize,
}

/// Samples one group per query from per-query labels, shuffles the groups
/// and cuts them into batches.
pub fn sample_batches(labels: &[Vec<bool>], group_size: usize, batch_size: usize, seed: u64) -> Result<Batches> {
    if labels.is_empty() {
        return Err(Error::Precondition("cannot batch an empty dataset".into()));
    }
    if group_size < 2 || batch_size == 0 {
        return Err(Error::Config("group_size must be ≥ 2 and batch_size ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    let mut skipped = 0;
    for (q, ls) in labels.iter().enumerate() {
        if ls.is_empty() {
            skipped += 1;
            continue;
        }
        let mut pos: Vec<usize> = (0..ls.len()).filter(|&i| ls[i]).collect();
        let mut neg: Vec<usize> = (0..ls.len()).filter(|&i| !ls[i]).collect();
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        pos.truncate(group_size - 1);
        neg.truncate(group_size - pos.len());
        let mut passages = pos;
        passages.extend(neg);
        passages.shuffle(&mut rng);
        groups.push(QueryGroup { query: q, passages });
    }
    groups.shuffle(&mut rng);
    let batches = groups.chunks(batch_size).map(<[QueryGroup]>::to_vec).collect();
    Ok(Batches { batches, skipped })
}

pub fn make_batches(dataset: &RankingDataset, group_size: usize, batch_size: usize, seed: u64) -> Result<Batches> {
    let labels: Vec<Vec<bool>> = dataset.records.iter().map(|r| r.labels()).collect();
    sample_batches(&labels, group_size, batch_size, seed)
}

/// A dataset with raw provider features computed once.
#[derive(Debug, Clone)]
pub struct EmbeddedData {
    pub queries: Vec<Tensor>,
    pub passages: Vec<Tensor>,
    pub labels: Vec<Vec<bool>>,
}

impl EmbeddedData {
    pub fn new(dataset: &RankingDataset, provider: &dyn EmbeddingProvider) -> Result<Self> {
        let d = provider.dim();
        let mut queries = Vec::with_capacity(dataset.len());
        let mut passages = Vec::with_capacity(dataset.len());
        for r in &dataset.records {
            let q = provider.embed(TextItem {
                id: &r.query_id,
                text: &r.query,
            })?;
            queries.push(Tensor::from_raw(vec![1, d], q.values.into_data()));
            let mut data = Vec::with_capacity(r.passages.len() * d);
            for p in &r.passages {
                data.extend_from_slice(provider.embed(TextItem { id: &p.id, text: &p.text })?.values.data());
            }
            passages.push(Tensor::from_raw(vec![r.passages.len().max(1), d], pad(data, d)));
        }
        Ok(Self {
            queries,
            passages,
            labels: dataset.records.iter().map(|r| r.labels()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Materializes a sampled group.
    pub fn group(&self, g: &QueryGroup) -> EmbeddedGroup {
        let src = &self.passages[g.query];
        let d = src.cols();
        let data = g.passages.iter().flat_map(|&i| src.row(i).iter().copied()).collect();
        EmbeddedGroup {
            query: self.queries[g.query].clone(),
            passages: Tensor::from_raw(vec![g.passages.len(), d], data),
            labels: g.passages.iter().map(|&i| self.labels[g.query][i]).collect(),
        }
    }
}

// Queries without passages keep a placeholder row; batching skips them.
fn pad(mut data: Vec<f64>, d: usize) -> Vec<f64> {
    if data.is_empty() {
        data.resize(d, 0.0);
    }
    data
}

#[derive(Debug, Clone)]
pub struct EmbeddedGroup {
    pub query: Tensor,
    pub passages: Tensor,
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Circle(CircleLossConfig),
    Bce,
}

impl Objective {
    pub fn new(kind: LossKind, margin: f64, gamma: f64) -> Result<Self> {
        Ok(match kind {
            LossKind::Circle => Objective::Circle(CircleLossConfig::new(margin, gamma)?),
            LossKind::Bce => Objective::Bce,
        })
    }
}

/// Batch objective recorded on a graph.
pub struct BatchLoss {
    pub loss: Var,
    pub used: usize,
    pub skipped: usize,
    /// Circle loss weights of each used group at the current parameters.
    pub weights: Vec<Vec<f64>>,
}

/// Mean per-group loss over `groups`. Groups the objective cannot score
/// (circle loss without both labels) are skipped. With `frozen_weights`,
/// circle loss weights come from the caller instead of the current scores.
/// Returns `None` when every group was skipped.
pub fn record_batch_loss(
    g: &mut Graph,
    config: &ModelConfig,
    store: &ParamStore,
    groups: &[EmbeddedGroup],
    objective: &Objective,
    frozen_weights: Option<&[Vec<f64>]>,
) -> Result<Option<BatchLoss>> {
    let mut terms = Vec::new();
    let mut weights = Vec::new();
    let mut skipped = 0;
    for grp in groups {
        let usable = match objective {
            Objective::Circle(_) => grp.labels.iter().any(|&l| l) && grp.labels.iter().any(|&l| !l),
            Objective::Bce => !grp.labels.is_empty(),
        };
        if !usable {
            skipped += 1;
            continue;
        }
        let sv = record_full(g, config, store, &grp.query, &grp.passages)?;
        let scores = g.value(sv.final_scores).data().to_vec();
        let x = LabeledScores::new(scores, grp.labels.clone())?;
        let term = match objective {
            Objective::Circle(cfg) => {
                let w = match frozen_weights {
                    Some(fw) => fw[terms.len()].clone(),
                    None => circle_weights(&x, cfg),
                };
                let (value, grad) = circle_loss_with_weights(&x, cfg, &w)?;
                weights.push(w);
                g.scalar_fn(sv.final_scores, value, grad)?
            }
            Objective::Bce => {
                let value = bce_loss(&x)?;
                let grad = bce_loss_grad(&x)?;
                g.scalar_fn(sv.final_scores, value, grad)?
            }
        };
        terms.push(term);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let loss = g.mean(&terms)?;
    Ok(Some(BatchLoss {
        loss,
        used: terms.len(),
        skipped,
        weights,
    }))
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates every parameter of `store` not listed in `frozen`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamStore, frozen: &BTreeSet<String>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in store.iter_mut() {
            if frozen.contains(name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    /// Groups the objective could not use.
    pub skipped_groups: usize,
    /// Queries without passages.
    pub skipped_queries: usize,
}

/// Runs one stage in place on `ranker`. On a non-finite loss the ranker
/// keeps the parameters of the last good step.
pub fn train_stage(
    ranker: &mut Ranker,
    data: &EmbeddedData,
    stage: &StageConfig,
    train: &TrainConfig,
    stage_index: usize,
) -> Result<TrainReport> {
    let mut step_offset = 0;
    train_stage_from(ranker, data, stage, train, stage_index, &mut step_offset)
}

fn train_stage_from(
    ranker: &mut Ranker,
    data: &EmbeddedData,
    stage: &StageConfig,
    train: &TrainConfig,
    stage_index: usize,
    global_step: &mut usize,
) -> Result<TrainReport> {
    train.validate()?;
    let config = ranker.config().clone();
    let mut store = ranker.param_store();
    let frozen: BTreeSet<String> = stage.frozen.iter().cloned().collect();
    if let Some(missing) = frozen.iter().find(|n| !store.contains(n)) {
        return Err(Error::Config(format!("frozen parameter `{missing}` does not exist")));
    }
    let objective = Objective::new(train.loss, stage.margin, train.gamma)?;
    let mut adam = Adam::new(stage.learning_rate);
    let mut report = TrainReport::default();
    let start = Instant::now();
    let mut steps = 0;

    'epochs: for epoch in 0..stage.epochs {
        let seed = train
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((stage_index as u64) << 32 | epoch as u64);
        let batches = sample_batches(&data.labels, train.group_size, stage.batch_size, seed)?;
        report.skipped_queries += batches.skipped;
        for batch in &batches.batches {
            if stage.max_steps.is_some_and(|m| steps >= m) {
                break 'epochs;
            }
            let groups: Vec<EmbeddedGroup> = batch.iter().map(|g| data.group(g)).collect();
            let mut g = Graph::new();
            let Some(bl) = record_batch_loss(&mut g, &config, &store, &groups, &objective, None)? else {
                report.skipped_groups += groups.len();
                continue;
            };
            report.skipped_groups += bl.skipped;
            let loss = g.value(bl.loss).data()[0];
            if !loss.is_finite() {
                *ranker = Ranker::from_param_store(config, store)?;
                return Err(Error::Diverged { step: *global_step });
            }
            let mut grads = g.backward(bl.loss)?.params();
            for name in &frozen {
                grads.remove(name);
            }
            let grad_norm = grads.global_norm();
            if !grad_norm.is_finite() {
                *ranker = Ranker::from_param_store(config, store)?;
                return Err(Error::Diverged { step: *global_step });
            }
            if let Some(clip) = stage.grad_clip.filter(|&c| grad_norm > c) {
                let k = clip / grad_norm;
                for (_, t) in grads.iter_mut() {
                    t.data_mut().iter_mut().for_each(|x| *x *= k);
                }
            }
            adam.step(&mut store, &grads, &frozen);
            steps += 1;
            *global_step += 1;
            report.records.push(TrainRecord {
                step: *global_step,
                stage: stage_index,
                loss,
                grad_norm,
                elapsed_secs: start.elapsed().as_secs_f64(),
            });
            if let (Some(every), Some(dir)) = (train.checkpoint_every, &train.checkpoint_dir) {
                if every > 0 && *global_step % every == 0 {
                    Ranker::from_param_store(config.clone(), store.clone())?
                        .save(dir.join(format!("step-{:06}.json", *global_step)))?;
                }
            }
        }
    }
    if report.skipped_groups > 0 {
        log::warn!(
            "stage {stage_index}: skipped {} query groups without both positives and negatives",
            report.skipped_groups
        );
    }
    *ranker = Ranker::from_param_store(config, store)?;
    if let Some(dir) = &train.checkpoint_dir {
        ranker.save(dir.join(format!("stage-{stage_index}.json")))?;
    }
    Ok(report)
}

/// Runs every stage in order; `stage_data[i]` feeds stage `i`.
pub fn train(ranker: &mut Ranker, train: &TrainConfig, stage_data: &[&EmbeddedData]) -> Result<TrainReport> {
    train.validate()?;
    if stage_data.len() != train.stages.len() {
        return Err(Error::Config(format!(
            "{} stages but {} datasets",
            train.stages.len(),
            stage_data.len()
        )));
    }
    let mut all = TrainReport::default();
    let mut global_step = 0;
    for (i, (stage, data)) in train.stages.iter().zip(stage_data).enumerate() {
        let r = train_stage_from(ranker, data, stage, train, i, &mut global_step)?;
        all.records.extend(r.records);
        all.skipped_groups += r.skipped_groups;
        all.skipped_queries += r.skipped_queries;
    }
    Ok(all)
}
