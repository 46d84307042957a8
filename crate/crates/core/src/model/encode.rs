use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{build_mask, FeatureMode, ModelConfig, ModelParams};
use crate::embedder::{AdapterParams, EmbeddingProvider, TextItem, ADAPTER_BIAS, ADAPTER_WEIGHT};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var, LAYER_NORM_EPS};

/// Per-passage scores: the two unbounded logits and the fused probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub s_origin: f64,
    pub s_list: f64,
    pub s_final: f64,
}

/// Graph handles of the `N × 1` score columns.
#[derive(Debug, Clone, Copy)]
pub struct ScoreVars {
    pub origin: Option<Var>,
    pub list: Option<Var>,
    pub final_scores: Var,
}

type Vars = BTreeMap<String, Var>;

fn var<'a>(vars: &'a Vars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))
}

/// Encoder stack over `[h_q + e_q; H + e_p]`. `hq` is `1 × d`, `hp` is `N × d`.
pub(crate) fn record_encode(
    g: &mut Graph,
    vars: &Vars,
    cfg: &ModelConfig,
    hq: Var,
    hp: Var,
) -> Result<(Var, Var)> {
    let n = g.value(hp).rows();
    let q0 = g.add_row(hq, var(vars, "e_q")?)?;
    let p0 = g.add_row(hp, var(vars, "e_p")?)?;
    let mut z = g.concat_rows(&[q0, p0])?;
    let mask = build_mask(cfg.attention, n);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    for l in 0..cfg.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        let q = g.matmul(z, var(vars, &p("attn.w_q"))?)?;
        let k = g.matmul(z, var(vars, &p("attn.w_k"))?)?;
        let v = g.matmul(z, var(vars, &p("attn.w_v"))?)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, scale);
            let attn = g.masked_softmax(logits, &mask)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let joined = g.concat_cols(&heads)?;
        let attn_out = g.matmul(joined, var(vars, &p("attn.w_o"))?)?;
        let res = g.add(z, attn_out)?;
        let z1 = g.layer_norm(
            res,
            var(vars, &p("ln1.gain"))?,
            var(vars, &p("ln1.bias"))?,
            LAYER_NORM_EPS,
        )?;
        let hidden = g.matmul(z1, var(vars, &p("ffn.w1"))?)?;
        let hidden = g.add_row(hidden, var(vars, &p("ffn.b1"))?)?;
        let hidden = g.gelu(hidden);
        let ff = g.matmul(hidden, var(vars, &p("ffn.w2"))?)?;
        let ff = g.add_row(ff, var(vars, &p("ffn.b2"))?)?;
        let res = g.add(z1, ff)?;
        z = g.layer_norm(
            res,
            var(vars, &p("ln2.gain"))?,
            var(vars, &p("ln2.bias"))?,
            LAYER_NORM_EPS,
        )?;
    }
    let zq = g.slice_rows(z, 0, 1)?;
    let zp = g.slice_rows(z, 1, n + 1)?;
    Ok((zq, zp))
}

/// One-hidden-layer MLP on the row-wise concatenation `[query ; passage_i]`.
fn record_pair_mlp(g: &mut Graph, vars: &Vars, head: &str, q: Var, p: Var) -> Result<Var> {
    let n = g.value(p).rows();
    let repeated = g.concat_rows(&vec![q; n])?;
    let x = g.concat_cols(&[repeated, p])?;
    record_mlp(g, vars, head, x)
}

fn record_mlp(g: &mut Graph, vars: &Vars, head: &str, x: Var) -> Result<Var> {
    let h = g.matmul(x, var(vars, &format!("{head}.w1"))?)?;
    let h = g.add_row(h, var(vars, &format!("{head}.b1"))?)?;
    let h = g.gelu(h);
    let o = g.matmul(h, var(vars, &format!("{head}.w2"))?)?;
    g.add_row(o, var(vars, &format!("{head}.b2"))?)
}

pub(crate) fn record_scores(
    g: &mut Graph,
    vars: &Vars,
    cfg: &ModelConfig,
    hq: Var,
    hp: Var,
) -> Result<ScoreVars> {
    match cfg.feature_mode {
        FeatureMode::OriginalOnly => {
            let origin = record_pair_mlp(g, vars, "mlp_ori", hq, hp)?;
            let final_scores = g.sigmoid(origin);
            Ok(ScoreVars {
                origin: Some(origin),
                list: None,
                final_scores,
            })
        }
        FeatureMode::ListwiseOnly => {
            let (zq, zp) = record_encode(g, vars, cfg, hq, hp)?;
            let list = record_pair_mlp(g, vars, "mlp_list", zq, zp)?;
            let final_scores = g.sigmoid(list);
            Ok(ScoreVars {
                origin: None,
                list: Some(list),
                final_scores,
            })
        }
        FeatureMode::Fused => {
            let origin = record_pair_mlp(g, vars, "mlp_ori", hq, hp)?;
            let (zq, zp) = record_encode(g, vars, cfg, hq, hp)?;
            let list = record_pair_mlp(g, vars, "mlp_list", zq, zp)?;
            let pair = g.concat_cols(&[origin, list])?;
            let fused = record_mlp(g, vars, "mlp_fused", pair)?;
            let final_scores = g.sigmoid(fused);
            Ok(ScoreVars {
                origin: Some(origin),
                list: Some(list),
                final_scores,
            })
        }
    }
}

fn check_inputs(d: usize, h_q: &Tensor, h_list: &[Tensor]) -> Result<()> {
    if h_list.is_empty() {
        return Err(Error::Precondition("cannot rank an empty passage list".into()));
    }
    if h_q.len() != d {
        return Err(Error::dim("query feature", h_q.shape(), &[d]));
    }
    if let Some(bad) = h_list.iter().find(|h| h.len() != d) {
        return Err(Error::dim("passage feature", bad.shape(), &[d]));
    }
    Ok(())
}

fn stack(h_list: &[Tensor]) -> Tensor {
    let d = h_list[0].len();
    let data = h_list.iter().flat_map(|h| h.data().iter().copied()).collect();
    Tensor::from_raw(vec![h_list.len(), d], data)
}

fn as_row(h: &Tensor) -> Tensor {
    Tensor::from_raw(vec![1, h.len()], h.data().to_vec())
}

fn breakdowns(g: &Graph, sv: &ScoreVars) -> Vec<ScoreBreakdown> {
    let fin = g.value(sv.final_scores).data();
    let col = |v: Option<Var>| v.map(|v| g.value(v).data().to_vec());
    let (origin, list) = (col(sv.origin), col(sv.list));
    (0..fin.len())
        .map(|i| ScoreBreakdown {
            s_origin: origin.as_ref().map_or(0.0, |o| o[i]),
            s_list: list.as_ref().map_or(0.0, |l| l[i]),
            s_final: fin[i],
        })
        .collect()
}

/// Listwise features `(z_q, [z_1, …, z_N])` for already-adapted features.
pub fn list_encode(
    params: &ModelParams,
    h_q: &Tensor,
    h_list: &[Tensor],
) -> Result<(Tensor, Vec<Tensor>)> {
    let d = params.config.dim;
    check_inputs(d, h_q, h_list)?;
    let mut g = Graph::new();
    let vars = g.params_from(&params.store);
    let hq = g.constant(as_row(h_q));
    let hp = g.constant(stack(h_list));
    let (zq, zp) = record_encode(&mut g, &vars, &params.config, hq, hp)?;
    let zq = Tensor::vector(g.value(zq).data().to_vec());
    let zp = g.value(zp);
    let list = (0..zp.rows()).map(|i| Tensor::vector(zp.row(i).to_vec())).collect();
    Ok((zq, list))
}

/// Fused scores for already-adapted features, in passage order.
pub fn score(params: &ModelParams, h_q: &Tensor, h_list: &[Tensor]) -> Result<Vec<ScoreBreakdown>> {
    check_inputs(params.config.dim, h_q, h_list)?;
    let mut g = Graph::new();
    let vars = g.params_from(&params.store);
    let hq = g.constant(as_row(h_q));
    let hp = g.constant(stack(h_list));
    let sv = record_scores(&mut g, &vars, &params.config, hq, hp)?;
    Ok(breakdowns(&g, &sv))
}

/// Records adapter + model over raw provider features, using parameters
/// from a store that holds both the model and adapter tensors.
pub fn record_full(
    g: &mut Graph,
    cfg: &ModelConfig,
    store: &ParamStore,
    raw_q: &Tensor,
    raw_p: &Tensor,
) -> Result<ScoreVars> {
    let vars = g.params_from(store);
    let w = var(&vars, ADAPTER_WEIGHT)?;
    let b = var(&vars, ADAPTER_BIAS)?;
    let wt = g.transpose(w);
    let rows = g.constant(Tensor::from_raw(
        vec![raw_p.rows() + 1, cfg.dim],
        raw_q.data().iter().chain(raw_p.data()).copied().collect(),
    ));
    let adapted = g.matmul(rows, wt)?;
    let adapted = g.add_row(adapted, b)?;
    let n = raw_p.rows();
    let hq = g.slice_rows(adapted, 0, 1)?;
    let hp = g.slice_rows(adapted, 1, n + 1)?;
    record_scores(g, &vars, cfg, hq, hp)
}

/// A deployable model: list transformer and scoring heads plus the
/// embedding adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranker {
    pub model: ModelParams,
    pub adapter: AdapterParams,
}

impl Ranker {
    pub fn new(model: ModelParams, adapter: AdapterParams) -> Result<Self> {
        if adapter.dim() != model.config.dim {
            return Err(Error::Config(format!(
                "adapter dimension {} does not match model dimension {}",
                adapter.dim(),
                model.config.dim
            )));
        }
        Ok(Self { model, adapter })
    }

    /// Fresh model with an identity adapter.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let model = ModelParams::init(config)?;
        let adapter = AdapterParams::identity(config.dim);
        Ok(Self { model, adapter })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Model and adapter tensors in one store.
    pub fn param_store(&self) -> ParamStore {
        let mut s = self.model.store.clone();
        s.extend(self.adapter.to_store());
        s
    }

    pub fn from_param_store(config: ModelConfig, mut store: ParamStore) -> Result<Self> {
        let adapter = AdapterParams::from_store(&store)?;
        store.remove(ADAPTER_WEIGHT);
        store.remove(ADAPTER_BIAS);
        Self::new(ModelParams::from_store(config, store)?, adapter)
    }

    /// Raw provider features: a `1 × d` query row and an `N × d` passage matrix.
    pub fn embed_inputs(
        &self,
        provider: &dyn EmbeddingProvider,
        query: TextItem<'_>,
        passages: &[TextItem<'_>],
    ) -> Result<(Tensor, Tensor)> {
        let d = self.config().dim;
        if provider.dim() != d {
            return Err(Error::Config(format!(
                "embedding dimension {} does not match model dimension {d}",
                provider.dim()
            )));
        }
        if passages.is_empty() {
            return Err(Error::Precondition("cannot rank an empty passage list".into()));
        }
        let q = provider.embed(query)?.values;
        let mut data = Vec::with_capacity(passages.len() * d);
        for p in passages {
            data.extend_from_slice(provider.embed(*p)?.values.data());
        }
        Ok((as_row(&q), Tensor::from_raw(vec![passages.len(), d], data)))
    }

    /// Scores raw provider features (adapter applied internally).
    pub fn score_embedded(&self, raw_q: &Tensor, raw_p: &Tensor) -> Result<Vec<ScoreBreakdown>> {
        let d = self.config().dim;
        if raw_q.len() != d || raw_p.cols() != d {
            return Err(Error::dim("score_embedded", raw_q.shape(), raw_p.shape()));
        }
        let mut g = Graph::new();
        let store = self.param_store();
        let sv = record_full(&mut g, self.config(), &store, raw_q, raw_p)?;
        let out = breakdowns(&g, &sv);
        if out.iter().any(|b| !b.s_final.is_finite()) {
            return Err(Error::NonFinite("score".into()));
        }
        Ok(out)
    }

    /// Scores a subset of the rows of `raw_p`.
    pub fn score_subset(
        &self,
        raw_q: &Tensor,
        raw_p: &Tensor,
        subset: &[usize],
    ) -> Result<Vec<ScoreBreakdown>> {
        let d = raw_p.cols();
        let data = subset.iter().flat_map(|&i| raw_p.row(i).iter().copied()).collect();
        self.score_embedded(raw_q, &Tensor::from_raw(vec![subset.len(), d], data))
    }

    pub fn score_texts(
        &self,
        provider: &dyn EmbeddingProvider,
        query: TextItem<'_>,
        passages: &[TextItem<'_>],
    ) -> Result<Vec<ScoreBreakdown>> {
        let (q, p) = self.embed_inputs(provider, query, passages)?;
        self.score_embedded(&q, &p)
    }
}
