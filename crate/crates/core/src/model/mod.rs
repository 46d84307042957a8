//! The list transformer and its fused scoring head.
//!
//! The query feature and all passage features form one sequence
//! `[h_q + e_q, h_1 + e_p, …, h_N + e_p]`. Post-norm encoder blocks run over
//! it with an attention mask chosen by [`AttentionVariant`]; three small
//! MLPs then turn original and listwise features into one probability per
//! passage.

mod checkpoint;
mod encode;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use encode::{list_encode, record_full, score, Ranker, ScoreBreakdown, ScoreVars};

use crate::error::{Error, Result};
use crate::numerics::{Mask, ParamStore, Tensor};

pub const FUSED_HIDDEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    /// Query attends only to itself; passages attend to everything.
    #[default]
    List,
    Bidirectional,
    /// Query attends to everything; each passage sees only itself and the query.
    Passage,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 3] = [Self::List, Self::Bidirectional, Self::Passage];
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "list" => Ok(Self::List),
            "bidirectional" => Ok(Self::Bidirectional),
            "passage" => Ok(Self::Passage),
            other => Err(Error::Config(format!("unknown attention variant `{other}`"))),
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::List => "list",
            Self::Bidirectional => "bidirectional",
            Self::Passage => "passage",
        })
    }
}

/// Which features reach the final score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    #[default]
    Fused,
    ListwiseOnly,
    OriginalOnly,
}

impl FeatureMode {
    /// Whether a passage's score depends on the other passages it is
    /// scored with.
    pub fn is_listwise(self) -> bool {
        !matches!(self, Self::OriginalOnly)
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Self::Fused),
            "listwise-only" => Ok(Self::ListwiseOnly),
            "original-only" => Ok(Self::OriginalOnly),
            other => Err(Error::Config(format!("unknown feature mode `{other}`"))),
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fused => "fused",
            Self::ListwiseOnly => "listwise-only",
            Self::OriginalOnly => "original-only",
        })
    }
}

fn default_layers() -> usize {
    2
}

fn default_heads() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    pub ffn_dim: usize,
    #[serde(default)]
    pub attention: AttentionVariant,
    #[serde(default)]
    pub feature_mode: FeatureMode,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            layers: default_layers(),
            heads: default_heads(),
            ffn_dim: 2 * dim,
            attention: AttentionVariant::List,
            feature_mode: FeatureMode::Fused,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.ffn_dim == 0 || self.heads == 0 {
            return Err(Error::Config("dim, heads and ffn_dim must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one layer is required".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Attention mask over `[query, p_1, …, p_N]`.
pub fn build_mask(variant: AttentionVariant, n_passages: usize) -> Mask {
    let n = n_passages + 1;
    match variant {
        AttentionVariant::List => Mask::from_fn(n, n, |r, c| r != 0 || c == 0),
        AttentionVariant::Bidirectional => Mask::from_fn(n, n, |_, _| true),
        AttentionVariant::Passage => Mask::from_fn(n, n, |r, c| r == 0 || c == 0 || c == r),
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform { fan_in: usize },
    Ones,
    Zeros,
}

/// Every parameter tensor of a model with this configuration, in
/// initialization order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.dim;
    let f = cfg.ffn_dim;
    let mut out = vec![
        ("e_q".to_string(), vec![d], Init::Uniform { fan_in: d }),
        ("e_p".to_string(), vec![d], Init::Uniform { fan_in: d }),
    ];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        for w in ["attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"] {
            out.push((p(w), vec![d, d], Init::Uniform { fan_in: d }));
        }
        out.push((p("ln1.gain"), vec![d], Init::Ones));
        out.push((p("ln1.bias"), vec![d], Init::Zeros));
        out.push((p("ffn.w1"), vec![d, f], Init::Uniform { fan_in: d }));
        out.push((p("ffn.b1"), vec![f], Init::Uniform { fan_in: d }));
        out.push((p("ffn.w2"), vec![f, d], Init::Uniform { fan_in: f }));
        out.push((p("ffn.b2"), vec![d], Init::Uniform { fan_in: f }));
        out.push((p("ln2.gain"), vec![d], Init::Ones));
        out.push((p("ln2.bias"), vec![d], Init::Zeros));
    }
    for head in ["mlp_ori", "mlp_list"] {
        out.push((format!("{head}.w1"), vec![2 * d, d], Init::Uniform { fan_in: 2 * d }));
        out.push((format!("{head}.b1"), vec![d], Init::Uniform { fan_in: 2 * d }));
        out.push((format!("{head}.w2"), vec![d, 1], Init::Uniform { fan_in: d }));
        out.push((format!("{head}.b2"), vec![1], Init::Uniform { fan_in: d }));
    }
    let h = FUSED_HIDDEN;
    out.push(("mlp_fused.w1".into(), vec![2, h], Init::Uniform { fan_in: 2 }));
    out.push(("mlp_fused.b1".into(), vec![h], Init::Uniform { fan_in: 2 }));
    out.push(("mlp_fused.w2".into(), vec![h, 1], Init::Uniform { fan_in: h }));
    out.push(("mlp_fused.b2".into(), vec![1], Init::Uniform { fan_in: h }));
    out
}

/// Expected shape of every model tensor.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Model configuration plus its named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

/// Deterministic initialization from `config.seed`.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(config) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Ones => vec![1.0; n],
            Init::Zeros => vec![0.0; n],
        };
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(ModelParams {
        config: config.clone(),
        store,
    })
}

impl ModelParams {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        init_params(config)
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Checks that `store` holds exactly the tensors `config` calls for.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        for (name, shape) in &shapes {
            let t = store
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Format(format!("tensor `{name}` holds non-finite values")));
            }
        }
        if let Some(extra) = store.names().find(|n| !shapes.iter().any(|(s, _)| s == n)) {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self { config, store })
    }
}
