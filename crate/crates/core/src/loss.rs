//! Circle loss with self-paced weights, and a binary cross-entropy baseline.
//!
//! The circle loss weights `α` are treated as constants when differentiating:
//! gradients shrink to zero as a score reaches its optimum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, sigmoid, softplus};

/// Scores and binary relevance labels for one query group.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScores {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::dim("labeled scores", &[scores.len()], &[labels.len()]));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Domain("scores must be finite".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }

    fn require_both(&self) -> Result<()> {
        let (p, n) = (self.positives(), self.negatives());
        if p == 0 || n == 0 {
            return Err(Error::Precondition(format!(
                "circle loss needs at least one positive and one negative, got {p} positive and {n} negative"
            )));
        }
        Ok(())
    }
}

/// Margin `m` and scale `γ`. Optima and decision margins are derived on demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleLossConfig {
    pub margin: f64,
    pub gamma: f64,
}

impl Default for CircleLossConfig {
    fn default() -> Self {
        Self {
            margin: -0.2,
            gamma: 10.0,
        }
    }
}

impl CircleLossConfig {
    pub fn new(margin: f64, gamma: f64) -> Result<Self> {
        let cfg = Self { margin, gamma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) || !self.margin.is_finite() {
            return Err(Error::Config(format!(
                "circle loss needs finite margin and gamma > 0, got m={} gamma={}",
                self.margin, self.gamma
            )));
        }
        Ok(())
    }

    pub fn delta_pos(&self) -> f64 {
        1.0 - self.margin
    }

    pub fn delta_neg(&self) -> f64 {
        self.margin
    }

    pub fn optimum_pos(&self) -> f64 {
        1.0 + self.margin
    }

    pub fn optimum_neg(&self) -> f64 {
        -self.margin
    }
}

/// Self-paced weight of every item at its current score.
pub fn circle_weights(x: &LabeledScores, cfg: &CircleLossConfig) -> Vec<f64> {
    x.scores
        .iter()
        .zip(&x.labels)
        .map(|(&s, &pos)| {
            if pos {
                (cfg.optimum_pos() - s).max(0.0)
            } else {
                (s - cfg.optimum_neg()).max(0.0)
            }
        })
        .collect()
}

/// Loss and gradient with the weights held fixed at `weights`.
pub fn circle_loss_with_weights(
    x: &LabeledScores,
    cfg: &CircleLossConfig,
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    x.require_both()?;
    if weights.len() != x.scores.len() {
        return Err(Error::dim("circle weights", &[x.scores.len()], &[weights.len()]));
    }
    let mut neg = Vec::new();
    let mut pos = Vec::new();
    let exponents: Vec<f64> = x
        .scores
        .iter()
        .zip(&x.labels)
        .zip(weights)
        .map(|((&s, &is_pos), &a)| {
            let e = if is_pos {
                -cfg.gamma * a * (s - cfg.delta_pos())
            } else {
                cfg.gamma * a * (s - cfg.delta_neg())
            };
            if is_pos {
                pos.push(e);
            } else {
                neg.push(e);
            }
            e
        })
        .collect();

    let lse_neg = log_sum_exp(&neg);
    let lse_pos = log_sum_exp(&pos);
    let joint = lse_neg + lse_pos;
    let r_neg: f64 = neg.iter().map(|e| e.exp()).sum();
    let r_pos: f64 = pos.iter().map(|e| e.exp()).sum();
    let product = r_neg * r_pos;
    let loss = if product.is_finite() {
        product.ln_1p()
    } else {
        softplus(joint)
    };

    let outer = sigmoid(joint);
    let grad = exponents
        .iter()
        .zip(&x.labels)
        .zip(weights)
        .map(|((&e, &is_pos), &a)| {
            if is_pos {
                -outer * (e - lse_pos).exp() * cfg.gamma * a
            } else {
                outer * (e - lse_neg).exp() * cfg.gamma * a
            }
        })
        .collect();
    Ok((loss, grad))
}

pub fn circle_loss(x: &LabeledScores, cfg: &CircleLossConfig) -> Result<f64> {
    let w = circle_weights(x, cfg);
    circle_loss_with_weights(x, cfg, &w).map(|(l, _)| l)
}

/// Gradient with respect to each score, stopping gradient through the weights.
pub fn circle_loss_grad(x: &LabeledScores, cfg: &CircleLossConfig) -> Result<Vec<f64>> {
    let w = circle_weights(x, cfg);
    circle_loss_with_weights(x, cfg, &w).map(|(_, g)| g)
}

const BCE_CLIP: f64 = 1e-12;

fn check_probabilities(x: &LabeledScores) -> Result<()> {
    if x.scores.is_empty() {
        return Err(Error::Precondition("cross-entropy over zero items".into()));
    }
    if let Some(s) = x.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Domain(format!("probability {s} outside [0, 1]")));
    }
    Ok(())
}

/// Mean binary cross-entropy; probabilities are clipped to `[1e-12, 1 − 1e-12]`.
pub fn bce_loss(x: &LabeledScores) -> Result<f64> {
    check_probabilities(x)?;
    let total: f64 = x
        .scores
        .iter()
        .zip(&x.labels)
        .map(|(&s, &y)| {
            let s = s.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            if y {
                -s.ln()
            } else {
                -(1.0 - s).ln()
            }
        })
        .sum();
    Ok(total / x.scores.len() as f64)
}

pub fn bce_loss_grad(x: &LabeledScores) -> Result<Vec<f64>> {
    check_probabilities(x)?;
    let n = x.scores.len() as f64;
    Ok(x.scores
        .iter()
        .zip(&x.labels)
        .map(|(&s, &y)| {
            let s = s.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            if y {
                -1.0 / (s * n)
            } else {
                1.0 / ((1.0 - s) * n)
            }
        })
        .collect())
}

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Circle,
    Bce,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(Self::Circle),
            "bce" | "cross-entropy" => Ok(Self::Bce),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Circle => "circle",
            Self::Bce => "bce",
        })
    }
}
