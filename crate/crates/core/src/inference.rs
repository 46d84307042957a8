//! Ranking from scores, directly or by iterative elimination.
//!
//! Iterative inference scores the surviving passages, fixes the ranks of the
//! worst `ceil(|P|·β)` of them from the bottom up, and rescores the rest in
//! smaller company until at most `α` remain; those are ranked in one final
//! pass.

use std::cmp::Ordering;
use std::fmt::Display;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterConfig {
    /// Stop iterating once at most this many passages remain.
    pub alpha: usize,
    /// Fraction of the survivors ranked and removed per round.
    pub beta: f64,
}

impl Default for IterConfig {
    fn default() -> Self {
        Self {
            alpha: 20,
            beta: 0.2,
        }
    }
}

impl IterConfig {
    pub fn new(alpha: usize, beta: f64) -> Result<Self> {
        let c = Self { alpha, beta };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 1 {
            return Err(Error::Config("alpha must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    /// 1-based rank of each input passage.
    pub ranks: Vec<usize>,
    /// Score of each passage in the round its rank was fixed.
    pub scores: Vec<f64>,
    /// Number of scoring passes.
    pub rounds: usize,
}

impl RankedResult {
    /// Input indices ordered from rank 1 downward.
    pub fn order(&self) -> Vec<usize> {
        let mut order = vec![0; self.ranks.len()];
        for (i, &r) in self.ranks.iter().enumerate() {
            order[r - 1] = i;
        }
        order
    }
}

/// Indices sorted by descending score, ties broken by ascending index.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    idx
}

/// 1-based ranks by descending score.
pub fn rank_direct(scores: &[f64]) -> Vec<usize> {
    let mut ranks = vec![0; scores.len()];
    for (pos, i) in descending_order(scores).into_iter().enumerate() {
        ranks[i] = pos + 1;
    }
    ranks
}

/// `ceil(n · β)`, snapping products within rounding noise of an integer.
pub fn removal_count(n: usize, beta: f64) -> usize {
    let x = n as f64 * beta;
    let nearest = x.round();
    let c = if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (c as usize).clamp(1, n)
}

/// Scoring passes iterative inference makes on `n` passages.
pub fn expected_rounds(n: usize, cfg: &IterConfig) -> usize {
    let mut left = n;
    let mut rounds = 0;
    while left > cfg.alpha {
        left -= removal_count(left, cfg.beta);
        rounds += 1;
    }
    if left > 0 {
        rounds += 1;
    }
    rounds
}

/// Iterative inference over `n` passages.
///
/// `scorer` receives the input indices of the surviving passages, in input
/// order, and returns one score per index.
pub fn iterative_rerank<F, E>(n: usize, cfg: &IterConfig, mut scorer: F) -> Result<RankedResult>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>, E>,
    E: Display,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Precondition("cannot rank an empty passage list".into()));
    }
    let mut ranks = vec![0; n];
    let mut kept_scores = vec![0.0; n];
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut rounds = 0;

    let mut score_round = |remaining: &[usize], round: usize| -> Result<Vec<f64>> {
        let s = scorer(remaining).map_err(|e| Error::Scorer {
            round,
            message: e.to_string(),
        })?;
        if s.len() != remaining.len() {
            return Err(Error::Scorer {
                round,
                message: format!("returned {} scores for {} passages", s.len(), remaining.len()),
            });
        }
        Ok(s)
    };

    while remaining.len() > cfg.alpha {
        rounds += 1;
        let nums = removal_count(remaining.len(), cfg.beta);
        let scores = score_round(&remaining, rounds)?;
        let order = descending_order(&scores);
        let mut size = remaining.len();
        let mut removed = vec![false; remaining.len()];
        for &pos in order.iter().rev().take(nums) {
            let idx = remaining[pos];
            ranks[idx] = size;
            kept_scores[idx] = scores[pos];
            removed[pos] = true;
            size -= 1;
        }
        remaining = remaining
            .iter()
            .zip(&removed)
            .filter(|(_, &r)| !r)
            .map(|(&i, _)| i)
            .collect();
    }

    if !remaining.is_empty() {
        rounds += 1;
        let scores = score_round(&remaining, rounds)?;
        for (pos, &p) in descending_order(&scores).iter().enumerate() {
            let idx = remaining[p];
            ranks[idx] = pos + 1;
            kept_scores[idx] = scores[p];
        }
    }

    Ok(RankedResult {
        ranks,
        scores: kept_scores,
        rounds,
    })
}

/// Ranks from a single scoring pass.
pub fn direct_rerank<F, E>(n: usize, mut scorer: F) -> Result<RankedResult>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>, E>,
    E: Display,
{
    if n == 0 {
        return Err(Error::Precondition("cannot rank an empty passage list".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let scores = scorer(&all).map_err(|e| Error::Scorer {
        round: 1,
        message: e.to_string(),
    })?;
    if scores.len() != n {
        return Err(Error::Scorer {
            round: 1,
            message: format!("returned {} scores for {n} passages", scores.len()),
        });
    }
    Ok(RankedResult {
        ranks: rank_direct(&scores),
        scores,
        rounds: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::convert::Infallible;

    fn fixed(scores: Vec<f64>) -> impl FnMut(&[usize]) -> Result<Vec<f64>, Infallible> {
        move |subset: &[usize]| Ok(subset.iter().map(|&i| scores[i]).collect())
    }

    /// Repeatedly pick the best remaining item; earliest index wins ties.
    fn selection_sort_ranks(scores: &[f64]) -> Vec<usize> {
        let mut taken = vec![false; scores.len()];
        let mut ranks = vec![0; scores.len()];
        for r in 1..=scores.len() {
            let mut best: Option<usize> = None;
            for i in 0..scores.len() {
                if !taken[i] && best.map_or(true, |b| scores[i] > scores[b]) {
                    best = Some(i);
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            ranks[b] = r;
        }
        ranks
    }

    #[test]
    fn direct_examples() {
        assert_eq!(rank_direct(&[0.9, 0.1, 0.5]), vec![1, 3, 2]);
        assert_eq!(rank_direct(&[0.4, 0.4]), vec![1, 2]);
    }

    #[test]
    fn direct_matches_selection_sort() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100);
        let scores: Vec<f64> = (0..100).map(|_| (rng.random_range(0..40) as f64) / 40.0).collect();
        assert_eq!(rank_direct(&scores), selection_sort_ranks(&scores));
    }

    #[test]
    fn hand_traced_examples() {
        // p1 > p2 > … > p6
        let cfg = IterConfig::new(4, 0.5).unwrap();
        let r = iterative_rerank(6, &cfg, fixed(vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4])).unwrap();
        assert_eq!(r.ranks, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(r.rounds, 2);

        let cfg = IterConfig::new(1, 0.5).unwrap();
        let mut calls = Vec::new();
        let scores = [0.1, 0.2, 0.3, 0.4];
        let r = iterative_rerank(4, &cfg, |s: &[usize]| {
            calls.push(s.to_vec());
            Ok::<_, Infallible>(s.iter().map(|&i| scores[i]).collect())
        })
        .unwrap();
        assert_eq!(r.ranks, vec![4, 3, 2, 1]);
        assert_eq!(r.rounds, 3);
        assert_eq!(calls, vec![vec![0, 1, 2, 3], vec![2, 3], vec![3]]);
    }

    #[test]
    fn small_lists_take_one_pass() {
        let cfg = IterConfig::default();
        let scores = vec![0.3, 0.9, 0.1, 0.5];
        let r = iterative_rerank(4, &cfg, fixed(scores.clone())).unwrap();
        assert_eq!(r.rounds, 1);
        assert_eq!(r.ranks, rank_direct(&scores));
    }

    #[test]
    fn round_count_for_default_config() {
        // 200 → 160 → 128 → 102 → 81 → 64 → 51 → 40 → 32 → 25 → 20, then a final pass.
        assert_eq!(expected_rounds(200, &IterConfig::default()), 11);
        assert_eq!(removal_count(25, 0.2), 5);
        assert_eq!(removal_count(102, 0.2), 21);
        assert_eq!(removal_count(10, 0.3), 3);
        assert_eq!(removal_count(10, 0.31), 4);
    }

    #[test]
    fn scorer_errors_carry_round() {
        let cfg = IterConfig::new(2, 0.5).unwrap();
        let mut n = 0;
        let err = iterative_rerank(8, &cfg, |s: &[usize]| {
            n += 1;
            if n == 2 {
                Err("boom")
            } else {
                Ok(vec![0.0; s.len()])
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Scorer { round: 2, .. }), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(IterConfig::new(0, 0.2).is_err());
        assert!(IterConfig::new(5, 1.0).is_err());
        assert!(IterConfig::new(5, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn ranks_are_a_permutation_and_rounds_match(
            n in 1usize..120, alpha in 1usize..30, beta in 0.05f64..0.95, seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cfg = IterConfig::new(alpha, beta).unwrap();
            // Company-dependent scorer: shift by subset size.
            let base: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let r = iterative_rerank(n, &cfg, |s: &[usize]| {
                Ok::<_, Infallible>(s.iter().map(|&i| (base[i] * (s.len() as f64 + 1.0)).sin()).collect())
            }).unwrap();
            let mut sorted = r.ranks.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (1..=n).collect::<Vec<_>>());
            prop_assert_eq!(r.rounds, expected_rounds(n, &cfg));

            let fixed_r = iterative_rerank(n, &cfg, fixed(base.clone())).unwrap();
            prop_assert_eq!(fixed_r.ranks, rank_direct(&base));
        }

        #[test]
        fn removed_passages_rank_below_survivors(
            n in 2usize..150, alpha in 1usize..25, beta in 0.05f64..0.95, seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cfg = IterConfig::new(alpha, beta).unwrap();
            let base: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut seen: Vec<Vec<usize>> = Vec::new();
            let r = iterative_rerank(n, &cfg, |s: &[usize]| {
                seen.push(s.to_vec());
                Ok::<_, Infallible>(s.iter().map(|&i| (base[i] * (s.len() as f64 + 3.0)).cos()).collect())
            }).unwrap();
            for w in seen.windows(2) {
                prop_assert_eq!(w[0].len() - w[1].len(), removal_count(w[0].len(), beta));
                let worst_kept = w[1].iter().map(|&i| r.ranks[i]).max().unwrap();
                for &i in w[0].iter().filter(|i| !w[1].contains(i)) {
                    prop_assert!(r.ranks[i] > worst_kept);
                }
            }
            let last = seen.last().unwrap().len();
            prop_assert!(last <= alpha || removal_count(last, beta) == last);
        }
    }
}
