use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Passage, QueryRecord, RankingDataset};
use crate::error::{Error, Result};

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "ch"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

/// Generator settings for a topical corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_queries: usize,
    pub passages_per_query: usize,
    pub n_topics: usize,
    pub words_per_topic: usize,
    pub query_words: usize,
    pub passage_words: usize,
    /// Upper bound on positives per query.
    pub max_positives: usize,
    /// Probability that a negative copies words from the query.
    pub hard_negative_rate: f64,
    /// Query words copied into a hard negative.
    pub hard_overlap: usize,
}

impl SynthConfig {
    pub fn new(seed: u64, n_queries: usize, passages_per_query: usize, n_topics: usize) -> Self {
        Self {
            seed,
            n_queries,
            passages_per_query,
            n_topics,
            words_per_topic: 16,
            query_words: 3,
            passage_words: 6,
            max_positives: 3,
            hard_negative_rate: 0.3,
            hard_overlap: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_topics < 2 {
            return Err(Error::Config(format!("n_topics must be at least 2, got {}", self.n_topics)));
        }
        if self.passages_per_query < 2 {
            return Err(Error::Config("passages_per_query must be at least 2".into()));
        }
        if self.query_words == 0 || self.passage_words == 0 || self.max_positives == 0 {
            return Err(Error::Config("word counts and max_positives must be positive".into()));
        }
        if self.words_per_topic < self.query_words.max(self.passage_words) {
            return Err(Error::Config("words_per_topic is smaller than a query or passage".into()));
        }
        if self.hard_overlap > self.query_words || self.hard_overlap > self.passage_words {
            return Err(Error::Config("hard_overlap exceeds the query or passage length".into()));
        }
        if !(0.0..=1.0).contains(&self.hard_negative_rate) {
            return Err(Error::Config("hard_negative_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn vocabularies(rng: &mut ChaCha8Rng, topics: usize, per_topic: usize) -> Vec<Vec<String>> {
    let mut seen = BTreeSet::new();
    (0..topics)
        .map(|_| {
            let mut words = Vec::with_capacity(per_topic);
            while words.len() < per_topic {
                let syllables = rng.random_range(2..=3);
                let w: String = (0..syllables)
                    .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
                    .collect();
                if seen.insert(w.clone()) {
                    words.push(w);
                }
            }
            words
        })
        .collect()
}

fn pick(rng: &mut ChaCha8Rng, vocab: &[String], k: usize) -> Vec<String> {
    vocab.choose_multiple(rng, k).cloned().collect()
}

/// Topical corpus: each query draws words from one topic; positives come
/// from the same topic, negatives from other topics, and hard negatives
/// also copy some of the query's words.
pub fn synthesize(cfg: &SynthConfig) -> Result<RankingDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = vocabularies(&mut rng, cfg.n_topics, cfg.words_per_topic);
    let mut records = Vec::with_capacity(cfg.n_queries);
    for q in 0..cfg.n_queries {
        let topic = rng.random_range(0..cfg.n_topics);
        let query_words = pick(&mut rng, &vocab[topic], cfg.query_words);
        let max_pos = cfg.max_positives.min(cfg.passages_per_query - 1);
        let n_pos = rng.random_range(1..=max_pos);
        let mut passages = Vec::with_capacity(cfg.passages_per_query);
        for i in 0..cfg.passages_per_query {
            let label = i < n_pos;
            let words = if label {
                pick(&mut rng, &vocab[topic], cfg.passage_words)
            } else {
                let other = (topic + rng.random_range(1..cfg.n_topics)) % cfg.n_topics;
                let mut w = if rng.random_bool(cfg.hard_negative_rate) {
                    let mut w = pick(&mut rng, &query_words, cfg.hard_overlap);
                    w.extend(pick(&mut rng, &vocab[other], cfg.passage_words - cfg.hard_overlap));
                    w
                } else {
                    pick(&mut rng, &vocab[other], cfg.passage_words)
                };
                w.shuffle(&mut rng);
                w
            };
            passages.push((label, words.join(" ")));
        }
        passages.shuffle(&mut rng);
        records.push(QueryRecord {
            query_id: format!("q{q}"),
            query: query_words.join(" "),
            passages: passages
                .into_iter()
                .enumerate()
                .map(|(i, (label, text))| Passage {
                    id: format!("q{q}p{i}"),
                    text,
                    label,
                })
                .collect(),
        });
    }
    RankingDataset::new(records)
}

pub fn synthesize_dataset(
    seed: u64,
    n_queries: usize,
    passages_per_query: usize,
    n_topics: usize,
) -> Result<RankingDataset> {
    synthesize(&SynthConfig::new(seed, n_queries, passages_per_query, n_topics))
}
