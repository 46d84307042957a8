//! Original query and passage features.
//!
//! Features come from an [`EmbeddingProvider`]: either deterministic feature
//! hashing of character trigrams, or vectors precomputed by an external
//! backbone and stored as JSON Lines. A trainable affine [`AdapterParams`]
//! sits between the provider and the ranker.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub const MIN_HASH_DIM: usize = 8;
pub const ADAPTER_WEIGHT: &str = "adapter.weight";
pub const ADAPTER_BIAS: &str = "adapter.bias";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Tensor,
    pub source_id: String,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Text to embed, with the identifier precomputed providers look up.
#[derive(Debug, Clone, Copy)]
pub struct TextItem<'a> {
    pub id: &'a str,
    pub text: &'a str,
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, item: TextItem<'_>) -> Result<EmbeddingVector>;
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn hash_into(buckets: &mut [f64], gram: &str) {
    let h = fnv1a(gram.as_bytes());
    let idx = (h % buckets.len() as u64) as usize;
    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
    buckets[idx] += sign;
}

/// Signed feature hashing of character trigrams into `dim` buckets,
/// L2-normalized. Texts shorter than three characters hash as one gram.
pub fn hash_embed(text: &str, dim: usize) -> Result<EmbeddingVector> {
    if dim < MIN_HASH_DIM {
        return Err(Error::Precondition(format!(
            "hash embedding dimension must be at least {MIN_HASH_DIM}, got {dim}"
        )));
    }
    let mut buckets = vec![0.0; dim];
    let chars: Vec<char> = text.chars().collect();
    if !chars.is_empty() {
        if chars.len() < 3 {
            hash_into(&mut buckets, text);
        } else {
            let mut gram = String::with_capacity(12);
            for w in chars.windows(3) {
                gram.clear();
                gram.extend(w);
                hash_into(&mut buckets, &gram);
            }
        }
        // Signed collisions can cancel everything; fall back to the whole
        // text so only the empty string maps to zero.
        if buckets.iter().all(|&v| v == 0.0) {
            hash_into(&mut buckets, text);
        }
        let norm = buckets.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut buckets {
            *v /= norm;
        }
    }
    Ok(EmbeddingVector {
        values: Tensor::vector(buckets),
        source_id: text.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < MIN_HASH_DIM {
            return Err(Error::Config(format!(
                "hash embedding dimension must be at least {MIN_HASH_DIM}, got {dim}"
            )));
        }
        Ok(Self { dim })
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, item: TextItem<'_>) -> Result<EmbeddingVector> {
        hash_embed(item.text, self.dim)
    }
}

#[derive(Deserialize, Serialize)]
struct EmbeddingRecord {
    id: String,
    vector: Vec<f64>,
}

/// Reads `{"id": ..., "vector": [...]}` lines. Blank lines are ignored.
pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<BTreeMap<String, EmbeddingVector>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        if rec.vector.is_empty() || rec.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: "vector must be non-empty and finite".into(),
            });
        }
        match dim {
            None => dim = Some(rec.vector.len()),
            Some(d) if d != rec.vector.len() => {
                return Err(Error::Format(format!(
                    "{}:{lineno}: vector for `{}` has length {}, expected {d}",
                    path.display(),
                    rec.id,
                    rec.vector.len()
                )));
            }
            Some(_) => {}
        }
        if out.contains_key(&rec.id) {
            return Err(Error::Format(format!(
                "{}:{lineno}: duplicate id `{}`",
                path.display(),
                rec.id
            )));
        }
        let v = EmbeddingVector {
            values: Tensor::vector(rec.vector),
            source_id: rec.id.clone(),
        };
        out.insert(rec.id, v);
    }
    Ok(out)
}

pub fn write_embedding_file<'a>(
    path: impl AsRef<Path>,
    vectors: impl IntoIterator<Item = &'a EmbeddingVector>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in vectors {
        let rec = EmbeddingRecord {
            id: v.source_id.clone(),
            vector: v.values.data().to_vec(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Provider backed by vectors loaded from an embedding file, keyed by id.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    vectors: BTreeMap<String, EmbeddingVector>,
}

impl PrecomputedEmbeddings {
    pub fn new(vectors: BTreeMap<String, EmbeddingVector>) -> Result<Self> {
        let dim = vectors
            .values()
            .next()
            .map(EmbeddingVector::dim)
            .ok_or_else(|| Error::Format("embedding file holds no vectors".into()))?;
        Ok(Self { dim, vectors })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(load_embedding_file(path)?)
    }
}

impl EmbeddingProvider for PrecomputedEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, item: TextItem<'_>) -> Result<EmbeddingVector> {
        self.vectors
            .get(item.id)
            .cloned()
            .ok_or_else(|| Error::Format(format!("no precomputed embedding for id `{}`", item.id)))
    }
}

/// Affine map `weight · v + bias` applied to every original feature.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl AdapterParams {
    /// Identity weight, zero bias.
    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Tensor::identity(dim),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(ADAPTER_WEIGHT, self.weight.clone());
        s.insert(ADAPTER_BIAS, self.bias.clone());
        s
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let weight = store.expect(ADAPTER_WEIGHT)?.clone();
        let bias = store.expect(ADAPTER_BIAS)?.clone();
        let d = bias.len();
        if weight.shape() != [d, d] {
            return Err(Error::dim("adapter", weight.shape(), bias.shape()));
        }
        Ok(Self { weight, bias })
    }

    /// Records the adapter on `g` for a matrix whose rows are embeddings.
    pub fn apply_graph(&self, g: &mut Graph, rows: Var) -> Result<Var> {
        let w = g.param(ADAPTER_WEIGHT, &self.weight);
        let b = g.param(ADAPTER_BIAS, &self.bias);
        let wt = g.transpose(w);
        let out = g.matmul(rows, wt)?;
        g.add_row(out, b)
    }
}

pub fn apply_adapter(v: &EmbeddingVector, a: &AdapterParams) -> Result<Tensor> {
    let d = a.dim();
    if v.dim() != d {
        return Err(Error::dim("apply_adapter", v.values.shape(), a.weight.shape()));
    }
    let mut out = a.bias.data().to_vec();
    for (i, o) in out.iter_mut().enumerate() {
        *o += a.weight.row(i).iter().zip(v.values.data()).map(|(w, x)| w * x).sum::<f64>();
    }
    Ok(Tensor::vector(out))
}
