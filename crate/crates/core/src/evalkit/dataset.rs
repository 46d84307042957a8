use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
    #[serde(serialize_with = "label_out", deserialize_with = "label_in")]
    pub label: bool,
}

fn label_out<S: Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(u8::from(*v))
}

fn label_in<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    match u8::deserialize(d)? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(serde::de::Error::custom(format!("label must be 0 or 1, got {other}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub query: String,
    pub passages: Vec<Passage>,
}

impl QueryRecord {
    pub fn labels(&self) -> Vec<bool> {
        self.passages.iter().map(|p| p.label).collect()
    }

    pub fn positives(&self) -> usize {
        self.passages.iter().filter(|p| p.label).count()
    }
}

/// Queries with labelled candidate passages.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RankingDataset {
    pub records: Vec<QueryRecord>,
}

impl RankingDataset {
    pub fn new(records: Vec<QueryRecord>) -> Result<Self> {
        let ds = Self { records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut qids = HashSet::new();
        for r in &self.records {
            if !qids.insert(r.query_id.as_str()) {
                return Err(Error::Format(format!("duplicate query_id `{}`", r.query_id)));
            }
            let mut pids = HashSet::new();
            for p in &r.passages {
                if !pids.insert(p.id.as_str()) {
                    return Err(Error::Format(format!(
                        "duplicate passage id `{}` in query `{}`",
                        p.id, r.query_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        Self::new(records)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io("<dataset writer>", e))?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// First `ceil(fraction · len)` records, and the rest.
    pub fn split(&self, fraction: f64) -> (RankingDataset, RankingDataset) {
        let k = ((self.records.len() as f64) * fraction).ceil() as usize;
        let k = k.min(self.records.len());
        (
            RankingDataset {
                records: self.records[..k].to_vec(),
            },
            RankingDataset {
                records: self.records[k..].to_vec(),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"query_id":"q1","query":"what","passages":[{"id":"a","text":"x","label":1},{"id":"b","text":"y","label":0}]}"#;

    #[test]
    fn parse_and_write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, format!("{LINE}\n\n")).unwrap();
        let ds = RankingDataset::load_jsonl(&path).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.records[0].labels(), vec![true, false]);
        let mut out = Vec::new();
        ds.write_jsonl(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), format!("{LINE}\n"));
    }

    #[test]
    fn rejects_bad_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, LINE.replace("\"label\":1", "\"label\":2")).unwrap();
        assert!(matches!(RankingDataset::load_jsonl(&path), Err(Error::Parse { line: 1, .. })));

        std::fs::write(&path, format!("{LINE}\n{LINE}\n")).unwrap();
        assert!(RankingDataset::load_jsonl(&path).unwrap_err().to_string().contains("duplicate query_id"));

        std::fs::write(&path, LINE.replace("\"id\":\"b\"", "\"id\":\"a\"")).unwrap();
        assert!(RankingDataset::load_jsonl(&path).unwrap_err().to_string().contains("duplicate passage id"));
    }
}
