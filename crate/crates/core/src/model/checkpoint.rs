use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Ranker};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// On-disk form of a [`Ranker`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_ranker(r: &Ranker) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: r.config().clone(),
            tensors: r
                .param_store()
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn into_ranker(self) -> Result<Ranker> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format_version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut store = ParamStore::new();
        for (name, t) in self.tensors {
            // Deserialized tensors bypass the constructor's checks.
            let (shape, data) = (t.shape().to_vec(), t.into_data());
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
            store.insert(name, t);
        }
        Ranker::from_param_store(self.config, store)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl Ranker {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = Checkpoint::from_ranker(self).to_json()?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)?.into_ranker()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionVariant, FeatureMode};

    fn ranker() -> Ranker {
        let cfg = ModelConfig {
            attention: AttentionVariant::Passage,
            feature_mode: FeatureMode::ListwiseOnly,
            seed: 4,
            ..ModelConfig::new(8)
        };
        Ranker::init(&cfg).unwrap()
    }

    #[test]
    fn save_and_load_are_bitwise() {
        let r = ranker();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        r.save(&path).unwrap();
        assert_eq!(Ranker::load(&path).unwrap(), r);

        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["format_version"], 1);
        assert_eq!(v["config"]["attention"], "passage");
        assert_eq!(v["tensors"]["e_q"]["shape"], serde_json::json!([8]));
    }

    #[test]
    fn rejects_unknown_version_and_bad_shapes() {
        let mut c = Checkpoint::from_ranker(&ranker());
        c.format_version = 2;
        assert!(c.into_ranker().unwrap_err().to_string().contains("format_version"));

        let mut c = Checkpoint::from_ranker(&ranker());
        c.tensors.insert("e_p".into(), Tensor::zeros(&[4]));
        assert!(c.into_ranker().is_err());

        let json = Checkpoint::from_ranker(&ranker()).to_json().unwrap();
        let broken = json.replacen("\"shape\":[8]", "\"shape\":[9]", 1);
        assert!(Checkpoint::from_json(&broken).unwrap().into_ranker().is_err());
    }
}
