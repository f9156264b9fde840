//! Named parameter collections and the JSON checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Anything that owns named parameter tensors.
pub trait ParamSet {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self
                .params()
                .into_iter()
                .map(|(k, v)| (k, v.clone()))
                .collect(),
        }
    }

    fn num_scalars(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Sorted name-to-tensor map, serialized as
/// `{"format_version": 1, "<name>": {"shape": [..], "data": [..]}, ...}`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Fetch a tensor and check its shape.
    pub fn take(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t.clone())
    }

    pub fn merge(&mut self, other: Checkpoint) {
        self.tensors.extend(other.tensors);
    }

    pub fn to_json(&self) -> String {
        let mut map = Map::new();
        map.insert(
            "format_version".into(),
            Value::from(CHECKPOINT_FORMAT_VERSION),
        );
        for (name, t) in &self.tensors {
            map.insert(
                name.clone(),
                serde_json::to_value(t).expect("tensor serializes"),
            );
        }
        // serde_json's map is a BTreeMap without `preserve_order`, so keys come out sorted.
        serde_json::to_string(&Value::Object(map)).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let Value::Object(map) = value else {
            return Err(Error::Checkpoint("top level must be an object".into()));
        };
        match map.get("format_version").and_then(Value::as_u64) {
            Some(v) if v == u64::from(CHECKPOINT_FORMAT_VERSION) => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "unsupported format_version {other:?}"
                )))
            }
        }
        let mut tensors = BTreeMap::new();
        for (name, v) in map {
            if name == "format_version" {
                continue;
            }
            let raw: Tensor = serde_json::from_value(v)
                .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            // re-validate: derive(Deserialize) does not check shape against data
            let t = Tensor::new(raw.shape().to_vec(), raw.into_data())
                .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            tensors.insert(name, t);
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::error::write(path.as_ref(), self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&crate::error::read_to_string(path.as_ref())?)
    }

    /// Restrict to the tensors whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Checkpoint {
        Checkpoint {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}
