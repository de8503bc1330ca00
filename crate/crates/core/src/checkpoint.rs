//! Checkpoint container.
//!
//! A checkpoint is a JSON document:
//!
//! ```text
//! {
//!   "format": "darter-checkpoint",
//!   "version": 1,
//!   "config": <ModelConfig>,
//!   "provenance": <any JSON, optional>,
//!   "params": [ { "name": "...", "rows": R, "cols": C, "trainable": bool, "data": [f64; R*C] }, ... ]
//! }
//! ```
//!
//! Values are written as `f64` with shortest round-trip formatting, so `f32`
//! and `f64` models both reload bit-exactly. Loading rebuilds the model from
//! `config` and then requires every parameter name and shape to match.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT: &str = "darter-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    /// Free-form record of the run that produced the weights.
    #[serde(default)]
    pub provenance: serde_json::Value,
    pub params: Vec<NamedArray>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
    pub data: Vec<f64>,
}

pub fn to_file<T: Scalar>(model: &Model<T>) -> CheckpointFile {
    let params = model
        .store
        .ids()
        .map(|id| {
            let t = model.store.get(id);
            NamedArray {
                name: model.store.name(id).to_string(),
                rows: t.rows(),
                cols: t.cols(),
                trainable: model.store.is_trainable(id),
                data: t.data().iter().map(|v| v.as_f64()).collect(),
            }
        })
        .collect();
    CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        provenance: serde_json::Value::Null,
        params,
    }
}

pub fn from_file<T: Scalar>(file: CheckpointFile) -> Result<Model<T>> {
    if file.format != FORMAT {
        return Err(Error::CheckpointMismatch(format!("unknown format {:?}", file.format)));
    }
    if file.version != VERSION {
        return Err(Error::CheckpointMismatch(format!("unsupported version {}", file.version)));
    }
    let mut model = Model::<T>::new(&file.config)?;
    if file.params.len() != model.store.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint has {} arrays, configuration expects {}",
            file.params.len(),
            model.store.len()
        )));
    }
    for arr in file.params {
        let id = model
            .store
            .find(&arr.name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("unexpected parameter {}", arr.name)))?;
        let data = arr.data.iter().map(|&v| T::lit(v)).collect();
        let t = Tensor::from_vec(arr.rows, arr.cols, data)
            .map_err(|e| Error::CheckpointMismatch(format!("{}: {e}", arr.name)))?;
        model.store.assign(id, t).map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    save_with_provenance(model, serde_json::Value::Null, path)
}

pub fn save_with_provenance<T: Scalar>(model: &Model<T>, provenance: serde_json::Value, path: &Path) -> Result<()> {
    let mut file = to_file(model);
    file.provenance = provenance;
    let json =
        serde_json::to_string(&file).map_err(|e| Error::Json { path: path.to_path_buf(), msg: e.to_string() })?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::CheckpointMismatch(format!("{}: {e}", path.display())))?;
    from_file(file)
}
