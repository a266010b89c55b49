//! On-disk checkpoint layout.
//!
//! ```text
//! <dir>/meta.json          format version, tensor shapes, optimizer metadata, caller metadata
//! <dir>/<param>            raw little-endian f32, row-major ('/' in names becomes "__")
//! <dir>/optim/m/<param>    Adam first moments (when present)
//! <dir>/optim/v/<param>    Adam second moments
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, NumericsError, ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: String,
    pub step: u64,
    pub config: AdamConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MetaFile<M> {
    format_version: u32,
    tensors: BTreeMap<String, Vec<usize>>,
    optimizer: Option<OptimizerMeta>,
    #[serde(flatten)]
    meta: M,
}

pub fn param_file_name(name: &str) -> String {
    name.replace('/', "__")
}

fn io_err(path: &Path, e: std::io::Error) -> NumericsError {
    NumericsError::Io(format!("{}: {e}", path.display()))
}

pub fn write_raw_f32(path: &Path, t: &Tensor<f32>) -> Result<(), NumericsError> {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for x in t.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn read_raw_f32(path: &Path, shape: &[usize]) -> Result<Tensor<f32>, NumericsError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(NumericsError::Format(format!(
            "{}: {} bytes is not a whole number of f32 values",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape.to_vec(), data)
        .map_err(|e| NumericsError::Format(format!("{}: {e}", path.display())))
}

fn write_store(dir: &Path, store: &ParamStore<f32>) -> Result<(), NumericsError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (name, t) in store.iter() {
        write_raw_f32(&dir.join(param_file_name(name)), t)?;
    }
    Ok(())
}

fn read_store(
    dir: &Path,
    shapes: &BTreeMap<String, Vec<usize>>,
) -> Result<ParamStore<f32>, NumericsError> {
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        store.insert(name, read_raw_f32(&dir.join(param_file_name(name)), shape)?);
    }
    Ok(store)
}

/// Writes `params` (and optionally Adam state) plus caller metadata `meta`,
/// which is flattened into `meta.json`.
pub fn save_checkpoint<M: Serialize>(
    dir: &Path,
    meta: &M,
    params: &ParamStore<f32>,
    optimizer: Option<(&AdamState<f32>, &AdamConfig)>,
) -> Result<(), NumericsError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_store(dir, params)?;
    let optimizer = match optimizer {
        Some((state, cfg)) => {
            params.check_congruent(&state.m)?;
            write_store(&dir.join("optim").join("m"), &state.m)?;
            write_store(&dir.join("optim").join("v"), &state.v)?;
            Some(OptimizerMeta {
                kind: "adam".into(),
                step: state.step,
                config: *cfg,
            })
        }
        None => None,
    };
    let file = MetaFile {
        format_version: FORMAT_VERSION,
        tensors: params
            .iter()
            .map(|(k, t)| (k.to_string(), t.shape().to_vec()))
            .collect(),
        optimizer,
        meta,
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| NumericsError::Format(format!("meta.json: {e}")))?;
    let path = dir.join(META_FILE);
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
}

pub struct LoadedCheckpoint<M> {
    pub meta: M,
    pub params: ParamStore<f32>,
    pub optimizer: Option<(AdamState<f32>, AdamConfig)>,
}

pub fn load_checkpoint<M: DeserializeOwned>(dir: &Path) -> Result<LoadedCheckpoint<M>, NumericsError> {
    let path: PathBuf = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let file: MetaFile<M> = serde_json::from_str(&text)
        .map_err(|e| NumericsError::Format(format!("{}: {e}", path.display())))?;
    if file.format_version != FORMAT_VERSION {
        return Err(NumericsError::Format(format!(
            "{}: format version {} (expected {FORMAT_VERSION})",
            path.display(),
            file.format_version
        )));
    }
    let params = read_store(dir, &file.tensors)?;
    let optimizer = match file.optimizer {
        Some(om) => {
            let m = read_store(&dir.join("optim").join("m"), &file.tensors)?;
            let v = read_store(&dir.join("optim").join("v"), &file.tensors)?;
            Some((AdamState { step: om.step, m, v }, om.config))
        }
        None => None,
    };
    Ok(LoadedCheckpoint {
        meta: file.meta,
        params,
        optimizer,
    })
}
