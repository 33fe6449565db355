//! `checkpoint.json` (config + section table) and `params.bin` (f64 LE).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PARAMS_FILE: &str = "params.bin";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    /// Byte offset into `params.bin`.
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub sections: Vec<Section>,
}

/// Writes both checkpoint files into `dir`; returns the `checkpoint.json` path.
pub fn save_checkpoint(state: &ModelState, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut offset = 0u64;
    let sections = state
        .names
        .iter()
        .zip(&state.params)
        .map(|(name, p)| {
            let s = Section {
                name: name.clone(),
                offset,
                shape: p.shape().to_vec(),
            };
            offset += 8 * p.numel() as u64;
            s
        })
        .collect();
    let header = CheckpointHeader {
        version: VERSION,
        dtype: "f64le".into(),
        config: state.config.clone(),
        sections,
    };
    let json_path = dir.join(CHECKPOINT_FILE);
    let bin_path = dir.join(PARAMS_FILE);
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&bin_path, state.to_bytes()).map_err(|e| Error::io(&bin_path, e))?;
    Ok(json_path)
}

/// Accepts the `checkpoint.json` path or its directory.
pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let json_path = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let dir = json_path.parent().unwrap_or(Path::new("."));
    let bin_path = dir.join(PARAMS_FILE);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::format(&json_path, e.to_string()))?;
    let header: CheckpointHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e.to_string()))?;
    if header.dtype != "f64le" || header.version != VERSION {
        return Err(Error::format(&json_path, "unsupported checkpoint version or dtype"));
    }
    header.config.validate()?;
    let expected_layout = header.config.layout();
    let matches_layout = expected_layout.len() == header.sections.len()
        && expected_layout
            .iter()
            .zip(&header.sections)
            .all(|((n, s), sec)| *n == sec.name && *s == sec.shape);
    if !matches_layout {
        return Err(Error::format(&json_path, "section table does not match the model layout"));
    }
    let bytes = fs::read(&bin_path).map_err(|e| Error::format(&bin_path, e.to_string()))?;
    let expected = 8 * header.config.param_count() as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Integrity {
            path: bin_path,
            expected,
            found: bytes.len() as u64,
        });
    }
    let mut names = Vec::new();
    let mut params = Vec::new();
    for sec in header.sections {
        let n: usize = sec.shape.iter().product();
        let start = sec.offset as usize;
        let slice = bytes
            .get(start..start + 8 * n)
            .ok_or_else(|| Error::format(&bin_path, format!("section {} out of bounds", sec.name)))?;
        let data = slice
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        params.push(Tensor::new(sec.shape, data)?);
        names.push(sec.name);
    }
    Ok(ModelState {
        config: header.config,
        names,
        params,
    })
}
