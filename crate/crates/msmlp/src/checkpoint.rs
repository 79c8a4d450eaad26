//! Model checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! [u64: header byte length][header JSON][parameter data: f64 LE, flat]
//! ```
//!
//! The JSON header carries the model spec plus one entry per parameter
//! sub-tensor: `{"name", "shape", "offset"}`, where `offset` is the byte
//! offset of the sub-tensor inside the data section. Sub-tensor names append
//! the container field to the hierarchical parameter name
//! (`stages.0.blocks.1.mlp.fc1.weight`, `final_norm.gamma`, ...).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};

const FORMAT_TAG: &str = "msmlp-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    spec: ModelSpec,
    params: Vec<HeaderEntry>,
}

/// Serialize a model to a writer.
pub fn save_model<W: Write>(model: &Model, mut out: W) -> Result<()> {
    let mut entries = Vec::new();
    let mut data: Vec<f64> = Vec::new();

    model.visit_params(&mut |name, param| {
        let flat = param.to_flat();
        for part in param.parts() {
            entries.push(HeaderEntry {
                name: format!("{name}.{}", part.suffix),
                shape: part.shape.clone(),
                offset: (data.len() + part.offset) as u64 * 8,
            });
        }
        data.extend_from_slice(&flat);
    });

    let header = Header {
        format: FORMAT_TAG.to_string(),
        spec: model.spec.clone(),
        params: entries,
    };
    let header_json = serde_json::to_vec(&header)?;
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.write_all(&header_json)?;
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in &data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

pub fn save_model_to_path(model: &Model, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    save_model(model, std::io::BufWriter::new(file))
}

/// Deserialize a model. The stored spec rebuilds the structure; every
/// parameter sub-tensor must be present with its recorded shape.
pub fn load_model<R: Read>(mut input: R) -> Result<Model> {
    let mut len_bytes = [0u8; 8];
    input.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    input.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.format != FORMAT_TAG {
        return Err(Error::invalid_argument(format!(
            "unsupported checkpoint format tag `{}`",
            header.format
        )));
    }
    header.spec.validate()?;

    let mut raw = Vec::new();
    input.read_to_end(&mut raw)?;
    if raw.len() % 8 != 0 {
        return Err(Error::invalid_argument("checkpoint data section is not a whole number of f64s"));
    }
    let data: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();

    let mut by_name: HashMap<&str, &HeaderEntry> = HashMap::new();
    for e in &header.params {
        by_name.insert(e.name.as_str(), e);
    }

    let mut model = Model::build(&header.spec, 0)?;
    let mut failure: Option<Error> = None;
    model.visit_params_mut(&mut |name, param| {
        if failure.is_some() {
            return;
        }
        let mut flat = vec![0.0; param.flat_len()];
        for part in param.parts() {
            let key = format!("{name}.{}", part.suffix);
            let Some(entry) = by_name.get(key.as_str()) else {
                failure = Some(Error::invalid_argument(format!("checkpoint missing parameter `{key}`")));
                return;
            };
            let expected: usize = entry.shape.iter().product();
            if expected != part.len {
                failure = Some(Error::invalid_argument(format!(
                    "checkpoint shape {:?} for `{key}` does not match expected length {}",
                    entry.shape, part.len
                )));
                return;
            }
            let start = entry.offset as usize / 8;
            if start + part.len > data.len() {
                failure = Some(Error::invalid_argument(format!("checkpoint data truncated at `{key}`")));
                return;
            }
            flat[part.offset..part.offset + part.len].copy_from_slice(&data[start..start + part.len]);
        }
        param.write_from_flat(&flat);
    });
    if let Some(err) = failure {
        return Err(err);
    }
    Ok(model)
}

pub fn load_model_from_path(path: &Path) -> Result<Model> {
    let file = std::fs::File::open(path)?;
    load_model(std::io::BufReader::new(file))
}
