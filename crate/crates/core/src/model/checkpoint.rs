//! Checkpoint files: one JSON header line, then TNSR1 blocks.
//!
//! The header holds the full config and a manifest of `{name, shape}` for
//! every parameter in visit order, plus optional extra tensors (optimizer
//! state) and free-form metadata appended after the parameters.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_model, CsmoeConfig, CsmoeModel};
use crate::error::{Error, Result};
use crate::numerics::tnsr::{read_tensor, write_tensor};
use crate::numerics::{Param, Parameterized, Tensor};

const FORMAT: &str = "csmoe-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config: CsmoeConfig,
    params: Vec<ManifestEntry>,
    #[serde(default)]
    extras: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Non-parameter payload stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointExtras {
    pub meta: serde_json::Value,
    pub tensors: Vec<Param>,
}

fn manifest(params: impl IntoIterator<Item = (String, Vec<usize>)>) -> Vec<ManifestEntry> {
    params.into_iter().map(|(name, shape)| ManifestEntry { name, shape }).collect()
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &CsmoeModel, extras: &CheckpointExtras) -> Result<()> {
    let mut params = Vec::new();
    model.visit_params(&mut |p| params.push(p));
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        params: manifest(params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec()))),
        extras: manifest(extras.tensors.iter().map(|p| (p.name.clone(), p.value.shape().to_vec()))),
        meta: extras.meta.clone(),
    };
    let line = serde_json::to_string(&header).map_err(|e| Error::Format(format!("encoding header: {e}")))?;
    let io = |e: std::io::Error| Error::Format(format!("writing checkpoint: {e}"));
    w.write_all(line.as_bytes()).map_err(io)?;
    w.write_all(b"\n").map_err(io)?;
    for p in params.iter().copied().chain(&extras.tensors) {
        write_tensor(w, &p.value).map_err(io)?;
    }
    Ok(())
}

/// Reads a checkpoint. Any header mismatch, truncation, or trailing data is a
/// format error; no partially-loaded model is ever returned.
pub fn read_checkpoint<R: BufRead>(r: &mut R) -> Result<(CsmoeModel, CheckpointExtras)> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(|e| Error::Format(format!("reading header: {e}")))?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let header: Header =
        serde_json::from_slice(&line).map_err(|e| Error::Format(format!("invalid checkpoint header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Format(format!("not a checkpoint (format {:?})", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
    }
    let mut model = init_model(&header.config).map_err(|e| Error::Format(format!("header config rejected: {e}")))?;
    let mut expected = Vec::new();
    model.visit_params(&mut |p| expected.push((p.name.clone(), p.value.shape().to_vec())));
    if manifest(expected) != header.params {
        return Err(Error::Format("parameter manifest does not match the header config".into()));
    }
    let mut values = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        values.push(read_block(r, entry)?);
    }
    let mut tensors = Vec::with_capacity(header.extras.len());
    for entry in &header.extras {
        tensors.push(Param::new(entry.name.clone(), read_block(r, entry)?));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe).map_err(|e| Error::Format(format!("reading checkpoint: {e}")))? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    let mut values = values.into_iter();
    model.visit_params_mut(&mut |p| p.value = values.next().expect("manifest length checked"));
    Ok((model, CheckpointExtras { meta: header.meta, tensors }))
}

fn read_block<R: Read>(r: &mut R, entry: &ManifestEntry) -> Result<Tensor> {
    let t = read_tensor(r).map_err(|e| Error::Format(format!("tensor {}: {e}", entry.name)))?;
    if t.shape() != entry.shape.as_slice() {
        return Err(Error::Format(format!(
            "tensor {} has shape {:?}, manifest says {:?}",
            entry.name,
            t.shape(),
            entry.shape
        )));
    }
    Ok(t)
}

pub fn save_checkpoint(model: &CsmoeModel, path: &Path, extras: &CheckpointExtras) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, model, extras)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CsmoeModel, CheckpointExtras)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(f)).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
