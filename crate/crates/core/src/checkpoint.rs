//! Checkpoint container.
//!
//! ```text
//! DIALMT-CHECKPOINT 1\n
//! {"config": {...}, "meta": {...}, "tensors": [{"name": ..., "shape": [...]}, ...]}\n
//! <f32 little-endian values of every tensor, in manifest order>
//! ```
//!
//! The manifest order is the model's parameter registration order
//! (see README for the full name list).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::tokenizer::BpeModel;
use crate::train::TrainingMode;

pub const MAGIC: &str = "DIALMT-CHECKPOINT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub mode: TrainingMode,
    pub update: u64,
    pub valid_loss: Option<f64>,
    pub src_bpe: Option<BpeModel>,
    pub tgt_bpe: Option<BpeModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn save(path: &Path, model: &Transformer, meta: &CheckpointMeta) -> Result<()> {
    let header = Header {
        config: model.config().clone(),
        meta: meta.clone(),
        tensors: model
            .params()
            .iter()
            .map(|(n, v)| TensorEntry {
                name: n.clone(),
                shape: v.dims().to_vec(),
            })
            .collect(),
    };
    let tmp = path.with_extension("tmp");
    let io = |e| Error::io(&tmp, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(io)?);
    writeln!(w, "{MAGIC} {VERSION}").map_err(io)?;
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for (_, v) in model.params() {
        let data = v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for x in data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&bytes).map_err(io)?;
    }
    w.flush().map_err(io)?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Read a checkpoint into a freshly built model.
pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<(Transformer, CheckpointMeta)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(Error::Format(format!("{}: not a checkpoint", path.display())));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("{}: missing version", path.display())))?;
    if version != VERSION {
        return Err(Error::Format(format!("{}: unsupported version {version}", path.display())));
    }
    line.clear();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let mut header: Header = serde_json::from_str(&line)
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
    header.meta.src_bpe = header.meta.src_bpe.map(BpeModel::finish_load);
    header.meta.tgt_bpe = header.meta.tgt_bpe.map(BpeModel::finish_load);
    let model = Transformer::new(header.config.clone(), 0, dtype, device)?;
    let mut values = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|_| {
            Error::Corruption(format!("{}: truncated data for tensor {}", path.display(), entry.name))
        })?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        values.push((entry.name.clone(), Tensor::from_vec(data, entry.shape.as_slice(), device)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Corruption(format!("{}: trailing bytes after tensor data", path.display())));
    }
    model.load_values(&values)?;
    Ok((model, header.meta))
}
