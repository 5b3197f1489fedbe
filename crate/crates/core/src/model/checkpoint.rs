//! Checkpoint archive:
//!
//! ```text
//! SCOPE-CKPT-1\n
//! u64 LE   header length
//! header   JSON {config, lexicon, tensors: [{name, rows, cols}]}
//! payload  every tensor in header order, row-major f64 LE
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::lexicon::LexiconData;
use super::{Lexicon, Model, ModelConfig, ParamStore};
use crate::autodiff::Matrix;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"SCOPE-CKPT-1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    lexicon: LexiconData,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<()> {
    let header = Header {
        config: model.config().clone(),
        lexicon: model.lexicon().to_data(),
        tensors: model
            .params()
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.to_string(),
                rows: m.nrows(),
                cols: m.ncols(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, m) in model.params().iter() {
        let mut buf = Vec::with_capacity(m.len() * 8);
        for v in m.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Model> {
    let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
    input.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing SCOPE-CKPT-1 magic".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;

    let mut store = ParamStore::default();
    for entry in header.tensors {
        let mut bytes = vec![0u8; entry.rows * entry.cols * 8];
        input
            .read_exact(&mut bytes)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let m = Matrix::from_shape_vec((entry.rows, entry.cols), values)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        store.insert(&entry.name, m);
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Model::from_parts(header.config, Lexicon::from_data(header.lexicon)?, store)
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        write_checkpoint(model, &mut f)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
