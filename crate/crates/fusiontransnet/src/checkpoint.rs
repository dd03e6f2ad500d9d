//! Versioned binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   8 bytes  b"FTNCKPT\0"
//! version u32      currently 1
//! 3 JSON blobs, each u32 length + bytes:
//!     model config, normalization state, dataset signature
//! count   u32      number of parameter tensors
//! per tensor: u16 name length + UTF-8 name,
//!             u32 rows, u32 cols, rows*cols f64 values (row-major)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::NormalizationState;
use crate::error::{FtnError, Result};
use crate::model::{ModelConfig, ModelState};

const MAGIC: &[u8; 8] = b"FTNCKPT\0";
const VERSION: u32 = 1;

/// What the checkpointed model was trained on; enough to validate that an
/// eval dataset is compatible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSignature {
    pub mode_names: Vec<String>,
    pub node_counts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub norm: NormalizationState,
    pub signature: DatasetSignature,
    pub state: ModelState,
}

fn push_blob(buf: &mut Vec<u8>, blob: &[u8]) {
    buf.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    buf.extend_from_slice(blob);
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let config = serde_json::to_vec(&checkpoint.config)
        .map_err(|e| FtnError::Contract(format!("config serialization: {e}")))?;
    let norm = serde_json::to_vec(&checkpoint.norm)
        .map_err(|e| FtnError::Contract(format!("normalization serialization: {e}")))?;
    let signature = serde_json::to_vec(&checkpoint.signature)
        .map_err(|e| FtnError::Contract(format!("signature serialization: {e}")))?;
    push_blob(&mut buf, &config);
    push_blob(&mut buf, &norm);
    push_blob(&mut buf, &signature);

    buf.extend_from_slice(&(checkpoint.state.len() as u32).to_le_bytes());
    for (name, value) in checkpoint.state.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let (rows, cols) = value.dim();
        buf.extend_from_slice(&(rows as u32).to_le_bytes());
        buf.extend_from_slice(&(cols as u32).to_le_bytes());
        for v in value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut file =
        fs::File::create(path).map_err(|e| FtnError::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| FtnError::io(path.display().to_string(), e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(FtnError::Config(format!(
                "truncated checkpoint {} at byte {}",
                self.path, self.pos
            )));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let len = self.u32()? as usize;
        self.take(len)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| FtnError::io(path.display().to_string(), e))?;
    let mut r = Reader {
        data: &data,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(8)? != MAGIC {
        return Err(FtnError::Config(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FtnError::Config(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config: ModelConfig = serde_json::from_slice(r.blob()?)
        .map_err(|e| FtnError::Config(format!("corrupt checkpoint config: {e}")))?;
    let norm: NormalizationState = serde_json::from_slice(r.blob()?)
        .map_err(|e| FtnError::Config(format!("corrupt normalization state: {e}")))?;
    let signature: DatasetSignature = serde_json::from_slice(r.blob()?)
        .map_err(|e| FtnError::Config(format!("corrupt dataset signature: {e}")))?;

    let count = r.u32()? as usize;
    let mut state = ModelState::default();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| FtnError::Config("corrupt parameter name".into()))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| FtnError::Config(format!("corrupt tensor {name}: {e}")))?;
        state.insert(name, arr);
    }
    Ok(Checkpoint {
        config,
        norm,
        signature,
        state,
    })
}
