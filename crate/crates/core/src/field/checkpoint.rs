//! Binary checkpoint: magic, format version, a JSON header, then the raw
//! little-endian `f64` parameters. Loading reproduces the parameters bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FieldConfig, SceneField};
use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 8] = b"NSLMCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: FieldConfig,
    num_params: usize,
    meta: serde_json::Value,
}

/// A field plus caller-defined metadata (poses, frame index, ...).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub field: SceneField,
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, field: &SceneField, meta: &serde_json::Value) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: field.config().clone(),
        num_params: field.num_params(),
        meta: meta.clone(),
    })?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(io_err(path));
    write(MAGIC)?;
    write(&FORMAT_VERSION.to_le_bytes())?;
    write(&(header.len() as u64).to_le_bytes())?;
    write(&header)?;
    for v in field.params() {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io_err(path))?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io_err(path))?;
    let header_len = u64::from_le_bytes(b8) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(io_err(path))?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut field = SceneField::zeroed(header.config)?;
    if field.num_params() != header.num_params {
        return Err(Error::Checkpoint(format!(
            "header declares {} parameters, config implies {}",
            header.num_params,
            field.num_params()
        )));
    }
    let params = field.params_mut();
    for v in params.iter_mut() {
        r.read_exact(&mut b8).map_err(io_err(path))?;
        *v = f64::from_le_bytes(b8);
    }
    if r.read(&mut b8).map_err(io_err(path))? != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        field,
        meta: header.meta,
    })
}
