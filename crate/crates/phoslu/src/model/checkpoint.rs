//! Versioned binary checkpoints of model configuration plus named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PSLU" | version: u16 | config_len: u32 | config JSON bytes
//! tensor_count: u32
//! per tensor: name_len: u16 | name bytes | rank: u8 | dims: u32 × rank
//!             | data: f32 × product(dims), row-major
//! ```
//!
//! Tensors are written in the canonical order of
//! [`ModelParams::tensors`](super::ModelParams::tensors) but loaded by name,
//! and every load validates each tensor's shape against the shapes implied by
//! the embedded config.  Training math runs in `f64`; serialising through
//! `f32` keeps checkpoints half the size at desk-irrelevant precision loss.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, ModelParams};

/// File signature identifying a model checkpoint.
pub const MAGIC: [u8; 4] = *b"PSLU";

/// Current checkpoint format version.
pub const FORMAT_VERSION: u16 = 1;

/// Serialises `cfg` and all tensors of `params` to `w`.
pub fn save<W: Write>(w: &mut W, cfg: &ModelConfig, params: &ModelParams) -> Result<(), ModelError> {
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let cfg_json = serde_json::to_vec(cfg)?;
    w.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
    w.write_all(&cfg_json)?;

    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, view) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let shape = view.shape();
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in view.iter() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Writes a checkpoint file at `path` (buffered).
pub fn save_to_path(
    path: impl AsRef<Path>,
    cfg: &ModelConfig,
    params: &ModelParams,
) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    save(&mut w, cfg, params)?;
    w.flush()?;
    Ok(())
}

fn read_exact_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>, ModelError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, ModelError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a checkpoint, validating the signature, version, config, and the
/// shape of every tensor against the config before returning the parameters.
pub fn load<R: Read>(r: &mut R) -> Result<(ModelConfig, ModelParams), ModelError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = read_u16(r)?;
    if version != FORMAT_VERSION {
        return Err(ModelError::BadVersion(version));
    }
    let cfg_len = read_u32(r)? as usize;
    let cfg_bytes = read_exact_vec(r, cfg_len)?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg_bytes)?;
    cfg.validate()?;

    let tensor_count = read_u32(r)? as usize;
    let mut stored: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for _ in 0..tensor_count {
        let name_len = read_u16(r)? as usize;
        let name = String::from_utf8(read_exact_vec(r, name_len)?)
            .map_err(|_| ModelError::Corrupt("tensor name is not valid UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            dims.push(read_u32(r)? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut b = [0u8; 4];
        for _ in 0..len {
            r.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        if stored.insert(name.clone(), (dims, data)).is_some() {
            return Err(ModelError::Corrupt(format!("duplicate tensor {name}")));
        }
    }

    let mut params = ModelParams::zeros(&cfg);
    for (name, mut view) in params.tensors_mut() {
        let (dims, data) = stored
            .remove(&name)
            .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
        if dims != view.shape() {
            return Err(ModelError::TensorShape {
                name,
                expected: view.shape().to_vec(),
                found: dims,
            });
        }
        for (dst, src) in view.iter_mut().zip(data.iter()) {
            *dst = *src;
        }
    }
    if let Some(name) = stored.keys().next() {
        return Err(ModelError::UnexpectedTensor(name.clone()));
    }
    Ok((cfg, params))
}

/// Reads a checkpoint file at `path` (buffered).
pub fn load_from_path(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams), ModelError> {
    load(&mut BufReader::new(File::open(path)?))
}
