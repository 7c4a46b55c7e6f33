//! Binary model checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "DCLKMODL"
//! version      u32
//! config       11 x u32 image_size, frames, latent_channels, encoder_channels[3],
//!                       hidden, blocks, time_dim, num_classes, timesteps
//! trained      u8
//! latent_scale f64
//! count        u32
//! per tensor:  name_len u32, name (UTF-8), ndim u32, dims ndim x u32,
//!              data prod(dims) x f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, VictimModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCLKMODL";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Shape header followed by the raw little-endian payload.
pub(crate) fn put_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    put_u32(w, t.ndim())?;
    for &d in t.shape() {
        put_u32(w, d)?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn get_tensor(r: &mut impl Read) -> Result<Tensor> {
    let ndim = get_u32(r)?;
    if ndim == 0 || ndim > 8 {
        return Err(Error::Format(format!("implausible tensor rank {ndim}")));
    }
    let shape = (0..ndim).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    if n > 1 << 28 {
        return Err(Error::Format(format!("tensor of shape {shape:?} is too large")));
    }
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_checkpoint(model: &VictimModel, w: &mut impl Write) -> Result<()> {
    let c = model.config();
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION as usize)?;
    for v in [
        c.image_size,
        c.frames,
        c.latent_channels,
        c.encoder_channels[0],
        c.encoder_channels[1],
        c.encoder_channels[2],
        c.hidden,
        c.blocks,
        c.time_dim,
        c.num_classes,
        c.timesteps,
    ] {
        put_u32(w, v)?;
    }
    w.write_all(&[model.is_trained() as u8])?;
    w.write_all(&model.latent_scale().to_le_bytes())?;
    put_u32(w, model.params().len())?;
    for (name, t) in model.param_names().iter().zip(model.params()) {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<VictimModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format(format!("checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")));
    }
    let mut v = [0usize; 11];
    for slot in v.iter_mut() {
        *slot = get_u32(r)?;
    }
    let config = ModelConfig {
        image_size: v[0],
        frames: v[1],
        latent_channels: v[2],
        encoder_channels: [v[3], v[4], v[5]],
        hidden: v[6],
        blocks: v[7],
        time_dim: v[8],
        num_classes: v[9],
        timesteps: v[10],
    };
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let latent_scale = get_f64(r)?;
    let count = get_u32(r)?;
    let reference = VictimModel::new(config.clone(), 0).map_err(|e| Error::Format(e.to_string()))?;
    if count != reference.params().len() {
        return Err(Error::Format(format!("checkpoint has {count} tensors, architecture needs {}", reference.params().len())));
    }
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want) in reference.param_names().iter().zip(reference.params()) {
        let len = get_u32(r)?;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let name = String::from_utf8(buf).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let t = get_tensor(r)?;
        if &name != want_name || t.shape() != want.shape() {
            return Err(Error::Format(format!("tensor {name} {:?} does not match expected {want_name} {:?}", t.shape(), want.shape())));
        }
        names.push(name);
        tensors.push(t);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    VictimModel::from_parts(config, names, tensors, latent_scale, flag[0] != 0)
}

pub fn save_checkpoint(model: &VictimModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<VictimModel> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
