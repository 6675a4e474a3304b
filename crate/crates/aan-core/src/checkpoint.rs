//! Binary checkpoints: a magic header, the config text that built the
//! model, the epoch counter and every named parameter tensor as raw
//! little-endian f64, so a round trip restores weights bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use crate::train::Model;

const MAGIC: &[u8; 8] = b"AANCKPT\0";
const VERSION: u32 = 1;

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = read_u64(r)? as usize;
    // header corruption should fail loudly, not allocate terabytes
    if len > 1 << 32 {
        return Err(Error::Checkpoint(format!("implausible field length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Snapshot of every parameter, taken via a throwaway tape binding so the
/// model itself stays immutable.
fn snapshot(model: &Model) -> Vec<(String, Tensor)> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    bound
        .params()
        .iter()
        .map(|(n, v)| (n.clone(), tape.value(*v)))
        .collect()
}

pub fn save(path: &Path, config_text: &str, epoch: u64, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_bytes(&mut w, config_text.as_bytes())?;
    w.write_all(&epoch.to_le_bytes())?;
    let params = snapshot(model);
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, t) in params {
        write_bytes(&mut w, name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug)]
pub struct Loaded {
    pub config_text: String,
    pub epoch: u64,
    pub params: Vec<(String, Tensor)>,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("not a checkpoint file".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version} not supported (expected {VERSION})"
        )));
    }
    let config_text = String::from_utf8(read_bytes(&mut r)?)
        .map_err(|e| Error::Checkpoint(format!("config not utf8: {e}")))?;
    let epoch = read_u64(&mut r)?;
    let n_params = read_u64(&mut r)? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|e| Error::Checkpoint(format!("name not utf8: {e}")))?;
        let ndim = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
        params.push((name, t));
    }
    Ok(Loaded {
        config_text,
        epoch,
        params,
    })
}

/// Copy loaded parameters into a freshly built model. Names and shapes
/// must match the model's own parameter list exactly.
pub fn restore(model: &mut Model, params: &[(String, Tensor)]) -> Result<()> {
    let mut slots = model.params_mut();
    if slots.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "model has {} parameters, checkpoint has {}",
            slots.len(),
            params.len()
        )));
    }
    for ((slot_name, slot), (name, t)) in slots.iter_mut().zip(params) {
        if slot_name != name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: model {slot_name}, checkpoint {name}"
            )));
        }
        if slot.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} vs {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}
