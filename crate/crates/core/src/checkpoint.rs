//! Binary checkpoint of a [`ModelState`].
//!
//! Layout: magic `HVQ1`, `u32` format version, `u32` section count, then per
//! section a 4-byte tag, `u64` payload length, payload and the payload's
//! CRC-32. Sections are `CONF` (JSON config and shapes), `PARM`, `CODE`,
//! `OPTM` and `RNGS`. Floats are stored as raw little-endian `f64`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hvq::{ByteReader, Codebook, Hierarchy};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::trainer::{AdamState, ModelState, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HVQ1";
pub const CHECKPOINT_VERSION: u32 = 1;

const SECTIONS: [&[u8; 4]; 5] = [b"CONF", b"PARM", b"CODE", b"OPTM", b"RNGS"];

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    k: usize,
    channels: usize,
    joints: usize,
    step: u64,
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[Tensor]) {
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn get_tensors(r: &mut ByteReader<'_>) -> Result<Vec<Tensor>> {
    let n = r.u64()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let rank = r.u64()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().product();
        out.push(Tensor::new(shape, r.f64s(len)?)?);
    }
    Ok(out)
}

pub fn to_bytes(state: &ModelState) -> Result<Vec<u8>> {
    let header = Header {
        config: state.config.clone(),
        k: state.k,
        channels: state.model.dims.channels,
        joints: state.model.dims.joints,
        step: state.step,
    };
    let conf = serde_json::to_vec(&header)?;

    let mut parm = Vec::new();
    put_tensors(&mut parm, &state.model.params.tensors);

    let mut code = Vec::new();
    match &state.hierarchy {
        None => code.push(0u8),
        Some(h) => {
            code.push(1u8);
            code.extend_from_slice(&(h.levels() as u64).to_le_bytes());
            for cb in &h.codebooks {
                code.extend_from_slice(&cb.to_bytes());
            }
        }
    }

    let mut optm = Vec::new();
    optm.extend_from_slice(&state.adam.t.to_le_bytes());
    put_tensors(&mut optm, &state.adam.m);
    put_tensors(&mut optm, &state.adam.v);

    let mut rngs = Vec::new();
    rngs.extend_from_slice(&state.rng.get_seed());
    rngs.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    rngs.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(SECTIONS.len() as u32).to_le_bytes());
    for (tag, payload) in SECTIONS.iter().zip([conf, parm, code, optm, rngs]) {
        out.extend_from_slice(*tag);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState> {
    let mut r = ByteReader::new(bytes);
    if r.take(4).map_err(|_| Error::CheckpointCorrupt("file too short".into()))? != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointCorrupt("bad magic, expected HVQ1".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    if count != SECTIONS.len() {
        return Err(Error::CheckpointCorrupt(format!("expected {} sections, found {}", SECTIONS.len(), count)));
    }
    let mut payloads = Vec::with_capacity(count);
    for tag in SECTIONS {
        let truncated =
            |_| Error::CheckpointCorrupt(format!("section {} truncated, checksum cannot match", String::from_utf8_lossy(tag)));
        let found = r.take(4).map_err(truncated)?;
        if found != tag {
            return Err(Error::CheckpointCorrupt(format!(
                "expected section {}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(found)
            )));
        }
        let len = r.u64().map_err(truncated)? as usize;
        let payload = r.take(len).map_err(truncated)?;
        let crc = r
            .u32()
            .map_err(|_| Error::CheckpointCorrupt(format!("section {} checksum missing", String::from_utf8_lossy(tag))))?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::CheckpointCorrupt(format!("checksum mismatch in section {}", String::from_utf8_lossy(tag))));
        }
        payloads.push(payload);
    }
    if r.pos != bytes.len() {
        return Err(Error::CheckpointCorrupt("trailing bytes after last section".into()));
    }

    let header: Header = serde_json::from_slice(payloads[0])?;
    let mut state = ModelState::new(header.config, header.k, header.channels, header.joints)?;
    state.k = header.k;
    state.step = header.step;

    let params = get_tensors(&mut ByteReader::new(payloads[1]))?;
    check_params(&state.model, &params)?;
    state.model.params.tensors = params;

    let code = payloads[2];
    state.hierarchy = match code.first() {
        Some(0) => None,
        Some(1) => {
            let mut r = ByteReader::new(&code[1..]);
            let levels = r.u64()? as usize;
            let mut codebooks = Vec::with_capacity(levels);
            let mut rest = &code[1 + r.pos..];
            for _ in 0..levels {
                let (cb, used) = Codebook::from_bytes(rest)?;
                rest = &rest[used..];
                codebooks.push(cb);
            }
            Some(Hierarchy { codebooks })
        }
        _ => return Err(Error::CheckpointCorrupt("bad codebook section".into())),
    };

    let mut r = ByteReader::new(payloads[3]);
    let t = r.u64()?;
    let m = get_tensors(&mut r)?;
    let v = get_tensors(&mut r)?;
    check_params(&state.model, &m)?;
    check_params(&state.model, &v)?;
    state.adam = AdamState { m, v, t };

    let mut r = ByteReader::new(payloads[4]);
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    Ok(state)
}

fn check_params(model: &Model, tensors: &[Tensor]) -> Result<()> {
    if tensors.len() != model.params.len()
        || tensors.iter().zip(&model.params.tensors).any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::CheckpointCorrupt("parameter shapes do not match the stored config".into()));
    }
    Ok(())
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    crate::dataset::write_all(path, &to_bytes(state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes)
}
