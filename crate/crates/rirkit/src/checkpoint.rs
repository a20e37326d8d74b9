//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "RIR1" | version u8 | config length u32 + JSON bytes |
//!   param count u32 | entries | state count u32 | entries |
//!   mask count u32 | mask entries
//!
//! A tensor entry is: name length u32, name bytes, ndim u32, dims u32 each,
//! payload as IEEE-754 f32 little-endian. A mask entry is: name, tap count
//! u32, taps u32 each. Saving a loaded checkpoint reproduces the bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, RirError};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RIR1";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub params: Vec<TensorEntry>,
    pub state: Vec<TensorEntry>,
    pub masks: Vec<(String, Vec<u32>)>,
}

impl Checkpoint {
    /// Snapshot of every parameter, BN running statistic, and identity mask.
    /// Payloads are stored as f32 regardless of the model's element type.
    pub fn from_model<T: Scalar>(model: &Model<T>, config_json: String) -> Checkpoint {
        let mut params = Vec::new();
        model.visit_params(&mut |meta, t| {
            params.push(TensorEntry {
                name: meta.name.clone(),
                dims: t.shape().to_vec(),
                data: t.data().iter().map(|&v| v.to_f64() as f32).collect(),
            });
        });
        let mut state = Vec::new();
        model.visit_state(&mut |name, t| {
            state.push(TensorEntry {
                name,
                dims: t.shape().to_vec(),
                data: t.data().iter().map(|&v| v.to_f64() as f32).collect(),
            });
        });
        let mut masks = Vec::new();
        model.visit_params(&mut |meta, _| {
            if let Some(mask) = &meta.mask {
                masks.push((meta.name.clone(), mask.taps().iter().map(|&i| i as u32).collect()));
            }
        });
        Checkpoint { config_json, params, state, masks }
    }

    /// Writes every stored tensor into a structurally matching model. Each
    /// model parameter must be present exactly once.
    pub fn apply_to<T: Scalar>(&self, model: &mut Model<T>) -> Result<()> {
        let mut lookup: std::collections::HashMap<&str, &TensorEntry> =
            self.params.iter().map(|e| (e.name.as_str(), e)).collect();
        for e in &self.state {
            lookup.insert(e.name.as_str(), e);
        }
        let mut missing = Vec::new();
        let mut applied = 0usize;
        let mut write = |name: &str, t: &mut Tensor<T>| {
            match lookup.get(name) {
                Some(entry) if entry.dims == t.shape() => {
                    for (dst, &src) in t.data_mut().iter_mut().zip(&entry.data) {
                        *dst = T::from_f64(src as f64);
                    }
                    applied += 1;
                }
                Some(entry) => missing.push(format!(
                    "{name}: shape {:?} vs checkpoint {:?}",
                    t.shape(),
                    entry.dims
                )),
                None => missing.push(format!("{name}: absent from checkpoint")),
            }
        };
        model.visit_params_mut(&mut |meta, t| write(&meta.name, t));
        model.visit_state_mut(&mut |name, t| write(&name, t));
        if !missing.is_empty() {
            return Err(RirError::Format(format!(
                "checkpoint does not match model: {}",
                missing.join("; ")
            )));
        }
        if applied != self.params.len() + self.state.len() {
            return Err(RirError::Format(format!(
                "checkpoint has {} tensors, model consumed {applied}",
                self.params.len() + self.state.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let cfg = self.config_json.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);

        let write_entry = |out: &mut Vec<u8>, e: &TensorEntry| {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for e in &self.params {
            write_entry(&mut out, e);
        }
        out.extend_from_slice(&(self.state.len() as u32).to_le_bytes());
        for e in &self.state {
            write_entry(&mut out, e);
        }
        out.extend_from_slice(&(self.masks.len() as u32).to_le_bytes());
        for (name, taps) in &self.masks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(taps.len() as u32).to_le_bytes());
            for &t in taps {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(RirError::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(RirError::Format(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let config_json = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|e| RirError::Format(format!("config is not utf-8: {e}")))?;

        let read_entries = |r: &mut Reader| -> Result<Vec<TensorEntry>> {
            let count = r.u32()? as usize;
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                let name_len = r.u32()? as usize;
                let name = String::from_utf8(r.take(name_len)?.to_vec())
                    .map_err(|e| RirError::Format(format!("tensor name is not utf-8: {e}")))?;
                let ndim = r.u32()? as usize;
                if ndim == 0 || ndim > 4 {
                    return Err(RirError::Format(format!("{name}: bad rank {ndim}")));
                }
                let mut dims = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    dims.push(r.u32()? as usize);
                }
                let len: usize = dims.iter().product();
                let raw = r.take(len * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                entries.push(TensorEntry { name, dims, data });
            }
            Ok(entries)
        };
        let params = read_entries(&mut r)?;
        let state = read_entries(&mut r)?;

        let mask_count = r.u32()? as usize;
        let mut masks = Vec::with_capacity(mask_count);
        for _ in 0..mask_count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| RirError::Format(format!("mask name is not utf-8: {e}")))?;
            let tap_count = r.u32()? as usize;
            let mut taps = Vec::with_capacity(tap_count);
            for _ in 0..tap_count {
                taps.push(r.u32()?);
            }
            masks.push((name, taps));
        }
        if r.pos != bytes.len() {
            return Err(RirError::Format(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { config_json, params, state, masks })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(RirError::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
