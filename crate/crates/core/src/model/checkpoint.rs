//! Self-describing checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `DSMKCKPT` |
//! | 4 | format version (`u32`, currently 1) |
//! | 8 | header length `L` (`u64`) |
//! | L | UTF-8 JSON header |
//! | 4·k | `f32` payload |
//! | 8 | FNV-1a 64 hash of every preceding byte |
//!
//! The header carries both network specs, the tool version, epoch and step
//! counters, the training configuration and an index of named arrays. Each
//! index entry gives the array's `group` (`g`, `d`, `g.adam.m`, `g.adam.v`,
//! `d.adam.m`, `d.adam.v`), `name`, `shape` and `offset`/`len` in `f32` units
//! into the payload. Network groups hold every parameter, running statistics
//! included; Adam groups hold the first and second moments of trainable
//! parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::ParamSet;
use super::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DSMKCKPT";
const VERSION: u32 = 1;

/// Adam moments for one network, one array per trainable parameter in
/// parameter order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn zeros_for(ps: &ParamSet<f32>) -> Self {
        let m: Vec<Vec<f32>> = ps.trainable().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            t: 0,
            v: m.clone(),
            m,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub g: AdamState,
    pub d: AdamState,
}

pub struct Checkpoint {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub optimizer: Option<OptimizerState>,
    pub epoch: u64,
    pub step: u64,
    pub tool_version: String,
    pub train_config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tool_version: String,
    generator: GeneratorSpec,
    discriminator: DiscriminatorSpec,
    epoch: u64,
    step: u64,
    g_adam_t: Option<u64>,
    d_adam_t: Option<u64>,
    train_config: Option<serde_json::Value>,
    tensors: Vec<Entry>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Payload {
    entries: Vec<Entry>,
    data: Vec<f32>,
}

impl Payload {
    fn push(&mut self, group: &str, name: &str, shape: Vec<usize>, values: &[f32]) {
        self.entries.push(Entry {
            group: group.into(),
            name: name.into(),
            shape,
            offset: self.data.len(),
            len: values.len(),
        });
        self.data.extend_from_slice(values);
    }

    fn params(&mut self, group: &str, ps: &ParamSet<f32>) {
        for p in &ps.params {
            self.push(group, &p.name, p.shape.clone(), &p.value);
        }
    }

    fn adam(&mut self, group: &str, ps: &ParamSet<f32>, st: &AdamState) {
        for ((p, m), v) in ps.trainable().zip(&st.m).zip(&st.v) {
            self.push(&format!("{group}.adam.m"), &p.name, p.shape.clone(), m);
            self.push(&format!("{group}.adam.v"), &p.name, p.shape.clone(), v);
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Payload {
            entries: Vec::new(),
            data: Vec::new(),
        };
        payload.params("g", &self.generator.params);
        payload.params("d", &self.discriminator.params);
        if let Some(opt) = &self.optimizer {
            payload.adam("g", &self.generator.params, &opt.g);
            payload.adam("d", &self.discriminator.params, &opt.d);
        }
        let header = Header {
            tool_version: self.tool_version.clone(),
            generator: self.generator.spec().clone(),
            discriminator: self.discriminator.spec().clone(),
            epoch: self.epoch,
            step: self.step,
            g_adam_t: self.optimizer.as_ref().map(|o| o.g.t),
            d_adam_t: self.optimizer.as_ref().map(|o| o.d.t),
            train_config: self.train_config.clone(),
            tensors: payload.entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(28 + json.len() + 4 * payload.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &payload.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let hash = fnv1a(&out);
        out.extend_from_slice(&hash.to_le_bytes());
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::CorruptCheckpoint { reason, .. } => Error::CorruptCheckpoint {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptCheckpoint {
            path: Default::default(),
            reason,
        };
        if bytes.len() < 28 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a(body) != stored {
            return Err(corrupt("checksum mismatch".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header length exceeds file".into()))?;
        let header: Header =
            serde_json::from_slice(&body[20..header_end]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let raw = &body[header_end..];
        if raw.len() % 4 != 0 {
            return Err(corrupt("payload is not a whole number of f32 values".into()));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let mut generator = Generator::new(header.generator.clone(), 0)
            .map_err(|e| Error::SpecMismatch(format!("stored generator spec: {e}")))?;
        let mut discriminator = Discriminator::new(header.discriminator.clone(), 0)
            .map_err(|e| Error::SpecMismatch(format!("stored discriminator spec: {e}")))?;

        let lookup = |group: &str, name: &str, shape: &[usize]| -> Result<&[f32]> {
            let e = header
                .tensors
                .iter()
                .find(|e| e.group == group && e.name == name)
                .ok_or_else(|| corrupt(format!("missing array {group}/{name}")))?;
            if e.shape != shape {
                return Err(Error::SpecMismatch(format!(
                    "{group}/{name}: stored shape {:?}, network expects {:?}",
                    e.shape, shape
                )));
            }
            data.get(e.offset..e.offset + e.len)
                .filter(|s| s.len() == shape.iter().product::<usize>())
                .ok_or_else(|| corrupt(format!("array {group}/{name} out of bounds")))
        };
        let fill = |group: &str, ps: &mut ParamSet<f32>| -> Result<()> {
            for p in &mut ps.params {
                p.value.copy_from_slice(lookup(group, &p.name, &p.shape)?);
            }
            Ok(())
        };
        fill("g", &mut generator.params)?;
        fill("d", &mut discriminator.params)?;
        let adam = |group: &str, ps: &ParamSet<f32>, t: u64| -> Result<AdamState> {
            let mut st = AdamState { t, ..Default::default() };
            for p in ps.trainable() {
                st.m.push(lookup(&format!("{group}.adam.m"), &p.name, &p.shape)?.to_vec());
                st.v.push(lookup(&format!("{group}.adam.v"), &p.name, &p.shape)?.to_vec());
            }
            Ok(st)
        };
        let optimizer = match (header.g_adam_t, header.d_adam_t) {
            (Some(gt), Some(dt)) => Some(OptimizerState {
                g: adam("g", &generator.params, gt)?,
                d: adam("d", &discriminator.params, dt)?,
            }),
            _ => None,
        };
        if !generator.params.all_finite() || !discriminator.params.all_finite() {
            return Err(corrupt("non-finite parameter values".into()));
        }
        Ok(Self {
            generator,
            discriminator,
            optimizer,
            epoch: header.epoch,
            step: header.step,
            tool_version: header.tool_version,
            train_config: header.train_config,
        })
    }
}
