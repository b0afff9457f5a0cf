//! Model checkpoint container.
//!
//! Layout: magic `PS3M`, a version byte, a little-endian `u32` length and a
//! JSON header of that length (training config, model spec and data
//! fingerprints), then every parameter tensor in visit order as
//! `u16` name length, UTF-8 name, `u32` rows, `u32` cols and row-major
//! little-endian `f32` values.
//!
//! Tensors are stored in single precision; [`Checkpoint::round_to_f32`]
//! gives the exact in-memory image of what a save followed by a load yields.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelParams, ModelSpec};
use crate::numerics::Matrix;
use crate::survival::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PS3M";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprints {
    /// Hash of the gene order the pathway encoders were trained on.
    pub gene_order: Option<String>,
    /// Hash of the pathway masks.
    pub pathways: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    spec: ModelSpec,
    fingerprints: Fingerprints,
    tensors: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub fingerprints: Fingerprints,
    pub model: Model,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn new(config: TrainConfig, fingerprints: Fingerprints, model: Model) -> Self {
        Self {
            config,
            fingerprints,
            model,
        }
    }

    /// Rounds every parameter to single precision in place.
    pub fn round_to_f32(params: &mut ModelParams) {
        params.visit_mut(&mut |m| {
            for v in m.as_mut_slice() {
                *v = f64::from(*v as f32);
            }
        });
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut tensors = 0;
        self.model.params.visit("", &mut |_, _| tensors += 1);
        let header = Header {
            config: self.config.clone(),
            spec: self.model.spec.clone(),
            fingerprints: self.fingerprints.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(
            &u32::try_from(json.len())
                .map_err(|_| bad("header too large"))?
                .to_le_bytes(),
        );
        out.extend_from_slice(&json);
        let mut err = None;
        self.model.params.visit("", &mut |name, m| {
            let f: Vec<f32> = m.as_slice().iter().map(|&v| v as f32).collect();
            if err.is_none() && f.iter().any(|v| !v.is_finite()) {
                err = Some(bad(format!("tensor {name} is not finite in single precision")));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in f {
                out.extend_from_slice(&v.to_le_bytes());
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(bad("bad magic"));
        }
        let version = r.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        // structure from `ModelSpec`, values from the file
        let mut params = ModelParams::init(&header.spec, &mut crate::rng::stream(0, crate::rng::INIT))?;
        let mut names = Vec::new();
        params.visit("", &mut |n, m| names.push((n.to_string(), m.shape())));
        if names.len() != header.tensors {
            return Err(bad(format!(
                "expected {} tensors, header says {}",
                names.len(),
                header.tensors
            )));
        }
        let mut loaded = Vec::with_capacity(names.len());
        for (name, shape) in &names {
            let n = r.u16()? as usize;
            let got = std::str::from_utf8(r.take(n)?).map_err(|_| bad("tensor name is not UTF-8"))?;
            if got != name {
                return Err(bad(format!("expected tensor {name}, found {got}")));
            }
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if (rows, cols) != *shape {
                return Err(bad(format!(
                    "tensor {name}: shape {rows}x{cols}, expected {}x{}",
                    shape.0, shape.1
                )));
            }
            let raw = r.take(
                rows.checked_mul(cols)
                    .and_then(|x| x.checked_mul(4))
                    .ok_or_else(|| bad("shape overflow"))?,
            )?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("tensor {name} has non-finite values")));
            }
            loaded.push(Matrix::from_vec(rows, cols, data)?);
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let mut it = loaded.into_iter();
        params.visit_mut(&mut |m| *m = it.next().expect("counted"));
        Ok(Self {
            config: header.config,
            fingerprints: header.fingerprints,
            model: Model {
                spec: header.spec,
                params,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Fails unless the checkpoint was trained on the given gene order and
    /// pathway masks.
    pub fn check_fingerprints(&self, expected: &Fingerprints) -> Result<()> {
        if self.fingerprints.gene_order != expected.gene_order {
            return Err(Error::FingerprintMismatch { what: "gene order" });
        }
        if self.fingerprints.pathways != expected.pathways {
            return Err(Error::FingerprintMismatch { what: "pathway masks" });
        }
        Ok(())
    }
}
