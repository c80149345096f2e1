use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;

use super::optim::Adam;

const MAGIC: &[u8; 8] = b"USTEDCK1";

/// Position of the training random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub updates: Vec<u64>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl From<&Adam> for OptimizerState {
    fn from(a: &Adam) -> Self {
        OptimizerState {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            updates: a.t.clone(),
            m: a.m.clone(),
            v: a.v.clone(),
        }
    }
}

impl From<OptimizerState> for Adam {
    fn from(s: OptimizerState) -> Self {
        Adam {
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
            m: s.m,
            v: s.v,
            t: s.updates,
        }
    }
}

/// A saved model with optional optimizer and random-stream state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Parameters by canonical name, in model order.
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
    pub seed: u64,
    pub rng: Option<RngState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config_sha256: String,
    step: u64,
    seed: u64,
    rng_seed: Option<String>,
    rng_word_pos: Option<String>,
    has_optimizer: bool,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::format("checkpoint", "odd-length hex"));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| Error::format("checkpoint", e.to_string())))
        .collect()
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format("checkpoint", "length exceeds u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    write_u32(w, b.len())?;
    w.write_all(b)?;
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R, limit: usize) -> Result<Vec<u8>> {
    let n = read_u32(r)?;
    if n > limit {
        return Err(Error::format("checkpoint", format!("record of {n} bytes exceeds {limit}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    write_bytes(w, name.as_bytes())?;
    write_u32(w, t.shape().len())?;
    for &d in t.shape() {
        write_u32(w, d)?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let name = String::from_utf8(read_bytes(r, 4096)?).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let rank = read_u32(r)?;
    if rank == 0 || rank > 8 {
        return Err(Error::format("checkpoint", format!("tensor {name} has rank {rank}")));
    }
    let shape = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
    let len = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= 1 << 30)
        .ok_or_else(|| Error::format("checkpoint", format!("tensor {name} is too large")))?;
    let mut raw = vec![0u8; len * 8];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, seed: u64) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model
                .params()
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
            optimizer: None,
            step,
            seed,
            rng: None,
        }
    }

    /// Rebuilds the model, checking that every parameter is present with the
    /// expected shape.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone())?;
        let mut bad = Vec::new();
        for (name, t) in &self.params {
            match model.params().by_name(name) {
                Some(cur) if cur.shape() == t.shape() => {}
                Some(cur) => bad.push(format!("{name}: {:?} vs {:?}", cur.shape(), t.shape())),
                None => bad.push(format!("{name}: unexpected")),
            }
        }
        let names: Vec<String> = model.params().iter().map(|(_, n, _)| n.to_string()).collect();
        for n in &names {
            if !self.params.iter().any(|(p, _)| p == n) {
                bad.push(format!("{n}: missing"));
            }
        }
        if !bad.is_empty() {
            return Err(Error::ParamMismatch(bad));
        }
        for (name, t) in &self.params {
            model.params_mut().assign(name, t)?;
        }
        Ok(model)
    }

    pub fn config_hash(config: &ModelConfig) -> Result<String> {
        Ok(hex(&Sha256::digest(serde_json::to_vec(config)?)))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let config_json = serde_json::to_vec(&self.config)?;
        let header = Header {
            config_sha256: hex(&Sha256::digest(&config_json)),
            step: self.step,
            seed: self.seed,
            rng_seed: self.rng.map(|r| hex(&r.seed)),
            rng_word_pos: self.rng.map(|r| r.word_pos.to_string()),
            has_optimizer: self.optimizer.is_some(),
        };
        w.write_all(MAGIC)?;
        write_bytes(&mut w, &serde_json::to_vec(&header)?)?;
        write_bytes(&mut w, &config_json)?;
        write_u32(&mut w, self.params.len())?;
        for (name, t) in &self.params {
            write_tensor(&mut w, name, t)?;
        }
        if let Some(o) = &self.optimizer {
            for v in [o.beta1, o.beta2, o.eps] {
                w.write_all(&v.to_le_bytes())?;
            }
            for ((name, _), ((t, m), v)) in self.params.iter().zip(o.updates.iter().zip(&o.m).zip(&o.v)) {
                w.write_all(&t.to_le_bytes())?;
                write_tensor(&mut w, name, m)?;
                write_tensor(&mut w, name, v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let header: Header = serde_json::from_slice(&read_bytes(&mut r, 1 << 16)?)?;
        let config_json = read_bytes(&mut r, 1 << 24)?;
        if hex(&Sha256::digest(&config_json)) != header.config_sha256 {
            return Err(Error::format("checkpoint", "config hash mismatch"));
        }
        let config: ModelConfig = serde_json::from_slice(&config_json)?;
        let n = read_u32(&mut r)?;
        let params = (0..n).map(|_| read_tensor(&mut r)).collect::<Result<Vec<_>>>()?;
        let optimizer = if header.has_optimizer {
            let mut f = [0u8; 8];
            let mut next = |r: &mut R| -> Result<f64> {
                r.read_exact(&mut f)?;
                Ok(f64::from_le_bytes(f))
            };
            let (beta1, beta2, eps) = (next(&mut r)?, next(&mut r)?, next(&mut r)?);
            let (mut updates, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
            for (name, t) in &params {
                let mut c = [0u8; 8];
                r.read_exact(&mut c)?;
                updates.push(u64::from_le_bytes(c));
                for dst in [&mut m, &mut v] {
                    let (mname, mt) = read_tensor(&mut r)?;
                    if &mname != name || mt.shape() != t.shape() {
                        return Err(Error::format("checkpoint", format!("optimizer record {mname} out of place")));
                    }
                    dst.push(mt);
                }
            }
            Some(OptimizerState {
                beta1,
                beta2,
                eps,
                updates,
                m,
                v,
            })
        } else {
            None
        };
        let rng = match (header.rng_seed, header.rng_word_pos) {
            (Some(s), Some(p)) => {
                let bytes = unhex(&s)?;
                let seed: [u8; 32] = bytes
                    .try_into()
                    .map_err(|_| Error::format("checkpoint", "rng seed must be 32 bytes"))?;
                let word_pos = p.parse().map_err(|_| Error::format("checkpoint", "bad rng position"))?;
                Some(RngState { seed, word_pos })
            }
            _ => None,
        };
        Ok(Checkpoint {
            config,
            params,
            optimizer,
            step: header.step,
            seed: header.seed,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
