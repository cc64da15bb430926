//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PRNETCKP" | u32 version
//! u64 config_len | config JSON
//! u64 param_count | per param: u32 name_len, name, u32 ndim, u64 dims.., f64 values..
//! u8 has_training_state
//!   u64 epoch | u64 step | f64 beta1, beta2, eps, weight_decay | u64 adam_step
//!   per param (same order): f64 first moments.., f64 second moments..
//! ```
//!
//! Files are written to a sibling temp path and renamed into place.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, PrNet};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Tensor};

const MAGIC: &[u8; 8] = b"PRNETCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct TrainingState {
    pub epoch: u64,
    pub step: u64,
    pub optimizer: AdamW,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
    pub training: Option<TrainingState>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save(path: &Path, model: &PrNet, training: Option<&TrainingState>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let config = serde_json::to_vec(&model.config)?;
    put_u64(&mut buf, config.len() as u64);
    buf.extend_from_slice(&config);
    put_u64(&mut buf, model.params.len() as u64);
    for (_, p) in model.params.iter() {
        put_u32(&mut buf, p.name.len() as u32);
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.value.shape().len() as u32);
        for &d in p.value.shape() {
            put_u64(&mut buf, d as u64);
        }
        put_f64s(&mut buf, p.value.data());
    }
    match training {
        None => buf.push(0),
        Some(t) => {
            buf.push(1);
            put_u64(&mut buf, t.epoch);
            put_u64(&mut buf, t.step);
            let o = &t.optimizer;
            put_f64s(&mut buf, &[o.beta1, o.beta2, o.eps, o.weight_decay]);
            put_u64(&mut buf, o.step);
            for (m, v) in o.m.iter().zip(&o.v) {
                put_f64s(&mut buf, m.data());
                put_f64s(&mut buf, v.data());
            }
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)?;
    let count = r.u64()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f64s(shape.iter().product())?;
        params.push((name, Tensor::new(shape, data)?));
    }
    let training = match r.u8()? {
        0 => None,
        _ => {
            let epoch = r.u64()?;
            let step = r.u64()?;
            let h = r.f64s(4)?;
            let adam_step = r.u64()?;
            let mut m = Vec::with_capacity(count);
            let mut v = Vec::with_capacity(count);
            for (_, p) in &params {
                m.push(Tensor::new(p.shape().to_vec(), r.f64s(p.len())?)?);
                v.push(Tensor::new(p.shape().to_vec(), r.f64s(p.len())?)?);
            }
            Some(TrainingState {
                epoch,
                step,
                optimizer: AdamW {
                    beta1: h[0],
                    beta2: h[1],
                    eps: h[2],
                    weight_decay: h[3],
                    step: adam_step,
                    m,
                    v,
                },
            })
        }
    };
    Ok(Checkpoint {
        config,
        params,
        training,
    })
}

impl PrNet {
    /// Copies named values into the model, reporting every missing,
    /// unexpected or mis-shaped parameter in a single error.
    pub fn load_params(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        let mut problems = Vec::new();
        let mut seen = vec![false; self.params.len()];
        for (name, t) in params {
            match self.params.id(name) {
                None => problems.push(format!("unexpected parameter {name} {:?}", t.shape())),
                Some(id) => {
                    seen[id.index()] = true;
                    let expected = self.params.get(id).value.shape();
                    if expected != t.shape() {
                        problems.push(format!("{name}: checkpoint {:?} vs model {:?}", t.shape(), expected));
                    }
                }
            }
        }
        for (id, p) in self.params.iter() {
            if !seen[id.index()] {
                problems.push(format!("missing parameter {} {:?}", p.name, p.value.shape()));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!("shape mismatch: {}", problems.join("; "))));
        }
        for (name, t) in params {
            let id = self.params.id(name).unwrap();
            self.params.get_mut(id).value = t.clone();
        }
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = PrNet::new(ck.config.clone(), 0)?;
        model.load_params(&ck.params)?;
        Ok(model)
    }
}
