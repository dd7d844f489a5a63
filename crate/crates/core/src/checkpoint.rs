//! Checkpoint files.
//!
//! Layout, little-endian: magic `NARC`, `u32` version, `u32` length and
//! bytes of the run configuration as JSON, `u32` tensor count, then per
//! tensor sorted by name a `u32` name length, the name, a `u32` rank, `u32`
//! dims and `f32` data. The optimizer follows as `u64` step count, `f64`
//! lr, beta1, beta2, eps, then the first and second moments of every tensor
//! in the same order. Then `u64` training step, `u64` run seed, and a final
//! `u64` FNV-1a checksum of every preceding byte.

use std::path::Path;

use crate::config::RunConfig;
use crate::denoise::TrainState;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{AdamConfig, AdamState, Tensor};

pub const NARC_MAGIC: &[u8; 4] = b"NARC";
pub const NARC_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(config: RunConfig, state: TrainState) -> Self {
        Self { config, state }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(NARC_MAGIC);
        out.extend_from_slice(&NARC_VERSION.to_le_bytes());
        let cfg = self.config.to_json();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());

        let params = &self.state.params;
        let mut order: Vec<usize> = (0..params.names().len()).collect();
        order.sort_by(|&a, &b| params.names()[a].cmp(&params.names()[b]));
        out.extend_from_slice(&(order.len() as u32).to_le_bytes());
        for &i in &order {
            let name = &params.names()[i];
            let t = &params.tensors()[i];
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }

        let adam = &self.state.adam;
        out.extend_from_slice(&adam.t.to_le_bytes());
        let AdamConfig { lr, beta1, beta2, eps } = adam.config;
        for v in [lr, beta1, beta2, eps] {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        for &i in &order {
            put_f32s(&mut out, adam.m[i].data());
            put_f32s(&mut out, adam.v[i].data());
        }
        out.extend_from_slice(&self.state.step.to_le_bytes());
        out.extend_from_slice(&self.state.seed.to_le_bytes());
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a64(body) != stored {
            return Err(Error::Format("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != NARC_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != NARC_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|e| Error::Format(e.to_string()))?;
        let config = RunConfig::from_json(cfg_text)?;

        let n = r.u32()? as usize;
        let mut named = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format(e.to_string()))?.to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f32s(shape.iter().product())?;
            named.push((name, Tensor::new(shape, data)?));
        }
        if named.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Format("tensor table is not sorted by name".into()));
        }
        let shapes: Vec<(String, Vec<usize>)> = named.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        let params = ModelParams::from_named(&config.model, named)?;

        let t = r.u64()?;
        let adam_cfg = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
        let mut m_sorted = Vec::with_capacity(n);
        let mut v_sorted = Vec::with_capacity(n);
        for (_, shape) in &shapes {
            let k = shape.iter().product();
            m_sorted.push(Tensor::new(shape.clone(), r.f32s(k)?)?);
            v_sorted.push(Tensor::new(shape.clone(), r.f32s(k)?)?);
        }
        // Moments are stored in name order; the live state follows the layout order.
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for name in params.names() {
            let i = shapes.binary_search_by(|(s, _)| s.as_str().cmp(name)).expect("from_named checked names");
            m.push(m_sorted[i].clone());
            v.push(v_sorted[i].clone());
        }
        let step = r.u64()?;
        let seed = r.u64()?;
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let adam = AdamState { config: adam_cfg, m, v, t };
        Ok(Self { config, state: TrainState { params, adam, step, seed } })
    }

    /// Writes through a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("narc.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
