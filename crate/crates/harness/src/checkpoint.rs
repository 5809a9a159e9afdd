//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "TDIF" | u32 version | u32 len, run config (JSON) | u8 phase | u64 step
//! params section | EMA section | u8 has_optimizer [u64 t, f64 lr, beta1, beta2, eps, wd,
//! m section, v section] | 32-byte SHA-256 of everything before it
//! ```
//!
//! A section is `u32 count` then per tensor `u32 name_len, name, u32 ndim,
//! u32 dims..., f32 data` in row-major order.

use std::path::Path;

use sha2::{Digest, Sha256};
use transdiff_core::model::TransDiff;
use transdiff_core::Tensor;

use crate::config::{Phase, RunConfig};
use crate::error::{HarnessError, Result};
use crate::optim::AdamW;

pub const MAGIC: &[u8; 4] = b"TDIF";
pub const FORMAT_VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub phase: Phase,
    /// Optimizer steps completed in `phase`.
    pub step: u64,
    pub params: NamedTensors,
    pub ema: NamedTensors,
    pub optimizer: Option<AdamW>,
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(msg.into())
}

fn put_section(out: &mut Vec<u8>, tensors: &[(String, Tensor<f32>)]) {
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn section(&mut self) -> Result<NamedTensors> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let ndim = self.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let bytes = self.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            out.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend((meta.len() as u32).to_le_bytes());
        out.extend(meta);
        out.push(self.phase.code());
        out.extend(self.step.to_le_bytes());
        put_section(&mut out, &self.params);
        put_section(&mut out, &self.ema);
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend(o.t.to_le_bytes());
                for v in [o.lr, o.beta1, o.beta2, o.eps, o.weight_decay] {
                    out.extend(v.to_le_bytes());
                }
                let name = |i: usize| self.params.get(i).map_or_else(String::new, |(n, _)| n.clone());
                let named = |ts: &[Tensor<f32>]| -> NamedTensors {
                    ts.iter().enumerate().map(|(i, t)| (name(i), t.clone())).collect()
                };
                put_section(&mut out, &named(&o.m));
                put_section(&mut out, &named(&o.v));
            }
        }
        let digest = Sha256::digest(&out);
        out.extend(digest);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 8 + 32 || &buf[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let len = r.u32()? as usize;
        let config: RunConfig =
            serde_json::from_slice(r.take(len)?).map_err(|e| bad(format!("config: {e}")))?;
        let phase = Phase::from_code(r.u8()?).ok_or_else(|| bad("unknown phase"))?;
        let step = r.u64()?;
        let params = r.section()?;
        let ema = r.section()?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let [lr, beta1, beta2, eps, weight_decay] = [r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?];
                let m = r.section()?.into_iter().map(|(_, t)| t).collect();
                let v = r.section()?.into_iter().map(|(_, t)| t).collect();
                Some(AdamW {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    t,
                    m,
                    v,
                })
            }
            _ => return Err(bad("bad optimizer flag")),
        };
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config,
            phase,
            step,
            params,
            ema,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Model with the raw trained parameters.
    pub fn model(&self) -> Result<TransDiff<f32>> {
        Ok(TransDiff::from_values(self.config.model.clone(), self.params.clone())?)
    }

    /// Model with the EMA parameters, used for evaluation.
    pub fn ema_model(&self) -> Result<TransDiff<f32>> {
        Ok(TransDiff::from_values(self.config.model.clone(), self.ema.clone())?)
    }
}
