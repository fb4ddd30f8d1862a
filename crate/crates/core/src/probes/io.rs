//! Probe checkpoints: magic `PRBE`, format version, a JSON config block and
//! the named parameter tensors, all little-endian.

use std::path::Path;

use fmclass_autodiff::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::deap::{DeapConfig, DeapProbe};
use crate::probes::obap::{ObapConfig, ObapProbe};
use crate::store::volume::read_u32;

pub const PROBE_MAGIC: &[u8; 4] = b"PRBE";
pub const PROBE_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub enum Probe {
    Deap(DeapProbe),
    Obap(ObapProbe),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ProbeConfig {
    Deap(DeapConfig),
    Obap(ObapConfig),
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Probe {
    fn parts(&self) -> (ProbeConfig, &ParamStore<f32>) {
        match self {
            Probe::Deap(p) => (ProbeConfig::Deap(p.config.clone()), &p.params),
            Probe::Obap(p) => (ProbeConfig::Obap(p.config.clone()), &p.params),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (config, params) = self.parts();
        let json = serde_json::to_string(&config).expect("config serialises");
        let mut out = Vec::new();
        out.extend_from_slice(PROBE_MAGIC);
        put_u32(&mut out, PROBE_VERSION as usize);
        put_u32(&mut out, json.len());
        out.extend_from_slice(json.as_bytes());
        put_u32(&mut out, params.len());
        for p in params.iter() {
            put_u32(&mut out, p.name.len());
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.rank());
            for &d in p.value.shape() {
                put_u32(&mut out, d);
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != PROBE_MAGIC {
            return Err(Error::format(0, "bad magic, expected PRBE"));
        }
        let version = r.u32()?;
        if version != PROBE_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let at = r.at;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(at, "config is not UTF-8"))?;
        let config: ProbeConfig = serde_json::from_str(text)?;
        let mut probe = match config {
            ProbeConfig::Deap(c) => Probe::Deap(DeapProbe::new(c, 0)?),
            ProbeConfig::Obap(c) => Probe::Obap(ObapProbe::new(c, 0)?),
        };
        let params = match &mut probe {
            Probe::Deap(p) => &mut p.params,
            Probe::Obap(p) => &mut p.params,
        };
        let count = r.u32()? as usize;
        if count != params.len() {
            return Err(Error::format(r.at, format!("{count} tensors stored, configuration needs {}", params.len())));
        }
        for _ in 0..count {
            let at = r.at;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(at, "tensor name is not UTF-8"))?.to_owned();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<f32> = r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let id = params.find(&name).ok_or_else(|| Error::format(at, format!("unknown tensor {name:?}")))?;
            let slot = params.get_mut(id);
            if slot.value.shape() != shape.as_slice() {
                return Err(Error::format(at, format!("tensor {name:?} has shape {shape:?}, expected {:?}", slot.value.shape())));
            }
            slot.value = Tensor::new(shape, data)?;
        }
        if r.at != bytes.len() {
            return Err(Error::format(r.at, "trailing bytes"));
        }
        Ok(probe)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: self.at.saturating_add(n),
            actual: self.bytes.len(),
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let at = self.at;
        self.take(4)?;
        Ok(read_u32(self.bytes, at))
    }
}

pub fn save_probe(probe: &Probe, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, probe.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_probe(path: impl AsRef<Path>) -> Result<Probe> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Probe::from_bytes(&bytes)
}
