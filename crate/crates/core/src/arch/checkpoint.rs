//! `CBN1` checkpoint container, little-endian throughout:
//!
//! ```text
//! "CBN1" | u32 version | u32 len + architecture TOML (len 0: none)
//! u32 len + training TOML (len 0: none)
//! u32 tensor count, per tensor: u32 len + name | u32 rank | u64 dims… | f32 data…
//! u8 optimizer flag, then when set: u64 next_epoch | u64 step | f64 β1, β2, eps
//!   | u8 best flag [f64 best mIoU | u64 best epoch] | per tensor f64 m…, f64 v…
//!   | per tensor f64 parameter values
//! ```
//!
//! The double-precision parameter copy in the optimizer section lets a resumed
//! run continue bit-for-bit.

use std::path::Path;

use crate::arch::{build_combinet, ArchConfig, Graph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{Adam, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"CBN1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Option<ArchConfig>,
    pub train: Option<TrainConfig>,
    pub tensors: Vec<NamedTensor>,
    pub state: Option<TrainState>,
    /// Present exactly when `state` is.
    pub master: Option<Vec<Vec<f64>>>,
}

impl Checkpoint {
    pub fn from_graph(graph: &Graph, state: Option<&TrainState>) -> Self {
        Checkpoint {
            config: graph.config().cloned(),
            train: None,
            tensors: graph
                .params()
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.data().iter().map(|&v| v as f32).collect(),
                })
                .collect(),
            state: state.cloned(),
            master: state.map(|_| graph.params().iter().map(|p| p.tensor.data().to_vec()).collect()),
        }
    }

    pub fn with_train_config(mut self, cfg: &TrainConfig) -> Self {
        self.train = Some(cfg.clone());
        self
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(Path::new(&tmp), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let cfg = self.config.as_ref().map(ArchConfig::to_toml).unwrap_or_default();
        put_str(&mut out, &cfg);
        put_str(&mut out, &self.train.as_ref().map(TrainConfig::to_toml).unwrap_or_default());
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            put_u32(&mut out, t.shape.len() as u32);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.state {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&(s.next_epoch as u64).to_le_bytes());
                out.extend_from_slice(&s.adam.step.to_le_bytes());
                for v in [s.adam.beta1, s.adam.beta2, s.adam.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                match (s.best_miou, s.best_epoch) {
                    (Some(m), Some(e)) => {
                        out.push(1);
                        out.extend_from_slice(&m.to_le_bytes());
                        out.extend_from_slice(&(e as u64).to_le_bytes());
                    }
                    _ => out.push(0),
                }
                for (m, v) in s.adam.m.iter().zip(&s.adam.v) {
                    for x in m.iter().chain(v) {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                for x in self.master.iter().flatten().flatten() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != MAGIC {
            return Err(Error::format(origin, "not a CBN1 checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
        }
        let cfg_text = r.string()?;
        let config = if cfg_text.is_empty() {
            None
        } else {
            Some(ArchConfig::from_toml(&cfg_text, &origin.display().to_string())?)
        };
        let train_text = r.string()?;
        let train = if train_text.is_empty() {
            None
        } else {
            Some(TrainConfig::from_toml(&train_text, &origin.display().to_string())?)
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.err("tensor too large"))?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| r.err("tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let mut master = None;
        let state = match r.u8()? {
            0 => None,
            1 => {
                let next_epoch = r.u64()? as usize;
                let step = r.u64()?;
                let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
                let (best_miou, best_epoch) = match r.u8()? {
                    0 => (None, None),
                    _ => (Some(r.f64()?), Some(r.u64()? as usize)),
                };
                let mut m = Vec::with_capacity(tensors.len());
                let mut v = Vec::with_capacity(tensors.len());
                for t in &tensors {
                    let n = t.data.len();
                    m.push((0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
                    v.push((0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
                }
                let mut values = Vec::with_capacity(tensors.len());
                for t in &tensors {
                    values.push((0..t.data.len()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
                }
                master = Some(values);
                let adam = Adam { beta1, beta2, eps, step, m, v };
                Some(TrainState { next_epoch, adam, best_miou, best_epoch })
            }
            f => return Err(r.err(&format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Checkpoint { config, train, tensors, state, master })
    }

    /// Copies the stored tensors into `graph`, matching names and shapes.
    pub fn apply(&self, graph: &mut Graph, origin: &Path) -> Result<()> {
        let params = graph.params_mut();
        if params.len() != self.tensors.len() {
            return Err(Error::format(
                origin,
                format!("checkpoint holds {} tensors, network has {}", self.tensors.len(), params.len()),
            ));
        }
        for (i, (p, t)) in params.iter_mut().zip(&self.tensors).enumerate() {
            if p.name != t.name || p.tensor.shape() != t.shape.as_slice() {
                return Err(Error::format(
                    origin,
                    format!("tensor `{}` {:?} does not match network parameter `{}` {:?}", t.name, t.shape, p.name, p.tensor.shape()),
                ));
            }
            let data = match &self.master {
                Some(m) => m[i].clone(),
                None => t.data.iter().map(|&v| v as f64).collect(),
            };
            p.tensor = Tensor::new(t.shape.clone(), data)?;
        }
        Ok(())
    }

    /// Rebuilds the network from the echoed configuration.
    pub fn to_graph(&self, origin: &Path) -> Result<Graph> {
        let cfg = self
            .config
            .as_ref()
            .ok_or_else(|| Error::format(origin, "checkpoint carries no architecture config"))?;
        let mut g = build_combinet(cfg, 0)?;
        self.apply(&mut g, origin)?;
        Ok(g)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, graph: &Graph, state: Option<&TrainState>) -> Result<()> {
    Checkpoint::from_graph(graph, state).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes, path)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::format(self.origin, format!("{msg} at byte {}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.err("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("invalid UTF-8"))
    }
}
