//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `GNSS`, `u32` format version, `u32` header
//! length, JSON header, then named tensors, each as `u32` name length, UTF-8
//! name, `u32` rank, `u64` extents, `f64` data. Learnable tensors keep their
//! names; running statistics are `stats.<layer>.mean|var`; Adam moments are
//! `adam.m.<name>` and `adam.v.<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use nowcast_tensor::{AdamConfig, AdamState, RunningStats, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::losses::ClassScheme;
use crate::network::{NetworkConfig, NetworkParams};
use crate::train::{History, LossKind};

pub const MAGIC: &[u8; 4] = b"GNSS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub scheme: ClassScheme,
    pub loss: LossKind,
    pub adam: Option<AdamState>,
    pub epoch: usize,
    pub history: History,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    scheme: ClassScheme,
    loss: LossKind,
    epoch: usize,
    history: History,
    adam: Option<AdamHeader>,
    tensor_count: usize,
}

impl Checkpoint {
    /// Fresh checkpoint without optimizer state.
    pub fn from_params(params: NetworkParams, loss: LossKind) -> Self {
        Checkpoint {
            params,
            scheme: ClassScheme::default(),
            loss,
            adam: None,
            epoch: 0,
            history: History::default(),
        }
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (k, s) in &self.params.stats {
            let n = s.mean.len();
            out.push((
                format!("stats.{k}.mean"),
                Tensor::new(vec![n], s.mean.clone()).expect("non-empty stats"),
            ));
            out.push((
                format!("stats.{k}.var"),
                Tensor::new(vec![n], s.var.clone()).expect("non-empty stats"),
            ));
        }
        if let Some(adam) = &self.adam {
            for ((name, _), (m, v)) in self.params.params.iter().zip(adam.m.iter().zip(&adam.v)) {
                out.push((format!("adam.m.{name}"), m.clone()));
                out.push((format!("adam.v.{name}"), v.clone()));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(adam) = &self.adam {
            if adam.m.len() != self.params.params.len() || adam.v.len() != self.params.params.len() {
                return Err(CoreError::invalid(
                    "checkpoint",
                    "optimizer moments do not match the parameter list",
                ));
            }
        }
        let tensors = self.named_tensors();
        let header = Header {
            config: self.params.config.clone(),
            scheme: self.scheme.clone(),
            loss: self.loss,
            epoch: self.epoch,
            history: self.history.clone(),
            adam: self.adam.as_ref().map(|a| AdamHeader {
                config: a.config,
                step: a.step,
            }),
            tensor_count: tensors.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 16 + tensors.iter().map(|(_, t)| t.len() * 8 + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and fully validates a checkpoint; nothing is returned unless
    /// every tensor is present, well-shaped and the input is consumed exactly.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CoreError::format("checkpoint", 0, "bad magic, expected GNSS"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CoreError::format(
                "checkpoint",
                4,
                format!("unsupported format version {version}, expected {VERSION}"),
            ));
        }
        let hlen = r.u32()? as usize;
        let hpos = r.pos;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| CoreError::format("checkpoint", hpos, format!("header JSON: {e}")))?;
        let mut tensors = BTreeMap::new();
        for _ in 0..header.tensor_count {
            let at = r.pos;
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| CoreError::format("checkpoint", at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(CoreError::format(
                    "checkpoint",
                    at,
                    format!("tensor {name} has implausible rank {rank}"),
                ));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| CoreError::format("checkpoint", r.pos, "extent overflow"))?);
            }
            let len = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let len = len
                .filter(|l| l.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| {
                    CoreError::format(
                        "checkpoint",
                        r.pos,
                        format!(
                            "tensor {name} of shape {shape:?} exceeds the remaining {} bytes (truncated file?)",
                            r.remaining()
                        ),
                    )
                })?;
            let data = r
                .take(len * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CoreError::format("checkpoint", at, format!("tensor {name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(CoreError::format("checkpoint", at, format!("duplicate tensor {name}")));
            }
        }
        if r.remaining() != 0 {
            return Err(CoreError::format("checkpoint", r.pos, format!("{} trailing bytes", r.remaining())));
        }
        Self::assemble(header, tensors)
    }

    fn assemble(header: Header, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let reference = crate::network::build(&header.config, 0)?;
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| CoreError::invalid("checkpoint", format!("missing tensor {name}")))
        };
        let mut params = BTreeMap::new();
        for name in reference.params.keys() {
            params.insert(name.clone(), take(name)?);
        }
        let mut stats = BTreeMap::new();
        for name in reference.stats.keys() {
            let mean = take(&format!("stats.{name}.mean"))?.into_data();
            let var = take(&format!("stats.{name}.var"))?.into_data();
            stats.insert(name.clone(), RunningStats { mean, var });
        }
        let adam = match header.adam {
            None => None,
            Some(h) => {
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for name in params.keys() {
                    m.push(take(&format!("adam.m.{name}"))?);
                    v.push(take(&format!("adam.v.{name}"))?);
                }
                Some(AdamState {
                    config: h.config,
                    step: h.step,
                    m,
                    v,
                })
            }
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(CoreError::invalid("checkpoint", format!("unexpected tensor {extra}")));
        }
        let params = NetworkParams {
            config: header.config,
            params,
            stats,
        };
        params.validate()?;
        if let Some(a) = &adam {
            for ((name, p), (m, v)) in params.params.iter().zip(a.m.iter().zip(&a.v)) {
                if m.shape() != p.shape() || v.shape() != p.shape() {
                    return Err(CoreError::invalid(
                        "checkpoint",
                        format!("optimizer moments for {name} are misshapen"),
                    ));
                }
            }
        }
        header.scheme.validate()?;
        Ok(Checkpoint {
            params,
            scheme: header.scheme,
            loss: header.loss,
            adam,
            epoch: header.epoch,
            history: header.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(CoreError::format(
                "file",
                self.pos,
                format!("truncated: needed {n} bytes, {} remain", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
