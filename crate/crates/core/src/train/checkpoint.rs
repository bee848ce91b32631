use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::autodiff::{AdamConfig, AdamState, ParameterStore, Scalar, Tensor};
use crate::dan::{param_shapes, DanConfig};
use crate::degrade::params::hex;
use crate::degrade::theta_table_hash;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DANC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dan: DanConfig,
    pub train: Option<TrainConfig>,
    pub theta_table: String,
    pub step: u64,
    pub params: ParameterStore,
    pub adam: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dan: DanConfig,
    train: Option<TrainConfig>,
    theta_table: String,
    config_hash: String,
    step: u64,
    frozen: Vec<String>,
    adam: Option<AdamHeader>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    step: u64,
}

/// SHA-256 of the network configuration's JSON form.
pub fn config_hash(cfg: &DanConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex(&Sha256::digest(json))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_str(out, name);
    out.push(f32::DTYPE_TAG);
    out.push(shape.len() as u8);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(dan: DanConfig, train: Option<TrainConfig>, params: ParameterStore) -> Self {
        Checkpoint {
            dan,
            train,
            theta_table: theta_table_hash().into(),
            step: 0,
            params,
            adam: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            dan: self.dan.clone(),
            train: self.train.clone(),
            theta_table: self.theta_table.clone(),
            config_hash: config_hash(&self.dan),
            step: self.step,
            frozen: self.params.iter().filter(|(_, p)| !p.trainable).map(|(n, _)| n.to_string()).collect(),
            adam: self.adam.as_ref().map(|a| AdamHeader {
                config: a.config,
                step: a.step,
            }),
        };
        let json = serde_json::to_string(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_str(&mut out, &json);
        let mut count = self.params.len();
        if let Some(a) = &self.adam {
            count += a.m.len() + a.v.len();
        }
        put_u32(&mut out, count as u32);
        for (name, p) in self.params.iter() {
            put_tensor(&mut out, name, p.tensor.shape(), p.tensor.data());
        }
        if let Some(a) = &self.adam {
            for (prefix, map) in [("adam.m", &a.m), ("adam.v", &a.v)] {
                for (name, v) in map {
                    put_tensor(&mut out, &format!("{prefix}/{name}"), &[v.len()], v);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| Error::Checkpoint("bad magic".into()))? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header: Header = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        if header.config_hash != config_hash(&header.dan) {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        header.dan.validate()?;
        if header.theta_table != theta_table_hash() {
            return Err(Error::Checkpoint("theta table differs from this build's codec".into()));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.u8()?;
            if dtype != f32::DTYPE_TAG {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype {dtype}")));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }

        let mut params = ParameterStore::new();
        for (name, shape) in param_shapes(&header.dan) {
            let t = tensors.remove(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
            let trainable = !header.frozen.contains(&name);
            params.insert(&name, t, trainable)?;
        }
        let adam = header.adam.map(|h| {
            let mut a = AdamState::new(h.config);
            a.step = h.step;
            for name in params.names() {
                for (prefix, map) in [("adam.m", &mut a.m), ("adam.v", &mut a.v)] {
                    if let Some(t) = tensors.remove(&format!("{prefix}/{name}")) {
                        map.insert(name.to_string(), t.into_data());
                    }
                }
            }
            a
        });
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint {
            dan: header.dan,
            train: header.train,
            theta_table: header.theta_table,
            step: header.step,
            params,
            adam,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the parameter values and configuration (optimizer state
    /// excluded).
    pub fn weights_hash(&self) -> Result<String> {
        let light = Checkpoint {
            adam: None,
            train: None,
            step: 0,
            ..self.clone()
        };
        Ok(hex(&Sha256::digest(light.to_bytes()?)))
    }
}
