//! Binary checkpoint: magic, version, embedded config, named parameter
//! records, optional optimizer state, trailing CRC-32.
//!
//! ```text
//! "DECO" | u32 version | u32 len, config TOML
//! u32 count | per param: u32 len, name, u8 dtype, u32 rank, u64 dims.., LE values
//! u8 has_optimizer | [u64 step | per param: LE m values, LE v values]
//! u32 crc32 of everything above
//! ```

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Deco;
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"DECO";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian element bytes.
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerRecord {
    pub step: u64,
    pub m: Vec<Vec<u8>>,
    pub v: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub params: Vec<ParamRecord>,
    pub optimizer: Option<OptimizerRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn dtype_size(d: DType) -> usize {
    match d {
        DType::F32 => 4,
        DType::F64 => 8,
    }
}

impl Checkpoint {
    pub fn capture<T: Element>(config: &RunConfig, store: &ParamStore<T>, optimizer: Option<&AdamState<T>>) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| {
                let mut bytes = Vec::with_capacity(p.tensor.numel() * dtype_size(T::DTYPE));
                T::to_le_bytes_vec(p.tensor.data(), &mut bytes);
                ParamRecord {
                    name: p.name.clone(),
                    dtype: T::DTYPE,
                    shape: p.tensor.shape().to_vec(),
                    bytes,
                }
            })
            .collect();
        let optimizer = optimizer.map(|s| {
            let enc = |vs: &[Vec<T>]| {
                vs.iter()
                    .map(|v| {
                        let mut b = Vec::new();
                        T::to_le_bytes_vec(v, &mut b);
                        b
                    })
                    .collect()
            };
            OptimizerRecord {
                step: s.step,
                m: enc(&s.m),
                v: enc(&s.v),
            }
        });
        Checkpoint {
            config_text: config.to_toml_string(),
            params,
            optimizer,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.config_text.len() as u32);
        out.extend_from_slice(self.config_text.as_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for p in &self.params {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.dtype.tag());
            put_u32(&mut out, p.shape.len() as u32);
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&p.bytes);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                for (m, v) in o.m.iter().zip(&o.v) {
                    out.extend_from_slice(m);
                    out.extend_from_slice(v);
                }
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    /// Verify magic, version and checksum, then parse. Nothing is returned
    /// unless the whole file checks out.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(Error::Checkpoint(format!("file is only {} bytes", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 8 };
        let config_len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let bytes = r.take(n * dtype_size(dtype))?.to_vec();
            params.push(ParamRecord {
                name,
                dtype,
                shape,
                bytes,
            });
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for p in &params {
                    let n = p.bytes.len();
                    m.push(r.take(n)?.to_vec());
                    v.push(r.take(n)?.to_vec());
                }
                Some(OptimizerRecord { step, m, v })
            }
            t => return Err(Error::Checkpoint(format!("bad optimizer flag {t}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            config_text,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml_str(&self.config_text)
    }

    /// Copy every record into `store`, matching by name. The store must hold
    /// exactly the recorded parameters with the same shapes and dtype.
    pub fn load_into<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        let mut staged = Vec::with_capacity(self.params.len());
        for rec in &self.params {
            let id = store
                .id(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", rec.name)))?;
            if rec.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!("{}: stored as {:?}, model uses {:?}", rec.name, rec.dtype, T::DTYPE)));
            }
            if store.get(id).tensor.shape() != rec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{}: stored shape {:?}, model shape {:?}",
                    rec.name,
                    rec.shape,
                    store.get(id).tensor.shape()
                )));
            }
            staged.push((id, Tensor::from_vec(&rec.shape, T::from_le_bytes_slice(&rec.bytes))?));
        }
        for (id, t) in staged {
            store.set(id, t)?;
        }
        Ok(())
    }

    pub fn optimizer_state<T: Element>(&self) -> Option<AdamState<T>> {
        self.optimizer.as_ref().map(|o| AdamState {
            step: o.step,
            m: o.m.iter().map(|b| T::from_le_bytes_slice(b)).collect(),
            v: o.v.iter().map(|b| T::from_le_bytes_slice(b)).collect(),
        })
    }

    /// Rebuild the model described by the embedded config and load its weights.
    pub fn restore(&self) -> Result<(Deco, ParamStore<f32>, RunConfig)> {
        let cfg = self.config()?;
        let (model, mut store) = Deco::new::<f32>(&cfg.model, cfg.train.seed)?;
        self.load_into(&mut store)?;
        Ok((model, store, cfg))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("record overruns file at byte {}", self.pos)));
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
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (RunConfig, ParamStore<f32>) {
        let cfg = RunConfig::default();
        let (_, store) = Deco::new::<f32>(&cfg.model, 3).unwrap();
        (cfg, store)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (cfg, store) = sample();
        let ck = Checkpoint::capture(&cfg, &store, Some(&AdamState::zeros(&store)));
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        let (_, mut other) = Deco::new::<f32>(&cfg.model, 99).unwrap();
        back.load_into(&mut other).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(other.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor), "{}", a.name);
        }
    }

    #[test]
    fn distinct_errors() {
        let (cfg, store) = sample();
        let bytes = Checkpoint::capture(&cfg, &store, None).encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::UnsupportedVersion(9))));
        let truncated = &bytes[..bytes.len() - 100];
        assert!(matches!(Checkpoint::decode(truncated), Err(Error::ChecksumMismatch { .. })));
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::decode(&flipped), Err(Error::ChecksumMismatch { .. })));
    }
}
