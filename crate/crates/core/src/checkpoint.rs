//! Binary checkpoints.
//!
//! Layout (little-endian): `"HGCK"`, u32 version, u64 length + TOML model
//! config, u64 training step, u32 parameter count, then per parameter a
//! u32-length-prefixed UTF-8 name followed by an HGT1 tensor, and finally a
//! u8 flag followed, when set, by the optimizer step and the first and
//! second moment of every parameter as HGT1 tensors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use hg_tensor::Tensor;

use crate::config::ModelConfig;
use crate::error::{HgError, Result};
use crate::params::{AdamW, ParamStore};

const MAGIC: &[u8; 4] = b"HGCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamW>,
}

fn ck_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HgError::Checkpoint(msg.into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: u64, what: &str) -> Result<Vec<u8>> {
    if n > 1 << 30 {
        return ck_err(format!("{what} length {n} is implausible"));
    }
    let mut buf = vec![0u8; n as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

impl Checkpoint {
    pub fn capture(
        config: &ModelConfig,
        step: u64,
        store: &ParamStore,
        optimizer: Option<&AdamW>,
    ) -> Self {
        Self {
            config: config.clone(),
            step,
            params: store
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg = self.config.to_toml()?;
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(cfg.as_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(&mut w)?;
        }
        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(opt) => {
                w.write_all(&[1])?;
                w.write_all(&opt.step.to_le_bytes())?;
                for moments in [&opt.m, &opt.v] {
                    for (buf, (_, t)) in moments.iter().zip(&self.params) {
                        Tensor::new(t.shape().to_vec(), buf.clone())?.write_to(&mut w)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return ck_err("not a checkpoint (bad magic)");
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return ck_err(format!("unsupported version {version}"));
        }
        let n = read_u64(&mut r)?;
        let cfg = String::from_utf8(read_bytes(&mut r, n, "config")?)
            .map_err(|_| HgError::Checkpoint("config is not UTF-8".into()))?;
        let config = ModelConfig::from_toml(&cfg)?;
        let step = read_u64(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = read_u32(&mut r)?;
            let name = String::from_utf8(read_bytes(&mut r, u64::from(n), "name")?)
                .map_err(|_| HgError::Checkpoint("parameter name is not UTF-8".into()))?;
            params.push((name, Tensor::read_from(&mut r)?));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let optimizer = match flag[0] {
            0 => None,
            1 => {
                let ostep = read_u64(&mut r)?;
                let mut moments = [Vec::with_capacity(count), Vec::with_capacity(count)];
                for m in &mut moments {
                    for (name, p) in &params {
                        let t = Tensor::read_from(&mut r)?;
                        if t.shape() != p.shape() {
                            return ck_err(format!(
                                "optimizer state for {name} has shape {:?}",
                                t.shape()
                            ));
                        }
                        m.push(t.into_data());
                    }
                }
                let [m, v] = moments;
                Some(AdamW { step: ostep, m, v })
            }
            f => return ck_err(format!("bad optimizer flag {f}")),
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return ck_err("trailing bytes");
        }
        Ok(Self {
            config,
            step,
            params,
            optimizer,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&bytes[..])
    }

    /// Errors unless `expected` equals the stored config.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.config != expected {
            return ck_err(format!(
                "config mismatch:\n--- checkpoint\n{}--- requested\n{}",
                self.config.to_toml()?,
                expected.to_toml()?
            ));
        }
        Ok(())
    }
}
