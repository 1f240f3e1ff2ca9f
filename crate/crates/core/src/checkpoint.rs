//! Versioned little-endian checkpoint files.
//!
//! Layout: magic `APCK`, `u32` version, `u64` epoch, ChaCha8 state (32-byte
//! seed, `u128` word position, `u64` stream), precision byte, config text,
//! named parameter records, optimizer velocities, and a trailing CRC-32 of
//! everything before it. Strings are `u32` length plus UTF-8 bytes; tensors
//! are a `u32` rank, `u64` extents, then raw elements in the stored
//! precision.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::Precision;
use crate::error::{Error, Result};
use crate::layers::ParamRole;
use crate::model::Model;
use crate::optim::Sgd;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"APCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    fn of<T: Scalar>(t: &Tensor<T>) -> Self {
        TensorRecord {
            dims: t.dims().to_vec(),
            data: t.as_slice().iter().map(|v| v.as_f64()).collect(),
        }
    }

    fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::from_vec(&self.dims, self.data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub role: ParamRole,
    pub frozen: bool,
    pub value: TensorRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub rng: RngState,
    pub precision: Precision,
    pub config_text: String,
    pub params: Vec<ParamRecord>,
    pub velocities: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(
        model: &Model<T>,
        sgd: &Sgd<T>,
        epoch: u64,
        rng: &ChaCha8Rng,
        precision: Precision,
        config_text: String,
    ) -> Self {
        Checkpoint {
            epoch,
            rng: RngState::capture(rng),
            precision,
            config_text,
            params: model
                .params()
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    role: p.role,
                    frozen: p.frozen,
                    value: TensorRecord::of(&p.value),
                })
                .collect(),
            velocities: sgd.velocities().iter().map(TensorRecord::of).collect(),
        }
    }

    /// Copies parameter values into `model` (and velocities into `sgd` when
    /// given), matching records to parameters by name and shape.
    pub fn apply<T: Scalar>(&self, model: &mut Model<T>, sgd: Option<&mut Sgd<T>>) -> Result<()> {
        let mut params = model.params_mut();
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for (p, rec) in params.iter_mut().zip(&self.params) {
            if p.name != rec.name || p.role != rec.role {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` in checkpoint does not match `{}` in model",
                    rec.name, p.name
                )));
            }
            if p.value.dims() != rec.value.dims.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint parameter",
                    expected: p.value.dims().to_vec(),
                    got: rec.value.dims.clone(),
                });
            }
            p.value = rec.value.to_tensor()?;
            p.frozen = rec.frozen;
        }
        if let Some(sgd) = sgd {
            let velocities = self.velocities.iter().map(TensorRecord::to_tensor).collect::<Result<_>>()?;
            sgd.set_velocities(velocities);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer {
            buf: Vec::new(),
            precision: self.precision,
        };
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(self.epoch);
        w.buf.extend_from_slice(&self.rng.seed);
        w.buf.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u64(self.rng.stream);
        w.buf.push(match self.precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        });
        w.string(&self.config_text);
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.string(&p.name);
            w.buf.push(p.role.code());
            w.buf.push(u8::from(p.frozen));
            w.tensor(&p.value);
        }
        w.u32(self.velocities.len() as u32);
        for v in &self.velocities {
            w.tensor(v);
        }
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch (file is corrupted or truncated)".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let epoch = r.u64()?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let stream = r.u64()?;
        let precision = match r.take(1)?[0] {
            4 => Precision::F32,
            8 => Precision::F64,
            other => return Err(Error::Checkpoint(format!("unknown precision tag {other}"))),
        };
        let config_text = r.string()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.string()?;
            let code = r.take(1)?[0];
            let role = ParamRole::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` has unknown role {code}")))?;
            let frozen = match r.take(1)?[0] {
                0 => false,
                1 => true,
                other => return Err(Error::Checkpoint(format!("bad frozen flag {other}"))),
            };
            let value = r.tensor(precision)?;
            params.push(ParamRecord {
                name,
                role,
                frozen,
                value,
            });
        }
        let n = r.u32()? as usize;
        let mut velocities = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            velocities.push(r.tensor(precision)?);
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            epoch,
            rng: RngState {
                seed,
                word_pos,
                stream,
            },
            precision,
            config_text,
            params,
            velocities,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Writer {
    buf: Vec<u8>,
    precision: Precision,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &TensorRecord) {
        self.u32(t.dims.len() as u32);
        for &d in &t.dims {
            self.u64(d as u64);
        }
        for &v in &t.data {
            match self.precision {
                Precision::F32 => self.buf.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => self.buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn tensor(&mut self, precision: Precision) -> Result<TensorRecord> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Checkpoint(format!("bad tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u64()? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
        let width = match precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let raw = self.take(numel.checked_mul(width).ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?)?;
        let data = match precision {
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect(),
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        Ok(TensorRecord { dims, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig, PoolKind};
    use rand::{RngCore, SeedableRng};

    fn sample<T: Scalar>(precision: Precision) -> (Model<T>, Sgd<T>, ChaCha8Rng, Checkpoint) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cfg = ModelConfig::mnist(PoolKind::AlphaI);
        cfg.conv_channels = vec![2, 3];
        let mut model: Model<T> = build_model(&cfg, &mut rng).unwrap();
        let mut sgd = Sgd::new(0.01, 0.9, 0.0005);
        for p in model.params_mut() {
            p.grad = p.value.map(|v| v + T::one());
        }
        sgd.step(model.params_mut()).unwrap();
        rng.next_u64();
        let ck = Checkpoint::capture(&model, &sgd, 3, &rng, precision, "pool = alphaI\n".into());
        (model, sgd, rng, ck)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for precision in [Precision::F32, Precision::F64] {
            let ck = match precision {
                Precision::F32 => sample::<f32>(precision).3,
                Precision::F64 => sample::<f64>(precision).3,
            };
            let dir = tempfile::tempdir().unwrap();
            let a = dir.path().join("a.bin");
            let b = dir.path().join("b.bin");
            ck.save(&a).unwrap();
            let loaded = Checkpoint::load(&a).unwrap();
            assert_eq!(loaded, ck);
            loaded.save(&b).unwrap();
            assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        }
    }

    #[test]
    fn restores_model_optimizer_and_rng() {
        let (model, sgd, mut rng, ck) = sample::<f32>(Precision::F32);
        let mut fresh_rng = ChaCha8Rng::seed_from_u64(99);
        let mut cfg = ModelConfig::mnist(PoolKind::AlphaI);
        cfg.conv_channels = vec![2, 3];
        let mut other: Model<f32> = build_model(&cfg, &mut fresh_rng).unwrap();
        let mut other_sgd = Sgd::new(0.01, 0.9, 0.0005);
        ck.apply(&mut other, Some(&mut other_sgd)).unwrap();
        for (a, b) in model.params().iter().zip(other.params()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(sgd.velocities(), other_sgd.velocities());
        let mut restored = ck.rng.restore();
        assert_eq!(rng.next_u64(), restored.next_u64());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (_, _, _, ck) = sample::<f32>(Precision::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = ModelConfig::mnist(PoolKind::AlphaI);
        cfg.conv_channels = vec![2, 4];
        let mut other: Model<f32> = build_model(&cfg, &mut rng).unwrap();
        assert!(matches!(ck.apply(&mut other, None), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn corruption_is_a_clean_error() {
        let (_, _, _, ck) = sample::<f32>(Precision::F32);
        let bytes = ck.to_bytes();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        for bad in [&flipped[..], &bytes[..bytes.len() - 10], &bytes[..3], b"PK\x03\x04garbage"] {
            assert!(matches!(Checkpoint::from_bytes(bad), Err(Error::Checkpoint(_))));
        }
    }
}
