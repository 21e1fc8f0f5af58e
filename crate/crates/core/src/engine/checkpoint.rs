//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `"KPRN"`, u32 version, u32 tensor count, then per tensor a u16 name
//! length, the UTF-8 name, u8 dtype code, u8 rank, u32 per dim and the raw
//! row-major payload. Trailing u32 words: step counter, epoch, RNG word
//! count and the RNG words, then a u32 length and the UTF-8 JSON config.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: [u8; 4] = *b"KPRN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn bitwise_eq(&self, other: &AnyTensor) -> bool {
        match (self, other) {
            (AnyTensor::F32(a), AnyTensor::F32(b)) => a.bitwise_eq(b),
            (AnyTensor::F64(a), AnyTensor::F64(b)) => a.bitwise_eq(b),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, AnyTensor)>,
    pub step: u32,
    pub epoch: u32,
    pub rng: Vec<u32>,
    /// JSON snapshot of the training configuration.
    pub config: String,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        self.step == other.step
            && self.epoch == other.epoch
            && self.rng == other.rng
            && self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bitwise_eq(b))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, len_u32(self.tensors.len(), "tensor count")?);
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Argument(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            let rank = u8::try_from(t.dims().len())
                .map_err(|_| Error::Argument(format!("tensor {name} rank too large")))?;
            out.push(rank);
            for &d in t.dims() {
                put_u32(&mut out, len_u32(d, "dimension")?);
            }
            match t {
                AnyTensor::F32(t) => put_payload(&mut out, t),
                AnyTensor::F64(t) => put_payload(&mut out, t),
            }
        }
        put_u32(&mut out, self.step);
        put_u32(&mut out, self.epoch);
        put_u32(&mut out, len_u32(self.rng.len(), "rng word count")?);
        for &w in &self.rng {
            put_u32(&mut out, w);
        }
        put_u32(&mut out, len_u32(self.config.len(), "config length")?);
        out.extend_from_slice(self.config.as_bytes());
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let total = file.metadata().map_err(|e| Error::io(path, e))?.len();
        Self::read_from(BufReader::new(file), total).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    /// Parses a checkpoint of `total` bytes; the magic is checked before
    /// anything else is read, and payload sizes are checked against `total`
    /// before their buffers are allocated.
    pub fn read_from(reader: impl Read, total: u64) -> Result<Self> {
        let mut r = Reader {
            inner: reader,
            remaining: total,
        };
        let magic: [u8; 4] = r.array()?;
        if magic != MAGIC {
            return Err(Error::NotACheckpoint(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = String::from_utf8(r.bytes(name_len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
            let [code, rank] = r.array()?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Corrupt(format!("tensor {name}: unknown dtype code {code}")))?;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(r.payload(&name, dims)?),
                DType::F64 => AnyTensor::F64(r.payload(&name, dims)?),
            };
            tensors.push((name, t));
        }
        let step = r.u32()?;
        let epoch = r.u32()?;
        let words = r.u32()? as usize;
        let rng = (0..words).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let config_len = r.u32()? as usize;
        let config = String::from_utf8(r.bytes(config_len)?)
            .map_err(|_| Error::Corrupt("config snapshot is not UTF-8".into()))?;
        if r.remaining != 0 {
            return Err(Error::Corrupt(format!("{} trailing bytes", r.remaining)));
        }
        Ok(Checkpoint {
            tensors,
            step,
            epoch,
            rng,
            config,
        })
    }
}

fn len_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} exceeds u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_payload<T: Element>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.reserve(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<R> {
    inner: R,
    remaining: u64,
}

impl<R: Read> Reader<R> {
    fn claim(&mut self, n: u64) -> Result<()> {
        if n > self.remaining {
            return Err(Error::Corrupt(format!(
                "truncated: need {n} more bytes, {} left",
                self.remaining
            )));
        }
        self.remaining -= n;
        Ok(())
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.claim(buf.len() as u64)?;
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => Error::Corrupt("truncated".into()),
            _ => Error::io("<checkpoint>", e),
        })
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        if n as u64 > self.remaining {
            return Err(Error::Corrupt(format!("truncated: need {n} bytes, {} left", self.remaining)));
        }
        let mut buf = vec![0u8; n];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    fn payload<T: Element>(&mut self, name: &str, dims: Vec<usize>) -> Result<Tensor<T>> {
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(T::DTYPE.size()))
            .ok_or_else(|| Error::Corrupt(format!("tensor {name}: dims {dims:?} overflow")))?;
        let raw = self.bytes(len)?;
        let data = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        Tensor::new(dims, data)
    }
}
