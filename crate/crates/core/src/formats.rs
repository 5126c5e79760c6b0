//! Little-endian binary containers: `FXDA` magic, a format byte, a `u16` version.
//!
//! * Grid (`G`): rank, extents, `f32` values.
//! * Obs (`O`): crop, frames, channels, BT / encoding / cloud planes, packed validity bits.
//! * Checkpoint (`C`): metadata text, named tensors, SHA-256 of everything before it.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::diffcore::{ParamStore, Scalar, Tensor};
use crate::obsmodel::{Crop, SuperObsGrid, AUX_PLANES};

pub const MAGIC: &[u8; 4] = b"FXDA";
pub const VERSION: u16 = 1;
const GRID: u8 = b'G';
const OBS: u8 = b'O';
const CHECKPOINT: u8 = b'C';

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not an FXDA {expected} file (found {found:?})")]
    Magic { expected: char, found: Vec<u8> },
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("truncated or malformed data: {0}")]
    Malformed(String),
    #[error("checksum mismatch: file is corrupt")]
    Checksum,
}

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(kind: u8) -> Self {
        let mut v = MAGIC.to_vec();
        v.push(kind);
        v.extend_from_slice(&VERSION.to_le_bytes());
        Self(v)
    }
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u16(&mut self, x: u16) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u32(&mut self, x: usize) {
        self.0.extend_from_slice(&(x as u32).to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn f32s<T: Scalar>(&mut self, xs: &[T]) {
        self.0.reserve(4 * xs.len());
        for x in xs {
            self.0.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    fn shape(&mut self, shape: &[usize]) {
        self.u8(shape.len() as u8);
        shape.iter().for_each(|&e| self.u32(e));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], kind: u8) -> Result<Self, FormatError> {
        if buf.len() < 7 || &buf[..4] != MAGIC || buf[4] != kind {
            return Err(FormatError::Magic {
                expected: kind as char,
                found: buf[..buf.len().min(5)].to_vec(),
            });
        }
        let mut r = Self { buf, pos: 5 };
        let v = r.u16()?;
        if v != VERSION {
            return Err(FormatError::Version(v));
        }
        Ok(r)
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| FormatError::Malformed(format!("need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| FormatError::Malformed("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn shape(&mut self) -> Result<Vec<usize>, FormatError> {
        let rank = self.u8()? as usize;
        (0..rank).map(|_| self.u32()).collect()
    }
    fn tensor(&mut self) -> Result<Tensor<f32>, FormatError> {
        let shape = self.shape()?;
        let n = shape.iter().product();
        let data = self.f32s(n)?;
        Tensor::from_vec(&shape, data).map_err(|e| FormatError::Malformed(e.to_string()))
    }
    fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Malformed(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_grid<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut w = Writer::new(GRID);
    w.shape(t.shape());
    w.f32s(t.data());
    w.0
}

pub fn decode_grid(buf: &[u8]) -> Result<Tensor<f32>, FormatError> {
    let mut r = Reader::new(buf, GRID)?;
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

pub fn encode_obs(o: &SuperObsGrid) -> Vec<u8> {
    let mut w = Writer::new(OBS);
    for v in [o.crop.row, o.crop.col, o.crop.h, o.crop.w, o.frames, o.channels] {
        w.u32(v);
    }
    w.f32s(o.bt.data());
    w.f32s(o.aux.data());
    w.f32s(o.cloud.data());
    let mut bits = vec![0u8; o.mask.len().div_ceil(8)];
    for (i, &m) in o.mask.iter().enumerate() {
        if m {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    w.bytes(&bits);
    w.0
}

pub fn decode_obs(buf: &[u8]) -> Result<SuperObsGrid, FormatError> {
    let mut r = Reader::new(buf, OBS)?;
    let crop = Crop { row: r.u32()?, col: r.u32()?, h: r.u32()?, w: r.u32()? };
    let (frames, channels) = (r.u32()?, r.u32()?);
    let (h, w) = (crop.h, crop.w);
    let mk = |shape: &[usize], data| Tensor::from_vec(shape, data).map_err(|e| FormatError::Malformed(e.to_string()));
    let bt = mk(&[frames * channels, h, w], r.f32s(frames * channels * h * w)?)?;
    let aux = mk(&[frames * AUX_PLANES, h, w], r.f32s(frames * AUX_PLANES * h * w)?)?;
    let cloud = mk(&[frames, h, w], r.f32s(frames * h * w)?)?;
    let n = frames * h * w;
    let bits = r.take(n.div_ceil(8))?;
    let mask = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
    r.finish()?;
    Ok(SuperObsGrid { crop, frames, channels, bt, mask, aux, cloud })
}

/// Named tensors plus free-form metadata text.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor<f32>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Parameters in store order.
    pub fn from_store<T: Scalar>(meta: String, store: &ParamStore<T>) -> Self {
        let tensors = store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                trainable: p.trainable,
                value: p.value.cast(),
            })
            .collect();
        Self { meta, tensors }
    }

    /// Rebuilds a store from the tensors whose names satisfy `keep`.
    pub fn to_store<T: Scalar>(&self, keep: impl Fn(&str) -> bool) -> ParamStore<T> {
        let mut s = ParamStore::new();
        for t in self.tensors.iter().filter(|t| keep(&t.name)) {
            s.add(t.name.clone(), t.value.cast(), t.trainable);
        }
        s
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT);
    w.u32(c.meta.len());
    w.bytes(c.meta.as_bytes());
    w.u32(c.tensors.len());
    for t in &c.tensors {
        w.u16(t.name.len() as u16);
        w.bytes(t.name.as_bytes());
        w.u8(t.trainable as u8);
        w.shape(t.value.shape());
        w.f32s(t.value.data());
    }
    let digest = Sha256::digest(&w.0);
    w.bytes(&digest);
    w.0
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint, FormatError> {
    if buf.len() < 32 {
        return Err(FormatError::Malformed("file shorter than its checksum".into()));
    }
    let (body, sum) = buf.split_at(buf.len() - 32);
    let mut r = Reader::new(body, CHECKPOINT)?;
    if Sha256::digest(body).as_slice() != sum {
        return Err(FormatError::Checksum);
    }
    let n = r.u32()?;
    let meta = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| FormatError::Malformed(e.to_string()))?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| FormatError::Malformed(e.to_string()))?;
        let trainable = r.u8()? != 0;
        tensors.push(NamedTensor { name, trainable, value: r.tensor()? });
    }
    r.finish()?;
    Ok(Checkpoint { meta, tensors })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(io_err(path))
}

pub fn write_grid<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<(), FormatError> {
    write(path, &encode_grid(t))
}

pub fn read_grid(path: &Path) -> Result<Tensor<f32>, FormatError> {
    decode_grid(&read(path)?)
}

pub fn write_obs(path: &Path, o: &SuperObsGrid) -> Result<(), FormatError> {
    write(path, &encode_obs(o))
}

pub fn read_obs(path: &Path) -> Result<SuperObsGrid, FormatError> {
    decode_obs(&read(path)?)
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<(), FormatError> {
    write(path, &encode_checkpoint(c))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, FormatError> {
    decode_checkpoint(&read(path)?)
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
