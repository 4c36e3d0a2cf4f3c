//! Named-tensor container used for body model files, dataset samples and
//! training checkpoints.
//!
//! Layout (little-endian): magic `CMRK`, version `u32`, tensor count `u32`,
//! then per tensor: name length `u16`, UTF-8 name, dtype tag `u8`
//! (0 = f64, 1 = f32, 2 = i64), rank `u8`, `rank` dims as `u64`, raw data.

use std::fs;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::meshgraph::SparseMatrix;

pub const MAGIC: &[u8; 4] = b"CMRK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I64(Vec<i64>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::F32(v) => v.len(),
            Payload::I64(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Payload::F64(_) => 0,
            Payload::F32(_) => 1,
            Payload::I64(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

/// Ordered collection of named tensors. Names are unique.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    /// Inserts or replaces an entry.
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, payload: Payload) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != payload.len() {
            return Err(Error::Format(format!("entry {name}: shape {shape:?} disagrees with data length")));
        }
        if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("entry {name}: name or rank too long")));
        }
        let entry = Entry { name, shape, payload };
        match self.entries.iter_mut().find(|e| e.name == entry.name) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
        Ok(())
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.insert(name, t.shape().to_vec(), Payload::F64(t.data().to_vec()))
            .expect("tensor shape is consistent");
    }

    pub fn put_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        self.insert(name, shape, Payload::F64(data))
    }

    pub fn put_i64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<i64>) -> Result<()> {
        self.insert(name, shape, Payload::I64(data))
    }

    /// Stores UTF-8 text as an i64 byte tensor.
    pub fn put_text(&mut self, name: impl Into<String>, text: &str) {
        let bytes: Vec<i64> = text.bytes().map(i64::from).collect();
        self.insert(name, vec![bytes.len()], Payload::I64(bytes)).expect("1-D shape");
    }

    pub fn put_sparse(&mut self, prefix: &str, m: &SparseMatrix) {
        let to_i64 = |v: &[usize]| v.iter().map(|&x| x as i64).collect::<Vec<_>>();
        self.put_i64(format!("{prefix}/shape"), vec![2], vec![m.rows() as i64, m.cols() as i64])
            .unwrap();
        self.put_i64(format!("{prefix}/offsets"), vec![m.rows() + 1], to_i64(m.offsets())).unwrap();
        self.put_i64(format!("{prefix}/indices"), vec![m.nnz()], to_i64(m.indices())).unwrap();
        self.put_f64(format!("{prefix}/values"), vec![m.nnz()], m.values().to_vec()).unwrap();
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("missing entry {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.get(name)?;
        match &e.payload {
            Payload::F64(v) => Tensor::new(e.shape.clone(), v.clone()),
            Payload::F32(v) => Tensor::new(e.shape.clone(), v.iter().map(|&x| f64::from(x)).collect()),
            Payload::I64(_) => Err(Error::Format(format!("entry {name} is not floating point"))),
        }
    }

    pub fn i64s(&self, name: &str) -> Result<(Vec<usize>, Vec<i64>)> {
        let e = self.get(name)?;
        match &e.payload {
            Payload::I64(v) => Ok((e.shape.clone(), v.clone())),
            _ => Err(Error::Format(format!("entry {name} is not an integer tensor"))),
        }
    }

    pub fn usizes(&self, name: &str) -> Result<Vec<usize>> {
        self.i64s(name)?
            .1
            .into_iter()
            .map(|v| usize::try_from(v).map_err(|_| Error::Format(format!("negative index in {name}"))))
            .collect()
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let bytes = self
            .i64s(name)?
            .1
            .into_iter()
            .map(|b| u8::try_from(b).map_err(|_| Error::Format(format!("entry {name} is not text"))))
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|_| Error::Format(format!("entry {name} is not UTF-8")))
    }

    pub fn sparse(&self, prefix: &str) -> Result<SparseMatrix> {
        let shape = self.usizes(&format!("{prefix}/shape"))?;
        if shape.len() != 2 {
            return Err(Error::Format(format!("{prefix}/shape must have two entries")));
        }
        SparseMatrix::from_csr(
            shape[0],
            shape[1],
            self.usizes(&format!("{prefix}/offsets"))?,
            self.usizes(&format!("{prefix}/indices"))?,
            self.tensor(&format!("{prefix}/values"))?.into_data(),
        )
        .map_err(|e| Error::Format(format!("{prefix}: {e}")))
    }

    /// Entries whose names start with `prefix/`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> Container {
        let p = format!("{prefix}/");
        Container {
            entries: self
                .entries
                .iter()
                .filter_map(|e| {
                    e.name.strip_prefix(&p).map(|rest| Entry { name: rest.to_string(), ..e.clone() })
                })
                .collect(),
        }
    }

    /// Adds every entry of `other` under `prefix/`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &Container) {
        for e in &other.entries {
            self.insert(format!("{prefix}/{}", e.name), e.shape.clone(), e.payload.clone())
                .expect("entry already validated");
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.payload.tag());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.payload {
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic bytes {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let count = r.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| Error::Format(format!("tensor {i} name is not UTF-8")))?;
            let tag = r.take(1, "dtype")?[0];
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.take(8, "dims")?.try_into().unwrap());
                shape.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let payload = match tag {
                0 => Payload::F64(
                    r.take_elems(len, 8, &name)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => Payload::F32(
                    r.take_elems(len, 4, &name)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => Payload::I64(
                    r.take_elems(len, 8, &name)?
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                t => return Err(Error::Format(format!("tensor {name} has unknown dtype tag {t}"))),
            };
            entries.push(Entry { name, shape, payload });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Container { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_elems(&mut self, count: usize, width: usize, name: &str) -> Result<&'a [u8]> {
        let n = count
            .checked_mul(width)
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        self.take(n, name)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
