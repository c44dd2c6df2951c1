//! Binary tensor container shared by checkpoints, feature files and corpora.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "DCTC"
//! version  u32      1
//! meta_len u32      length of the UTF-8 metadata section that follows
//! meta     bytes    structured text (JSON) describing the producer's config
//! count    u32      number of tensors
//! per tensor:
//!   name_len u16, name bytes (UTF-8)
//!   dtype    u8     0 = f32, 1 = u32
//!   ndim     u8
//!   dims     u32 x ndim
//!   payload  4 bytes x prod(dims), little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"DCTC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn f32_matrix<A: Scalar>(name: impl Into<String>, m: &Array2<A>) -> Self {
        Self { name: name.into(), shape: vec![m.nrows(), m.ncols()], data: TensorData::F32(m.iter().map(|v| v.as_f64() as f32).collect()) }
    }

    pub fn u32_vec(name: impl Into<String>, v: &[u32]) -> Self {
        Self { name: name.into(), shape: vec![v.len()], data: TensorData::U32(v.to_vec()) }
    }

    pub fn to_matrix<A: Scalar>(&self) -> Result<Array2<A>> {
        let TensorData::F32(data) = &self.data else {
            return Err(Error::Format(format!("{} is not f32", self.name)));
        };
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => return Err(Error::Format(format!("{} is not 2-D", self.name))),
        };
        Array2::from_shape_vec((r, c), data.iter().map(|&v| A::lit(v as f64)).collect()).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn as_u32(&self) -> Result<&[u32]> {
        match &self.data {
            TensorData::U32(v) => Ok(v),
            TensorData::F32(_) => Err(Error::Format(format!("{} is not u32", self.name))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub meta: String,
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn new(meta: impl Into<String>) -> Self {
        Self { meta: meta.into(), tensors: Vec::new() }
    }

    pub fn push(&mut self, t: NamedTensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Appends every parameter under `prefix`.
    pub fn push_params<A: Scalar>(&mut self, prefix: &str, store: &ParamStore<A>) {
        for (name, v) in store.iter() {
            self.push(NamedTensor::f32_matrix(format!("{prefix}{name}"), v));
        }
    }

    /// Overwrites every parameter of `store` from tensors named `prefix + name`.
    pub fn load_params<A: Scalar>(&self, prefix: &str, store: &mut ParamStore<A>) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = self.get(&format!("{prefix}{name}"))?;
            let m = t.to_matrix::<A>()?;
            let id = store.id(&name).expect("own name");
            let slot = store.get_mut(id);
            if slot.dim() != m.dim() {
                return Err(Error::Format(format!("shape mismatch for {name}: {:?} vs {:?}", slot.dim(), m.dim())));
            }
            *slot = m;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = self.meta.as_bytes();
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            if name.len() > u16::MAX as usize || t.shape.len() > u8::MAX as usize {
                return Err(Error::Format(format!("tensor {} header too large", t.name)));
            }
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            let count: usize = t.shape.iter().product();
            let dtype = match &t.data {
                TensorData::F32(v) => {
                    check_len(&t.name, v.len(), count)?;
                    0u8
                }
                TensorData::U32(v) => {
                    check_len(&t.name, v.len(), count)?;
                    1u8
                }
            };
            w.write_all(&[dtype, t.shape.len() as u8])?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            match &t.data {
                TensorData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                TensorData::U32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta = String::from_utf8(meta).map_err(|e| Error::Format(e.to_string()))?;
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let mut hdr = [0u8; 2];
            r.read_exact(&mut hdr)?;
            let shape = (0..hdr[1]).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match hdr[0] {
                0 => TensorData::F32((0..n).map(|_| read_u32(&mut r).map(f32::from_bits)).collect::<Result<_>>()?),
                1 => TensorData::U32((0..n).map(|_| read_u32(&mut r)).collect::<Result<_>>()?),
                d => return Err(Error::Format(format!("unknown dtype {d} for {name}"))),
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Self { meta, tensors })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("in-memory write");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn check_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Format(format!("{name}: payload {got} != shape product {want}")));
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_stable() {
        let mut f = TensorFile::new("{}");
        f.push(NamedTensor::u32_vec("c", &[7]));
        let b = f.to_bytes();
        assert_eq!(&b[..4], b"DCTC");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..14], b"{}");
        assert_eq!(&b[14..18], &1u32.to_le_bytes());
        assert_eq!(&b[18..20], &1u16.to_le_bytes());
        assert_eq!(b[20], b'c');
        assert_eq!(&b[21..23], &[1, 1]);
        assert_eq!(&b[23..27], &1u32.to_le_bytes());
        assert_eq!(&b[27..31], &7u32.to_le_bytes());
        assert_eq!(b.len(), 31);
    }

    #[test]
    fn rejects_bad_magic() {
        let err = TensorFile::read_from(&b"NOPE\x01\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    proptest! {
        #[test]
        fn roundtrip(vals in prop::collection::vec(-1e6f32..1e6, 0..40), codes in prop::collection::vec(0u32..9000, 0..20), meta in "[a-z{}\":, ]{0,30}") {
            let mut f = TensorFile::new(meta);
            f.push(NamedTensor { name: "x".into(), shape: vec![vals.len()], data: TensorData::F32(vals) });
            f.push(NamedTensor::u32_vec("codes", &codes));
            let back = TensorFile::read_from(f.to_bytes().as_slice()).unwrap();
            prop_assert_eq!(back, f);
        }
    }
}
