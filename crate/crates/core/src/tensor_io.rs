//! Versioned tensor container shared by codec and policy persistence.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  b"NRTC"
//! version    u32      currently 1
//! kind       4 bytes  b"CDEC" (codec) or b"PLCY" (policy)
//! n_ints     u32      then n_ints x u32 header integers
//! n_reals    u32      then n_reals x f32 header reals
//! n_tensors  u32      then, per tensor:
//!   name_len u16, name (UTF-8)
//!   ndim     u8, dims ndim x u32
//!   data     prod(dims) x f32, row-major
//! ```
//!
//! The meaning of the header integers and reals is fixed per kind and
//! documented next to each writer.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NRTC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: [u8; 4],
    pub ints: Vec<u32>,
    pub reals: Vec<f64>,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn new(kind: [u8; 4]) -> Self {
        Container { kind, ints: Vec::new(), reals: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: &[f64]) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor { name: name.into(), dims, data: data.to_vec() });
    }

    /// Takes tensors in declared order, checking names.
    pub fn reader(&self) -> TensorReader<'_> {
        TensorReader { tensors: &self.tensors, next: 0 }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_all(&self.kind)?;
        w.write_u32::<LittleEndian>(self.ints.len() as u32)?;
        for &v in &self.ints {
            w.write_u32::<LittleEndian>(v)?;
        }
        w.write_u32::<LittleEndian>(self.reals.len() as u32)?;
        for &v in &self.reals {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name)?;
            w.write_u8(t.dims.len() as u8)?;
            for &d in &t.dims {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in &t.data {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad tensor container magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let mut kind = [0u8; 4];
        r.read_exact(&mut kind)?;
        let n_ints = r.read_u32::<LittleEndian>()? as usize;
        let ints = (0..n_ints).map(|_| r.read_u32::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?;
        let n_reals = r.read_u32::<LittleEndian>()? as usize;
        let reals =
            (0..n_reals).map(|_| r.read_f32::<LittleEndian>().map(f64::from)).collect::<std::io::Result<Vec<_>>>()?;
        let n_tensors = r.read_u32::<LittleEndian>()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let len = r.read_u16::<LittleEndian>()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = r.read_u8()? as usize;
            let dims = (0..ndim)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            tensors.push(NamedTensor { name, dims, data: data.into_iter().map(f64::from).collect() });
        }
        Ok(Container { kind, ints, reals, tensors })
    }
}

pub struct TensorReader<'a> {
    tensors: &'a [NamedTensor],
    next: usize,
}

impl<'a> TensorReader<'a> {
    pub fn take(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
        let t = self.tensors.get(self.next).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if t.name != name || t.dims != dims {
            return Err(Error::Format(format!("expected tensor {name} {dims:?}, found {} {:?}", t.name, t.dims)));
        }
        self.next += 1;
        Ok(t.data.clone())
    }

    pub fn finish(self) -> Result<()> {
        if self.next != self.tensors.len() {
            return Err(Error::Format(format!("{} trailing tensors", self.tensors.len() - self.next)));
        }
        Ok(())
    }
}

/// Rounds through f32, matching what a save/load cycle produces.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_rounds_to_f32() {
        let mut c = Container::new(*b"TEST");
        c.ints = vec![3, 64];
        c.reals = vec![0.25];
        c.push("w", vec![2, 2], &[1.0, 0.1, -3.5, 1e-3]);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let back = Container::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.ints, c.ints);
        assert_eq!(back.tensors[0].data[1], round_f32(0.1));
        let mut r = back.reader();
        assert!(r.take("w", &[2, 2]).is_ok());
        r.finish().unwrap();
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"XXXX\x01\x00\x00\x00".to_vec();
        assert!(Container::read_from(&mut buf.as_slice()).is_err());
    }
}
