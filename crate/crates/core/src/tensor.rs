//! Dense row-major tensors of `f64` and their binary file format.
//!
//! The on-disk format ("SDT1") is: magic `SDT1`, `u32` rank, `rank` `u64`
//! dims, then the payload as little-endian `f32` in row-major order. The
//! payload is deliberately single precision; in-memory values are `f64`.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// A dense tensor: a shape and a flat row-major `f64` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that the shape matches the buffer length and
    /// that every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DimensionMismatch {
                expected,
                actual: data.len(),
            });
        }
        if shape.contains(&0) {
            return Err(Error::InvalidArgument {
                reason: "tensor dimensions must be positive".into(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument {
                reason: "tensor entries must be finite".into(),
            });
        }
        Ok(Self { shape, data })
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor (e.g. an image) from a flat row-major buffer.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Total number of entries.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same buffer, different shape (must preserve length).
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::DimensionMismatch {
                expected,
                actual: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.len(), other.len(), "tensor length mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.len(), other.len(), "tensor length mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.dot_slice(other.data())
    }

    pub fn dot_slice(&self, other: &[f64]) -> f64 {
        assert_eq!(self.len(), other.len(), "tensor length mismatch");
        self.data.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    /// Squared Euclidean norm.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Write in the SDT1 binary format.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"SDT1")?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Read from the SDT1 binary format.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"SDT1" {
            return Err(Error::MalformedFile {
                what: "tensor file",
                reason: format!("bad magic {magic:?}, expected \"SDT1\""),
            });
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let rank = u32::from_le_bytes(buf4) as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::MalformedFile {
                what: "tensor file",
                reason: format!("unreasonable rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        let mut buf8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut buf8)?;
            shape.push(u64::from_le_bytes(buf8) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut buf4)?;
            data.push(f32::from_le_bytes(buf4) as f64);
        }
        Tensor::new(shape, data)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 6, actual: 5 }));
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn sdt1_roundtrip_is_exact_after_f32_cast() {
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, 7.5, -0.125]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SDT1");
        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        // These values are exactly representable in f32, so the trip is lossless.
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn sdt1_rejects_bad_magic() {
        let err = Tensor::read_from(&mut &b"XXXX\x01\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, Error::MalformedFile { .. }));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sdt1_roundtrip_preserves_f32_payload(values in proptest::collection::vec(-1e6f32..1e6f32, 1..64)) {
                let t = Tensor::from_vec(values.iter().map(|&v| v as f64).collect());
                let mut buf = Vec::new();
                t.write_to(&mut buf).unwrap();
                let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
                prop_assert_eq!(back.data(), t.data());
            }
        }
    }
}
