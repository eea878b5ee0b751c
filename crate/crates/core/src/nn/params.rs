//! Named parameter tensors and the binary checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   b"SPFLCKPT"
//! version u32
//! meta    u32 length + UTF-8 bytes (free-form JSON written by the owner)
//! count   u32
//! repeat count times:
//!   name  u32 length + UTF-8 bytes
//!   rows  u64
//!   cols  u64
//!   data  rows*cols f64 (IEEE-754 bit patterns)
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::mat::Mat;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SPFLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Mat>,
    lookup: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its slot.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let idx = self.tensors.len();
        self.lookup.insert(name.clone(), idx);
        self.names.push(name);
        self.tensors.push(value);
        idx
    }

    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> usize {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.add(name, Mat::from_vec(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Mat {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Mat {
        &mut self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.tensors
            .iter()
            .map(|t| Mat::zeros(t.rows, t.cols))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }

    /// Flat view used by finite-difference checks.
    pub fn scalar(&self, flat: usize) -> f64 {
        let (t, i) = self.locate(flat);
        self.tensors[t].data[i]
    }

    pub fn set_scalar(&mut self, flat: usize, value: f64) {
        let (t, i) = self.locate(flat);
        self.tensors[t].data[i] = value;
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (t, m) in self.tensors.iter().enumerate() {
            if flat < m.len() {
                return (t, flat);
            }
            flat -= m.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W, meta: &str) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_str(&mut w, meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            write_str(&mut w, name)?;
            w.write_all(&(t.rows as u64).to_le_bytes())?;
            w.write_all(&(t.cols as u64).to_le_bytes())?;
            for v in &t.data {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Returns the parameter set together with the stored metadata string.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, String)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta = read_str(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint("tensor shape overflow".into()))?;
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_bits(u64::from_le_bytes(buf)));
            }
            if set.index_of(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            set.add(name, Mat::from_vec(rows, cols, data));
        }
        Ok((set, meta))
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("tensor names differ from model layout".into()));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint("tensor shapes differ from model layout".into()));
            }
        }
        Ok(())
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            values in proptest::collection::vec(proptest::num::f64::ANY, 1..40),
            cols in 1usize..5,
        ) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let mut set = ParamSet::new();
            set.add("w", Mat::from_vec(rows, cols, values[..rows * cols].to_vec()));
            set.add("b", Mat::row_vector(vec![-0.0, f64::MIN_POSITIVE]));
            let mut buf = Vec::new();
            set.write_checkpoint(&mut buf, "{\"k\":1}").unwrap();
            let (back, meta) = ParamSet::read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(meta, "{\"k\":1}");
            prop_assert_eq!(back.len(), 2);
            for (a, b) in set.tensors().iter().zip(back.tensors()) {
                prop_assert_eq!(a.shape(), b.shape());
                let bits_a: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        assert!(ParamSet::read_checkpoint(&b"NOTACKPT"[..]).is_err());
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            ParamSet::read_checkpoint(&buf[..]),
            Err(Error::Checkpoint(_))
        ));
    }
}
