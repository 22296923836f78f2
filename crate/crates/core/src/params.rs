//! Named parameter tensors with paired gradient buffers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Mat,
    pub grad: Mat,
}

impl Param {
    fn new(value: Mat) -> Self {
        let grad = Mat::zeros(value.rows(), value.cols());
        Self { value, grad }
    }
}

/// Trainable tensors (each with a gradient buffer of the same shape) plus
/// non-trainable buffers such as batchnorm running statistics.
///
/// Both maps are ordered by name, so iteration and serialization order are
/// stable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Mat>,
}

const STORE_MAGIC: &[u8; 8] = b"NDPSTOR1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// A store holding a single trainable tensor.
    pub fn single(name: &str, value: Mat) -> Self {
        let mut s = Self::new();
        s.insert(name, value);
        s
    }

    pub fn insert(&mut self, name: &str, value: Mat) {
        self.params.insert(name.to_string(), Param::new(value));
    }

    pub fn insert_buffer(&mut self, name: &str, value: Mat) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Mat> {
        self.params.get(name).map(|p| &p.value).ok_or_else(|| missing(name))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Mat> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| missing(name))
    }

    pub fn grad(&self, name: &str) -> Result<&Mat> {
        self.params.get(name).map(|p| &p.grad).ok_or_else(|| missing(name))
    }

    pub fn grad_mut(&mut self, name: &str) -> Result<&mut Mat> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.grad)
            .ok_or_else(|| missing(name))
    }

    /// Adds `delta` into the gradient buffer of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Mat) -> Result<()> {
        self.grad_mut(name)?.add_assign(delta)
    }

    pub fn buffer(&self, name: &str) -> Result<&Mat> {
        self.buffers.get(name).ok_or_else(|| missing(name))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Mat> {
        self.buffers.get_mut(name).ok_or_else(|| missing(name))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.data().len()).sum()
    }

    /// Serializes parameter values and buffers (gradients are not stored).
    ///
    /// Layout, little-endian: magic, then for the parameter map and the
    /// buffer map in turn a `u32` count followed by entries of
    /// `u32 name_len | name | u32 rows | u32 cols | f64 × rows·cols`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        write_map(&mut out, self.params.iter().map(|(k, p)| (k, &p.value)));
        write_map(&mut out, self.buffers.iter());
        out
    }

    /// Inverse of [`ParamStore::to_bytes`]. Returns the store and the number
    /// of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(STORE_MAGIC.len())? != STORE_MAGIC {
            return Err(Error::Data("bad parameter store magic".into()));
        }
        let mut store = ParamStore::new();
        for (name, m) in read_map(&mut r)? {
            store.insert(&name, m);
        }
        for (name, m) in read_map(&mut r)? {
            store.insert_buffer(&name, m);
        }
        Ok((store, r.pos))
    }
}

fn missing(name: &str) -> Error {
    Error::Contract(format!("no tensor named `{name}`"))
}

fn write_map<'a>(out: &mut Vec<u8>, entries: impl ExactSizeIterator<Item = (&'a String, &'a Mat)>) {
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, m) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_map(r: &mut Reader<'_>) -> Result<Vec<(String, Mat)>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Data("tensor name is not utf-8".into()))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f64()?);
        }
        out.push((name, Mat::from_vec(rows, cols, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_buffers_match_param_shapes() {
        let mut s = ParamStore::new();
        s.insert("w", Mat::zeros(3, 4));
        s.insert("b", Mat::zeros(1, 4));
        for (_, p) in s.iter() {
            assert_eq!(p.value.shape(), p.grad.shape());
        }
        assert!(s.accumulate_grad("w", &Mat::zeros(4, 3)).is_err());
    }

    #[test]
    fn bytes_round_trip_is_exact() {
        let mut s = ParamStore::new();
        s.insert("a", Mat::from_rows(&[[0.1, -2.5e-300], [f64::MAX, -0.0]]).unwrap());
        s.insert_buffer("a.running_var", Mat::row_vector(&[1.0, 3.25]));
        let bytes = s.to_bytes();
        let (back, used) = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.value("a").unwrap().get(1, 1).to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncated_bytes_are_rejected() {
        let s = ParamStore::single("w", Mat::filled(2, 2, 1.0));
        let bytes = s.to_bytes();
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
