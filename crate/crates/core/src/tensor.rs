use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with shape metadata.
///
/// Batched image data is laid out `(batch, channel, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {expected} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent (batch size for batched tensors).
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Number of values per leading-axis entry.
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.sample_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Gathers the given leading-axis entries into a new tensor.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    /// Concatenates along the leading axis. All parts must share trailing extents.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut batch = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::invalid(format!(
                    "concat: trailing shape {:?} differs from {tail:?}",
                    &p.shape[1..]
                )));
            }
            batch += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Ok(Tensor { shape, data })
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bit-identical comparison (distinguishes -0.0 from 0.0, equal NaN payloads).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn write_le_bytes(&self, out: &mut Vec<u8>) {
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Index of the largest value of each leading-axis row (first wins on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.batch())
            .map(|i| {
                let row = self.sample(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// SHA-256 over the little-endian bit patterns of a sequence of tensors.
pub fn digest_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut hasher = Sha256::new();
    for t in tensors {
        for d in &t.shape {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in &t.data {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}
