//! Dense `f64` tensors with a reverse-mode tape.
//!
//! [`Tensor`] is a plain value. [`Graph`] records operations on tensors and
//! parameters borrowed from a [`ParamStore`]; [`Graph::backward`] produces
//! [`Grads`] laid out like the store, which the Adam optimizer consumes.

mod graph;
mod params;

pub use graph::{Graph, Var};
pub use params::{AdamConfig, Grads, ParamDoc, ParamId, ParamStore, StoreDoc};

use crate::error::{shape, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![x] }
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

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub(crate) fn require_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.is_matrix() {
            Ok((self.shape[0], self.shape[1]))
        } else {
            shape_err(format!("{what}: expected a matrix, got shape {:?}", self.shape))
        }
    }
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    shape(msg)
}

/// Softmax restricted to entries whose mask is `true`; masked entries come
/// out exactly zero.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return shape_err(format!("{} logits but {} mask entries", logits.len(), mask.len()));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Domain("no feasible action: every entry is masked".into()));
    }
    let mut out: Vec<f64> =
        logits.iter().zip(mask).map(|(&x, &m)| if m { (x - max).exp() } else { 0.0 }).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Arithmetic mean of the rows of a matrix.
pub fn mean_pool(rows: &Tensor) -> Result<Vec<f64>> {
    let (k, d) = rows.require_matrix("mean_pool")?;
    if k == 0 {
        return Err(Error::Domain("mean_pool over an empty set".into()));
    }
    let mut out = vec![0.0; d];
    for r in 0..k {
        for (o, x) in out.iter_mut().zip(rows.row(r)) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= k as f64);
    Ok(out)
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}
