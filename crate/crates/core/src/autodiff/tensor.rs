use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor.
///
/// `grad` is filled in by [`crate::autodiff::Graph::backward`] consumers for
/// parameters that take part in training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    pub requires_grad: bool,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!("shape {shape:?} has a zero dimension")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = matmul_dims("matmul", self, other)?;
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        let mut out = self.data.clone();
        kernels::softmax_strided(&mut out, outer, len, inner);
        Tensor::new(self.shape.clone(), out)
    }
}

pub(crate) fn matmul_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok((a.shape[0], a.shape[1], b.shape[1]))
}

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Contract(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Plain loops over row-major buffers. Every reduction runs left to right.
pub(crate) mod kernels {
    /// out[m×n] += a[m×k] · b[k×n]
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &av) in a_row.iter().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }

    /// out[m×n] += a[m×k] · b[n×k]ᵀ
    pub fn matmul_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (x, y) in a_row.iter().zip(b_row) {
                    acc += x * y;
                }
                out[i * n + j] += acc;
            }
        }
    }

    /// out[k×n] += a[m×k]ᵀ · b[m×n]
    pub fn matmul_at(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for p in 0..m {
            let a_row = &a[p * k..(p + 1) * k];
            let b_row = &b[p * n..(p + 1) * n];
            for (i, &av) in a_row.iter().enumerate() {
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }

    pub fn softmax_strided(x: &mut [f64], outer: usize, len: usize, inner: usize) {
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(x[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (x[base + j * inner] - max).exp();
                    x[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    x[base + j * inner] /= sum;
                }
            }
        }
    }

    /// Stable log-softmax of a single vector.
    pub fn log_softmax(x: &[f64]) -> Vec<f64> {
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in x {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        x.iter().map(|v| v - lse).collect()
    }
}
