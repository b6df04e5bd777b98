//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order. [`Graph::backward`] walks the tape in reverse, so each
//! node's gradient is complete before it is propagated to its inputs.

use super::tensor::{axis_split, kernels, matmul_dims, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// sqrt(2/pi), the tanh-approximation GELU constant.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SelectRow {
        x: Var,
        row: usize,
    },
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Sum(Var),
    MaskedMse {
        a: Var,
        b: Var,
        mask: Option<Vec<f64>>,
        count: f64,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Vec<f64>,
        temperature: f64,
        scale: f64,
        probs: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of length `len` when it received none.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf honoring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.clone(), Op::Leaf, true)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims("matmul", self.value(a), self.value(b))?;
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Dimension {
                op: "matmul_bt",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_bt(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a vector of length `cols` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(bias).numel() != cols {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bd = self.data(bias);
        let out: Vec<f64> = self
            .data(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bd).map(|(x, b)| x + b))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Rows of a `[vocab × dim]` table selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::Contract(format!("gather table must be 2-D, got {shape:?}")));
        }
        let (rows, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!("gather index {bad} out of range {rows}")));
        }
        if ids.is_empty() {
            return Err(Error::Contract("gather with no indices".into()));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&td[i * dim..(i + 1) * dim]);
        }
        let t = Tensor::new(vec![ids.len(), dim], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || start + len > shape[1] || len == 0 {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} out of range for {shape:?}",
                start + len
            )));
        }
        let cols = shape[1];
        let out: Vec<f64> = self
            .data(x)
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let t = Tensor::new(vec![shape[0], len], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        if parts.iter().any(|&p| self.shape(p).len() != 2 || self.shape(p)[0] != rows) {
            return Err(Error::Contract("concat_cols parts must share row count".into()));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row `row` of a matrix, as a `[1 × cols]` matrix.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || row >= shape[0] {
            return Err(Error::Contract(format!("row {row} out of range for {shape:?}")));
        }
        let t = Tensor::new(vec![1, shape[1]], self.value(x).row(row).to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SelectRow { x, row }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x).softmax(axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes each row over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xd = self.data(x);
        let (gd, bd) = (self.data(gain), self.data(bias));
        let rows = xd.len() / n;
        let mut xhat = Vec::with_capacity(xd.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gd[j] + bd[j]);
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .data(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_CUBIC * v * v * v)).tanh()))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Tanh(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean squared difference over the elements where `mask` is 1.
    ///
    /// `mask`, when given, holds one 0/1 weight per element. A mask with no
    /// live elements yields 0.
    pub fn masked_mse(&mut self, a: Var, b: Var, mask: Option<Vec<f64>>) -> Result<Var> {
        self.same_shape("masked_mse", a, b)?;
        let (ad, bd) = (self.data(a), self.data(b));
        if let Some(m) = &mask {
            if m.len() != ad.len() {
                return Err(Error::Dimension {
                    op: "masked_mse",
                    lhs: self.shape(a).to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let mut acc = 0.0;
        let mut count = 0.0;
        for i in 0..ad.len() {
            let w = mask.as_ref().map_or(1.0, |m| m[i]);
            let d = ad[i] - bd[i];
            acc += w * d * d;
            count += w;
        }
        let value = if count > 0.0 { acc / count } else { 0.0 };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(value), Op::MaskedMse { a, b, mask, count }, rg))
    }

    /// `−scale · Σᵢ targetᵢ · log softmax(logits / T)ᵢ`.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &[f64], temperature: f64, scale: f64) -> Result<Var> {
        let z = self.data(logits);
        if z.len() != target.len() {
            return Err(Error::Dimension {
                op: "soft_cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![target.len()],
            });
        }
        if !(temperature > 0.0) {
            return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
        }
        let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
        let logp = kernels::log_softmax(&scaled);
        let mut value = 0.0;
        for (t, lp) in target.iter().zip(&logp) {
            if *t != 0.0 {
                value -= t * lp;
            }
        }
        let probs = logp.iter().map(|v| v.exp()).collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(scale * value),
            Op::SoftCrossEntropy {
                logits,
                target: target.to_vec(),
                temperature,
                scale,
                probs,
            },
            rg,
        ))
    }

    /// `Σ wᵢ·xᵢ` over same-shaped inputs, summed in the given order.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::Contract("weighted_sum of no terms".into()));
        };
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).numel()];
        for &(v, w) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "weighted_sum",
                    lhs: shape,
                    rhs: self.shape(v).to_vec(),
                });
            }
            for (o, x) in out.iter_mut().zip(self.data(v)) {
                *o += w * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::new(shape, out)?, Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                acc(*a, &mut |da| kernels::matmul_bt(g, self.data(*b), da, m, n, k));
                acc(*b, &mut |db| kernels::matmul_at(self.data(*a), g, db, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                acc(*a, &mut |da| kernels::matmul(g, self.data(*b), da, m, n, k));
                acc(*b, &mut |db| kernels::matmul_at(g, self.data(*a), db, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    let cols = d.len();
                    for row in g.chunks(cols) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(o, x)| *o += c * x)),
            Op::Gather { table, ids } => acc(*table, &mut |d| {
                let dim = g.len() / ids.len();
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut d[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                }
            }),
            Op::SliceCols { x, start } => {
                let cols = self.shape(*x)[1];
                let len = node.value.cols();
                acc(*x, &mut |d| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        add_into(&mut d[r * cols + start..r * cols + start + len], grow);
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    acc(*p, &mut |d| {
                        for (r, drow) in d.chunks_mut(w).enumerate() {
                            add_into(drow, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SelectRow { x, row } => {
                let cols = g.len();
                acc(*x, &mut |d| add_into(&mut d[row * cols..(row + 1) * cols], g));
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis).expect("checked in forward");
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += y[base + j * inner] * g[base + j * inner];
                            }
                            for j in 0..len {
                                let k = base + j * inner;
                                d[k] += y[k] * (g[k] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gd = self.data(*gain);
                let n = gd.len();
                acc(*gain, &mut |d| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for grow in g.chunks(n) {
                        add_into(d, grow);
                    }
                });
                acc(*x, &mut |d| {
                    let nf = n as f64;
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = grow[j] * gd[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        let drow = &mut d[r * n..(r + 1) * n];
                        for j in 0..n {
                            let dh = grow[j] * gd[j];
                            drow[j] += rstd[r] / nf * (nf * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        let v = xd[i];
                        let t = (GELU_C * (v + GELU_CUBIC * v * v * v)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_CUBIC * v * v);
                        d[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|o| *o += g[0])),
            Op::MaskedMse { a, b, mask, count } => {
                if *count == 0.0 {
                    return;
                }
                let (ad, bd) = (self.data(*a), self.data(*b));
                let c = 2.0 * g[0] / count;
                let w = |i: usize| mask.as_ref().map_or(1.0, |m| m[i]);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += c * w(i) * (ad[i] - bd[i]);
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] -= c * w(i) * (ad[i] - bd[i]);
                    }
                });
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                temperature,
                scale,
                probs,
            } => {
                let mass: f64 = target.iter().sum();
                let c = g[0] * scale / temperature;
                acc(*logits, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += c * (probs[i] * mass - target[i]);
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(o, x)| *o += w * x));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `f` with respect to every entry of `inputs[which]`.
    fn numeric_grad(inputs: &[Tensor], which: usize, f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> Vec<f64> {
        let h = 1e-4;
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t)).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };
        let mut out = Vec::new();
        for i in 0..inputs[which].numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            out.push((eval(&plus) - eval(&minus)) / (2.0 * h));
        }
        out
    }

    fn check(inputs: &[Tensor], tol: f64, f: &dyn Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        for (w, v) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(*v, inputs[w].numel());
            let numeric = numeric_grad(inputs, w, f);
            for (a, n) in analytic.iter().zip(&numeric) {
                let err = (a - n).abs();
                assert!(
                    err <= tol * a.abs().max(n.abs()) + 1e-9,
                    "input {w}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[5, 7]);
        let b = random(&mut rng, &[7, 3]);
        let w = random(&mut rng, &[5, 3]);
        // weighting the product keeps the loss from being a plain sum
        check(&[a, b, w], 1e-6, &|g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            let cw = g.mul(c, v[2]).unwrap();
            g.sum(cw)
        });
    }

    #[test]
    fn matmul_bt_and_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, &[4, 3]);
        let b = random(&mut rng, &[5, 3]);
        let w = random(&mut rng, &[4, 5]);
        for axis in 0..2 {
            check(&[a.clone(), b.clone(), w.clone()], 1e-6, &|g, v| {
                let s = g.matmul_bt(v[0], v[1]).unwrap();
                let p = g.softmax(s, axis).unwrap();
                let pw = g.mul(p, v[2]).unwrap();
                g.sum(pw)
            });
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[3, 6]);
        let gain = random(&mut rng, &[6]);
        let bias = random(&mut rng, &[6]);
        let w = random(&mut rng, &[3, 6]);
        check(&[x, gain, bias, w], 1e-5, &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-12).unwrap();
            let yw = g.mul(y, v[3]).unwrap();
            g.sum(yw)
        });
    }

    #[test]
    fn layer_norm_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![2.0, 2.0, 2.0]).unwrap());
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1.0]);
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[4, 6]);
        let bias = random(&mut rng, &[3]);
        let table = random(&mut rng, &[5, 4]);
        check(&[x, bias, table], 1e-6, &|g, v| {
            let gl = g.gelu(v[0]);
            let left = g.slice_cols(gl, 0, 3).unwrap();
            let right = g.slice_cols(v[0], 3, 3).unwrap();
            let t = g.tanh(right);
            let sum = g.add_row(t, v[1]).unwrap();
            let joined = g.concat_cols(&[sum, left]).unwrap();
            let rows = g.gather(v[2], &[1, 3, 1, 0]).unwrap();
            let r2 = g.concat_cols(&[rows, rows]).unwrap();
            let r2 = g.slice_cols(r2, 1, 6).unwrap();
            let prod = g.mul(joined, r2).unwrap();
            let first = g.select_row(prod, 2).unwrap();
            let diff = g.sub(prod, joined).unwrap();
            let s1 = g.sum(first);
            let s2 = g.sum(diff);
            let s3 = g.scale(s2, 0.3);
            g.weighted_sum(&[(s1, 1.5), (s3, -2.0)]).unwrap()
        });
    }

    #[test]
    fn loss_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[3, 4]);
        let logits = random(&mut rng, &[3]);
        let mask: Vec<f64> = (0..12).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 }).collect();
        check(&[a, b, logits], 1e-6, &|g, v| {
            let m = g.masked_mse(v[0], v[1], Some(mask.clone())).unwrap();
            let ce = g.soft_cross_entropy(v[2], &[0.2, 0.5, 0.3], 3.0, 9.0).unwrap();
            g.add(m, ce).unwrap()
        });
    }

    #[test]
    fn sum_gives_ones_and_zero_scale_gives_zeros() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::full(&[2, 3], 0.7));
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let p = g.param(&Tensor::full(&[2, 3], 0.7));
        let t = g.tanh(p);
        let s = g.sum(t);
        let z = g.scale(s, 0.0);
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[0.0; 6]);
    }

    #[test]
    fn reused_parameter_accumulates() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let a = g.sum(p);
        let b = g.sum(p);
        let tot = g.add(a, b).unwrap();
        let grads = g.backward(tot).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::zeros(&[2]));
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::full(&[2], 1.0));
        let c = g.constant(Tensor::full(&[2], 3.0));
        let m = g.mul(p, c).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[3.0, 3.0]);
        assert!(grads.get(c).is_none());
    }
}
