//! Reverse-mode differentiation over a linear record of tensor ops.
//!
//! Nodes are appended in evaluation order, so walking the record backwards
//! visits every node after all of its consumers.

use std::collections::BTreeMap;

use crate::error::{MtlError, Result};

use super::tensor::{self, matmul, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x[m×n] + b[n]` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// Elementwise product with a fixed multiplier (dropout masks).
    MaskMul {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Mean(Vec<Var>),
    LinComb(Vec<(Var, f64)>),
    FrobSqDist(Var, Var),
    /// Scalar function of one tensor whose gradient was computed alongside
    /// its value.
    ScalarFn {
        x: Var,
        grad: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Counters for instrumentation of forward work.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TapeStats {
    /// Ops recorded inside encoder forward passes.
    pub encoder_ops: usize,
    pub encoder_passes: usize,
}

/// Record of ops built during a forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    pub stats: TapeStats,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A named trainable leaf; its gradient is reported by name.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    /// An anonymous leaf, optionally differentiable.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let g = self.any_grad(&[a]);
        self.push(out, Op::Transpose(a), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let (m, n) = xv.dims2();
        if bv.len() != n {
            return Err(MtlError::Dimension {
                op: "add_row",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for i in 0..m {
            for (o, &bj) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(bv.data()) {
                *o += bj;
            }
        }
        let g = self.any_grad(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let g = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = tensor::relu(self.value(a));
        let g = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = tensor::sigmoid(self.value(a));
        let g = self.any_grad(&[a]);
        self.push(out, Op::Sigmoid(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let g = self.any_grad(&[a]);
        self.push(out, Op::Tanh(a), g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = tensor::softmax_rows(self.value(a));
        let g = self.any_grad(&[a]);
        self.push(out, Op::SoftmaxRows(a), g)
    }

    /// Per-row normalization to zero mean and unit variance, then an
    /// elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        let gv = self.value(gain);
        let bv = self.value(bias);
        if gv.len() != n || bv.len() != n {
            return Err(MtlError::Dimension {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = Tensor::zeros(xv.shape());
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out.data_mut()[i * n + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let g = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    /// Row lookup `table[ids]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, n) = tv.dims2();
        if ids.is_empty() {
            return Err(MtlError::contract("gather with no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(MtlError::contract(format!(
                    "id {id} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), n], data)?;
        let g = self.any_grad(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, g))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, len)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        let g = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals)?;
        let g = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Elementwise product with a constant multiplier of the same length.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(MtlError::Dimension {
                op: "mask_mul",
                left: xv.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let mut out = xv.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaskMul { x, mask }, g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let g = self.any_grad(&[a]);
        self.push(out, Op::Sum(a), g)
    }

    /// Arithmetic mean of scalar nodes.
    pub fn mean(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(MtlError::contract("mean of an empty list"));
        }
        let total: f64 = items.iter().map(|&v| self.scalar_of(v)).sum::<Result<f64>>()?;
        let out = Tensor::scalar(total / items.len() as f64);
        let g = self.any_grad(items);
        Ok(self.push(out, Op::Mean(items.to_vec()), g))
    }

    /// `Σ cᵢ·xᵢ` over scalar nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            total += c * self.scalar_of(v)?;
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let g = self.any_grad(&vars);
        Ok(self.push(Tensor::scalar(total), Op::LinComb(terms.to_vec()), g))
    }

    pub fn frobenius_sq_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = tensor::frobenius_sq_distance(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(d), Op::FrobSqDist(a, b), g))
    }

    /// Records a scalar function `f(x)` whose value and gradient with respect
    /// to `x` are supplied by the caller.
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        self.value(x).expect_same_shape(&grad, "scalar_fn")?;
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { x, grad }, g))
    }

    fn scalar_of(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        if !t.is_scalar() {
            return Err(MtlError::contract(format!(
                "expected a scalar node, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.item())
    }

    /// Propagates adjoints from the scalar `loss` back to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(MtlError::contract(format!(
                "backward seed must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let acc = |v: Var, g: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let ga = matmul(dy, &self.value(*b).transpose())?;
                    acc(*a, ga, grads);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = matmul(&self.value(*a).transpose(), dy)?;
                    acc(*b, gb, grads);
                }
            }
            Op::Transpose(a) => acc(*a, dy.transpose(), grads),
            Op::Add(a, b) => {
                acc(*a, dy.clone(), grads);
                acc(*b, dy.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone(), grads);
                acc(*b, dy.scale(-1.0), grads);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, dy.zip_map(bv, "mul", |g, y| g * y)?, grads);
                acc(*b, dy.zip_map(av, "mul", |g, x| g * x)?, grads);
            }
            Op::AddRow(x, b) => {
                acc(*x, dy.clone(), grads);
                let (m, n) = dy.dims2();
                let mut gb = Tensor::zeros(self.value(*b).shape());
                for i in 0..m {
                    for (o, &g) in gb.data_mut().iter_mut().zip(&dy.data()[i * n..(i + 1) * n]) {
                        *o += g;
                    }
                }
                acc(*b, gb, grads);
            }
            Op::Scale(a, s) => acc(*a, dy.scale(*s), grads),
            Op::Relu(a) => {
                let g = dy.zip_map(self.value(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?;
                acc(*a, g, grads);
            }
            Op::Sigmoid(a) => {
                let g = dy.zip_map(&node.value, "sigmoid", |g, y| g * y * (1.0 - y))?;
                acc(*a, g, grads);
            }
            Op::Tanh(a) => {
                let g = dy.zip_map(&node.value, "tanh", |g, y| g * (1.0 - y * y))?;
                acc(*a, g, grads);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = dy.dims2();
                let y = &node.value;
                let mut g = Tensor::zeros(dy.shape());
                for i in 0..m {
                    let yr = y.row(i);
                    let dr = dy.row(i);
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        g.data_mut()[i * n + j] = yr[j] * (dr[j] - dot);
                    }
                }
                acc(*a, g, grads);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = dy.dims2();
                let gv = self.value(*gain);
                let mut dgain = Tensor::zeros(gv.shape());
                let mut dbias = Tensor::zeros(gv.shape());
                let mut dx = Tensor::zeros(dy.shape());
                for i in 0..m {
                    let dr = dy.row(i);
                    let hr = &xhat[i * n..(i + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..n {
                        dgain.data_mut()[j] += dr[j] * hr[j];
                        dbias.data_mut()[j] += dr[j];
                        let dh = dr[j] * gv.data()[j];
                        mean_d += dh;
                        mean_dh += dh * hr[j];
                    }
                    mean_d /= n as f64;
                    mean_dh /= n as f64;
                    for j in 0..n {
                        let dh = dr[j] * gv.data()[j];
                        dx.data_mut()[i * n + j] = inv_std[i] * (dh - mean_d - hr[j] * mean_dh);
                    }
                }
                acc(*x, dx, grads);
                acc(*gain, dgain, grads);
                acc(*bias, dbias, grads);
            }
            Op::Gather { table, ids } => {
                let mut gt = Tensor::zeros(self.value(*table).shape());
                let n = dy.dims2().1;
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &g) in gt.data_mut()[id * n..(id + 1) * n].iter_mut().zip(dy.row(r)) {
                        *o += g;
                    }
                }
                acc(*table, gt, grads);
            }
            Op::SliceRows { x, start } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let n = dy.dims2().1;
                gx.data_mut()[start * n..start * n + dy.len()].copy_from_slice(dy.data());
                acc(*x, gx, grads);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (m, n) = xv.dims2();
                let w = dy.dims2().1;
                let mut gx = Tensor::zeros(xv.shape());
                for i in 0..m {
                    gx.data_mut()[i * n + start..i * n + start + w].copy_from_slice(dy.row(i));
                }
                acc(*x, gx, grads);
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let rows = self.value(p).dims2().0;
                    let g = dy.slice_rows(row, rows)?.reshape(self.value(p).shape().to_vec())?;
                    acc(p, g, grads);
                    row += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let cols = self.value(p).dims2().1;
                    let g = dy.slice_cols(col, cols)?.reshape(self.value(p).shape().to_vec())?;
                    acc(p, g, grads);
                    col += cols;
                }
            }
            Op::MaskMul { x, mask } => {
                let mut g = dy.clone();
                for (o, m) in g.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                acc(*x, g, grads);
            }
            Op::Sum(a) => {
                let s = dy.item();
                acc(*a, Tensor::filled(self.value(*a).shape(), s), grads);
            }
            Op::Mean(items) => {
                let s = dy.item() / items.len() as f64;
                for &v in items {
                    acc(v, Tensor::filled(self.value(v).shape(), s), grads);
                }
            }
            Op::LinComb(terms) => {
                let s = dy.item();
                for &(v, c) in terms {
                    acc(v, Tensor::filled(self.value(v).shape(), s * c), grads);
                }
            }
            Op::FrobSqDist(a, b) => {
                let s = dy.item();
                let diff = self
                    .value(*a)
                    .zip_map(self.value(*b), "frobenius", |x, y| 2.0 * (x - y))?;
                acc(*a, diff.scale(s), grads);
                acc(*b, diff.scale(-s), grads);
            }
            Op::ScalarFn { x, grad } => acc(*x, grad.scale(dy.item()), grads),
        }
        Ok(())
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node; `None` when the node is off the loss path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a node, zero-filled when it is off the loss path.
    pub fn get_or_zero(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    /// Gradients of every named parameter on the tape.
    pub fn named(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        tape.params()
            .iter()
            .map(|(name, v)| (name.clone(), self.get_or_zero(tape, *v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap(), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::filled(&[2, 2], 1.0));
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let mut tape = Tape::new();
        let xv = Tensor::new(vec![3], vec![1.5, -0.5, 2.0]).unwrap();
        let x = tape.input(xv.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv.scale(2.0));
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(MtlError::Contract(_))));
    }

    #[test]
    fn params_off_path_get_zero() {
        let mut tape = Tape::new();
        let a = tape.param("a", Tensor::filled(&[2], 1.0));
        let _b = tape.param("b", Tensor::filled(&[3], 1.0));
        let s = tape.sum(a);
        let named = tape.backward(s).unwrap().named(&tape);
        assert_eq!(named["a"], Tensor::filled(&[2], 1.0));
        assert_eq!(named["b"], Tensor::zeros(&[3]));
    }

    #[test]
    fn shared_node_accumulates_once_per_use() {
        // loss = sum(x·x + x) → grad 2x + 1
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2], vec![2.0, -1.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0, -1.0]);
    }
}
