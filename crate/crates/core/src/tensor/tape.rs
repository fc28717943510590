//! Define-by-run gradient tape.
//!
//! The tape is rebuilt every training step. Ops record themselves when any
//! input requires a gradient; [`Tape::backward`] replays the record in
//! reverse, accumulating into each reachable leaf exactly once.

use std::cell::{Cell, RefCell};

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    AddScalar(usize, f32),
    Sum(usize),
    Mean(usize),
    Sqrt(usize),
    Square(usize),
    Ln(usize),
    Relu(usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    RowSoftmax(usize, Option<Tensor>),
    // Forward-only; never carries a gradient (teacher-side use).
    Inverse(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    spent: Cell<bool>,
}

/// Per-node gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` was reachable and grad-enabled.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Clone of the forward value at `v`.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    // ---- recorded ops ---------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(out, self.rg(&[a.0, b.0]), Op::Matmul(a.0, b.0)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, self.rg(&[a.0]), Op::Transpose(a.0)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(&self.value(b))?;
        Ok(self.push(out, self.rg(&[a.0, b.0]), Op::Add(a.0, b.0)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(&self.value(b))?;
        Ok(self.push(out, self.rg(&[a.0, b.0]), Op::Sub(a.0, b.0)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(&self.value(b))?;
        Ok(self.push(out, self.rg(&[a.0, b.0]), Op::Mul(a.0, b.0)))
    }

    pub fn scale(&self, a: Var, s: f32) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, self.rg(&[a.0]), Op::Scale(a.0, s))
    }

    pub fn add_scalar(&self, a: Var, s: f32) -> Var {
        let out = self.value(a).add_scalar(s);
        self.push(out, self.rg(&[a.0]), Op::AddScalar(a.0, s))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = self.value(a).sum();
        self.push(out, self.rg(&[a.0]), Op::Sum(a.0))
    }

    pub fn mean(&self, a: Var) -> Var {
        let out = self.value(a).mean();
        self.push(out, self.rg(&[a.0]), Op::Mean(a.0))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let out = self.value(a).sqrt();
        self.push(out, self.rg(&[a.0]), Op::Sqrt(a.0))
    }

    pub fn square(&self, a: Var) -> Var {
        let out = self.value(a).square();
        self.push(out, self.rg(&[a.0]), Op::Square(a.0))
    }

    pub fn ln(&self, a: Var) -> Var {
        let out = self.value(a).ln();
        self.push(out, self.rg(&[a.0]), Op::Ln(a.0))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.push(out, self.rg(&[a.0]), Op::Relu(a.0))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, self.rg(&[a.0]), Op::Reshape(a.0)))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = values.iter().collect();
        let out = Tensor::concat_rows(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, rg, Op::ConcatRows(ids)))
    }

    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(a).gather_rows(indices)?;
        Ok(self.push(out, self.rg(&[a.0]), Op::GatherRows(a.0, indices.to_vec())))
    }

    /// Row softmax; masked (0) positions are excluded and output exactly 0.
    /// The mask is a constant, not a differentiable input.
    pub fn row_softmax(&self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let out = self.value(a).row_softmax(mask)?;
        Ok(self.push(out, self.rg(&[a.0]), Op::RowSoftmax(a.0, mask.cloned())))
    }

    /// Matrix inverse, forward-only. The output never requires a gradient;
    /// it exists for the stop-gradient teacher path.
    pub fn inverse(&self, a: Var) -> Result<Var> {
        let out = self.value(a).inverse()?;
        Ok(self.push(out, false, Op::Inverse(a.0)))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar loss. A tape can be consumed once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.spent.replace(true) {
            return Err(Error::contract(
                "backward already ran on this tape; rebuild the tape before differentiating again",
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                // Stop-gradient boundary: constants absorb nothing.
                drop(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let bt = nodes[*b].value.transpose()?;
                    let at = nodes[*a].value.transpose()?;
                    accumulate(&mut grads, *a, g.matmul(&bt)?)?;
                    accumulate(&mut grads, *b, at.matmul(&g)?)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()?)?,
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, g.mul(&nodes[*b].value)?)?;
                    accumulate(&mut grads, *b, g.mul(&nodes[*a].value)?)?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s))?,
                Op::AddScalar(a, _) => accumulate(&mut grads, *a, g)?,
                Op::Sum(a) => {
                    let parent = &nodes[*a].value;
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::full(parent.shape().to_vec(), g.item()),
                    )?;
                }
                Op::Mean(a) => {
                    let parent = &nodes[*a].value;
                    let v = g.item() / parent.numel() as f32;
                    accumulate(&mut grads, *a, Tensor::full(parent.shape().to_vec(), v))?;
                }
                Op::Sqrt(a) => {
                    // d sqrt(x) = 1 / (2 sqrt(x)); uses the forward output.
                    let half_inv = node.value.map(|y| 0.5 / y);
                    accumulate(&mut grads, *a, g.mul(&half_inv)?)?;
                }
                Op::Square(a) => {
                    let two_x = nodes[*a].value.scale(2.0);
                    accumulate(&mut grads, *a, g.mul(&two_x)?)?;
                }
                Op::Ln(a) => {
                    let inv = nodes[*a].value.map(|x| 1.0 / x);
                    accumulate(&mut grads, *a, g.mul(&inv)?)?;
                }
                Op::Relu(a) => {
                    let gate = nodes[*a].value.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, g.mul(&gate)?)?;
                }
                Op::Reshape(a) => {
                    let parent_shape = nodes[*a].value.shape().to_vec();
                    accumulate(&mut grads, *a, g.reshape(parent_shape)?)?;
                }
                Op::ConcatRows(parts) => {
                    let cols = g.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let rows = nodes[p].value.shape()[0];
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(&mut grads, p, Tensor::new(vec![rows, cols], slice)?)?;
                        offset += rows;
                    }
                }
                Op::GatherRows(a, indices) => {
                    let parent = &nodes[*a].value;
                    let cols = parent.shape()[1];
                    let mut acc = Tensor::zeros(parent.shape().to_vec());
                    for (row, &src) in indices.iter().enumerate() {
                        for c in 0..cols {
                            acc.data_mut()[src * cols + c] += g.data()[row * cols + c];
                        }
                    }
                    accumulate(&mut grads, *a, acc)?;
                }
                Op::RowSoftmax(a, _) => {
                    // dx = y * (g - sum_j(y_j g_j)) per row; masked entries have
                    // y == 0 and therefore contribute and receive nothing.
                    let y = &node.value;
                    let (r, c) = (y.shape()[0], y.shape()[1]);
                    let mut out = Tensor::zeros(vec![r, c]);
                    for i in 0..r {
                        let mut dot = 0.0f64;
                        for j in 0..c {
                            dot += y.data()[i * c + j] as f64 * g.data()[i * c + j] as f64;
                        }
                        for j in 0..c {
                            let yij = y.data()[i * c + j];
                            out.data_mut()[i * c + j] =
                                yij * (g.data()[i * c + j] - dot as f32);
                        }
                    }
                    accumulate(&mut grads, *a, out)?;
                }
                Op::Inverse(_) => unreachable!("inverse output never requires grad"),
            }
        }
        Ok(Gradients { grads })
    }
}

impl Tape {
    /// Re-evaluate the recorded graph in f64, with selected leaves replaced.
    ///
    /// Backs the finite-difference harness: the analytic path runs in f32,
    /// while the numeric oracle replays the same graph at f64 precision so
    /// central differences are not swamped by single-precision rounding.
    pub fn eval_f64(&self, out: Var, overrides: &[(Var, Vec<f64>)]) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(out.0 + 1);
        for id in 0..=out.0 {
            let node = &nodes[id];
            let shape = node.value.shape();
            let v: Vec<f64> = match &node.op {
                Op::Leaf => {
                    if let Some((_, data)) = overrides.iter().find(|(v, _)| v.0 == id) {
                        if data.len() != node.value.numel() {
                            return Err(Error::contract("eval_f64: override size mismatch"));
                        }
                        data.clone()
                    } else {
                        node.value.data().iter().map(|&x| x as f64).collect()
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                    let n = nodes[*b].value.shape()[1];
                    let (av, bv) = (&vals[*a], &vals[*b]);
                    let mut o = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for p in 0..k {
                                acc += av[i * k + p] * bv[p * n + j];
                            }
                            o[i * n + j] = acc;
                        }
                    }
                    o
                }
                Op::Transpose(a) => {
                    let (m, n) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                    let av = &vals[*a];
                    let mut o = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            o[j * m + i] = av[i * n + j];
                        }
                    }
                    o
                }
                Op::Add(a, b) => vals[*a].iter().zip(&vals[*b]).map(|(x, y)| x + y).collect(),
                Op::Sub(a, b) => vals[*a].iter().zip(&vals[*b]).map(|(x, y)| x - y).collect(),
                Op::Mul(a, b) => vals[*a].iter().zip(&vals[*b]).map(|(x, y)| x * y).collect(),
                Op::Scale(a, s) => vals[*a].iter().map(|x| x * *s as f64).collect(),
                Op::AddScalar(a, s) => vals[*a].iter().map(|x| x + *s as f64).collect(),
                Op::Sum(a) => vec![vals[*a].iter().sum()],
                Op::Mean(a) => vec![vals[*a].iter().sum::<f64>() / vals[*a].len() as f64],
                Op::Sqrt(a) => vals[*a].iter().map(|x| x.sqrt()).collect(),
                Op::Square(a) => vals[*a].iter().map(|x| x * x).collect(),
                Op::Ln(a) => vals[*a].iter().map(|x| x.ln()).collect(),
                Op::Relu(a) => vals[*a].iter().map(|x| x.max(0.0)).collect(),
                Op::Reshape(a) => vals[*a].clone(),
                Op::ConcatRows(parts) => {
                    parts.iter().flat_map(|&p| vals[p].iter().copied()).collect()
                }
                Op::GatherRows(a, indices) => {
                    let cols = nodes[*a].value.shape()[1];
                    let av = &vals[*a];
                    let mut o = Vec::with_capacity(indices.len() * cols);
                    for &i in indices {
                        o.extend_from_slice(&av[i * cols..(i + 1) * cols]);
                    }
                    o
                }
                Op::RowSoftmax(a, mask) => {
                    let (r, c) = (shape[0], shape[1]);
                    let av = &vals[*a];
                    let mut o = vec![0.0; r * c];
                    for i in 0..r {
                        let keep = |j: usize| {
                            mask.as_ref().map_or(true, |m| m.data()[i * c + j] != 0.0)
                        };
                        let mut max = f64::NEG_INFINITY;
                        for j in 0..c {
                            if keep(j) {
                                max = max.max(av[i * c + j]);
                            }
                        }
                        let mut denom = 0.0;
                        for j in 0..c {
                            if keep(j) {
                                denom += (av[i * c + j] - max).exp();
                            }
                        }
                        for j in 0..c {
                            if keep(j) {
                                o[i * c + j] = (av[i * c + j] - max).exp() / denom;
                            }
                        }
                    }
                    o
                }
                Op::Inverse(a) => {
                    let n = shape[0];
                    inverse_f64(&vals[*a], n)?
                }
            };
            vals.push(v);
        }
        let last = &vals[out.0];
        if last.len() != 1 {
            return Err(Error::contract("eval_f64: output is not scalar"));
        }
        Ok(last[0])
    }
}

fn inverse_f64(a: &[f64], n: usize) -> Result<Vec<f64>> {
    // Gauss-Jordan with partial pivoting on an augmented [A | I] system.
    let mut aug = vec![0.0f64; n * 2 * n];
    for i in 0..n {
        for j in 0..n {
            aug[i * 2 * n + j] = a[i * n + j];
        }
        aug[i * 2 * n + n + i] = 1.0;
    }
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if aug[row * 2 * n + col].abs() > aug[pivot * 2 * n + col].abs() {
                pivot = row;
            }
        }
        if aug[pivot * 2 * n + col].abs() < 1e-300 {
            return Err(Error::Singular {
                op: "inverse",
                cond: f64::INFINITY,
            });
        }
        if pivot != col {
            for j in 0..2 * n {
                aug.swap(col * 2 * n + j, pivot * 2 * n + j);
            }
        }
        let p = aug[col * 2 * n + col];
        for j in 0..2 * n {
            aug[col * 2 * n + j] /= p;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = aug[row * 2 * n + col];
            if f != 0.0 {
                for j in 0..2 * n {
                    aug[row * 2 * n + j] -= f * aug[col * 2 * n + j];
                }
            }
        }
    }
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = aug[i * 2 * n + n + j];
        }
    }
    Ok(out)
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) -> Result<()> {
    match &mut grads[id] {
        Some(existing) => {
            *existing = existing.add(&g)?;
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}
