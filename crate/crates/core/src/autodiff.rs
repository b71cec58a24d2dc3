//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive in execution order; [`Tape::backward`]
//! walks the record in exact reverse order and returns gradients for every
//! leaf created with `requires_grad`. Gradients accumulate by plain summation
//! in recording order, so repeated runs are bitwise identical.

use std::collections::BTreeMap;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    Gather(Var, Vec<Vec<usize>>),
    SegmentSum(Var, Vec<usize>),
    Reshape(Var),
    Scatter(Var, Vec<Vec<usize>>),
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf that
/// the scalar depends on.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    /// Gradient for `var`, or zeros shaped like `like` when it was unreached.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.grads
            .get(&var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same-shape elementwise")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it takes part in differentiation iff the tensor has
    /// `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, rg, Op::Leaf)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = Tensor::new(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(out, rg, Op::Transpose(a)))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = tensor::add_row(self.value(x), self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, rg, Op::AddRow(x, bias)))
    }

    /// `x · wᵀ + b` with `w` stored as `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wt = self.transpose(w)?;
        let xw = self.matmul(x, wt)?;
        self.add_row(xw, b)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err(format!(
                "{what} of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let out = elementwise(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let out = elementwise(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let out = elementwise(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|v| scale * v + shift);
        let rg = self.rg(a);
        self.push(out, rg, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, rg, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::sigmoid);
        let rg = self.rg(a);
        self.push(out, rg, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(out, rg, Op::Log(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(out, rg, Op::Clamp(a, lo, hi))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        let rg = self.rg(a);
        self.push(out, rg, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(a);
        self.push(out, rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64);
        let rg = self.rg(a);
        self.push(out, rg, Op::Mean(a))
    }

    /// `[m × n] → [m]` row sums.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (m, _) = v.dims2();
        let out = Tensor::vector((0..m).map(|r| v.row(r).iter().sum()).collect());
        let rg = self.rg(a);
        self.push(out, rg, Op::SumRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let out = tensor::log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, rg, Op::LogSoftmaxRows(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = tensor::softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, rg, Op::SoftmaxRows(a))
    }

    /// Picks `index[r]` columns from row `r`: `[m × n] → [m × k]`.
    pub fn gather(&mut self, a: Var, index: Vec<Vec<usize>>) -> Result<Var> {
        let v = self.value(a);
        let (m, n) = v.dims2();
        if index.len() != m {
            return Err(dim_err(format!("gather index has {} rows, input {m}", index.len())));
        }
        let k = index.first().map_or(0, Vec::len);
        let mut out = Vec::with_capacity(m * k);
        for (r, cols) in index.iter().enumerate() {
            if cols.len() != k {
                return Err(dim_err("gather rows have unequal lengths".to_string()));
            }
            for &c in cols {
                if c >= n {
                    return Err(Error::Index(format!("column {c} of {n}")));
                }
                out.push(v.data()[r * n + c]);
            }
        }
        let out = Tensor::new(vec![m, k], out)?;
        let rg = self.rg(a);
        Ok(self.push(out, rg, Op::Gather(a, index)))
    }

    /// Sums entries of `a` into `segments` buckets: `out[seg[i]] += a[i]`.
    pub fn segment_sum(&mut self, a: Var, seg: Vec<usize>, segments: usize) -> Result<Var> {
        let v = self.value(a);
        if seg.len() != v.numel() {
            return Err(dim_err(format!(
                "segment ids {} for {} values",
                seg.len(),
                v.numel()
            )));
        }
        let mut out = vec![0.0; segments];
        for (&s, x) in seg.iter().zip(v.data()) {
            if s >= segments {
                return Err(Error::Index(format!("segment {s} of {segments}")));
            }
            out[s] += x;
        }
        let out = Tensor::new(vec![segments], out)?;
        let rg = self.rg(a);
        Ok(self.push(out, rg, Op::SegmentSum(a, seg)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    /// Builds a `[m × cols]` matrix with `a[r][i]` added at column
    /// `index[r][i]`. Used to turn per-sample weights into a mixing matrix.
    pub fn scatter(&mut self, a: Var, index: Vec<Vec<usize>>, cols: usize) -> Result<Var> {
        let v = self.value(a);
        let (m, k) = v.dims2();
        if index.len() != m || index.iter().any(|r| r.len() != k) {
            return Err(dim_err(format!("scatter index does not match {:?}", v.shape())));
        }
        let mut out = vec![0.0; m * cols];
        for (r, row) in index.iter().enumerate() {
            for (i, &c) in row.iter().enumerate() {
                if c >= cols {
                    return Err(Error::Index(format!("column {c} of {cols}")));
                }
                out[r * cols + c] += v.data()[r * k + i];
            }
        }
        let out = Tensor::new(vec![m, cols], out)?;
        let rg = self.rg(a);
        Ok(self.push(out, rg, Op::Scatter(a, index)))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if c != cols {
                return Err(dim_err(format!("concat of {cols} and {c} columns")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// `−log softmax(logits)[label]` for every row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let c = self.value(logits).dims2().1;
        if c < 2 {
            return Err(Error::Contract(format!("cross-entropy needs ≥ 2 classes, got {c}")));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index(format!("label {bad} with {c} classes")));
        }
        let logp = self.log_softmax_rows(logits);
        let picked = self.gather(logp, labels.iter().map(|&y| vec![y]).collect())?;
        let flat = self.reshape(picked, vec![labels.len()])?;
        Ok(self.scale(flat, -1.0))
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients::default());
        }
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        let mut out = BTreeMap::new();
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &self.nodes[idx];
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    out.insert(Var(idx), g);
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, tensor::matmul(g, &tensor::transpose(val(*b))?)?);
                }
                if self.rg(*b) {
                    send(*b, tensor::matmul(&tensor::transpose(val(*a))?, g)?);
                }
            }
            Op::Transpose(a) => send(*a, tensor::transpose(g)?),
            Op::AddRow(x, b) => {
                send(*x, g.clone());
                if self.rg(*b) {
                    let (m, n) = g.dims2();
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for (acc, v) in gb.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *acc += v;
                        }
                    }
                    send(*b, Tensor::new(val(*b).shape().to_vec(), gb)?);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(*a, elementwise(g, val(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    send(*b, elementwise(g, val(*a), |x, y| x * y));
                }
            }
            Op::Affine(a, c) => send(*a, g.map(|v| v * c)),
            Op::Tanh(a) => send(*a, elementwise(g, &node.value, |x, y| x * (1.0 - y * y))),
            Op::Sigmoid(a) => send(*a, elementwise(g, &node.value, |x, y| x * y * (1.0 - y))),
            Op::Log(a) => send(*a, elementwise(g, val(*a), |x, y| x / y)),
            Op::Clamp(a, lo, hi) => send(
                *a,
                elementwise(g, val(*a), |x, y| if y >= *lo && y <= *hi { x } else { 0.0 }),
            ),
            Op::Square(a) => send(*a, elementwise(g, val(*a), |x, y| 2.0 * x * y)),
            Op::Sum(a) => send(*a, val(*a).map(|_| g.item())),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                send(*a, val(*a).map(|_| g.item() / n));
            }
            Op::SumRows(a) => {
                let (m, n) = val(*a).dims2();
                let mut out = vec![0.0; m * n];
                for r in 0..m {
                    out[r * n..(r + 1) * n].fill(g.data()[r]);
                }
                send(*a, Tensor::new(val(*a).shape().to_vec(), out)?);
            }
            Op::LogSoftmaxRows(a) => {
                let (m, n) = g.dims2();
                let mut out = g.data().to_vec();
                for r in 0..m {
                    let gs: f64 = g.data()[r * n..(r + 1) * n].iter().sum();
                    for c in 0..n {
                        out[r * n + c] -= node.value.data()[r * n + c].exp() * gs;
                    }
                }
                send(*a, Tensor::new(g.shape().to_vec(), out)?);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = g.dims2();
                let y = node.value.data();
                let mut out = vec![0.0; m * n];
                for r in 0..m {
                    let row = r * n..(r + 1) * n;
                    let inner = tensor::dot(&g.data()[row.clone()], &y[row.clone()]);
                    for c in row {
                        out[c] = y[c] * (g.data()[c] - inner);
                    }
                }
                send(*a, Tensor::new(g.shape().to_vec(), out)?);
            }
            Op::Gather(a, index) => {
                let (_, n) = val(*a).dims2();
                let k = g.dims2().1;
                let mut out = Tensor::zeros(val(*a).shape());
                for (r, cols) in index.iter().enumerate() {
                    for (i, &c) in cols.iter().enumerate() {
                        out.data_mut()[r * n + c] += g.data()[r * k + i];
                    }
                }
                send(*a, out);
            }
            Op::SegmentSum(a, seg) => {
                let out = seg.iter().map(|&s| g.data()[s]).collect();
                send(*a, Tensor::new(val(*a).shape().to_vec(), out)?);
            }
            Op::Reshape(a) => send(*a, g.clone().reshape(val(*a).shape().to_vec())?),
            Op::Scatter(a, index) => {
                let cols = g.dims2().1;
                let mut out = Vec::with_capacity(val(*a).numel());
                for (r, row) in index.iter().enumerate() {
                    for &c in row {
                        out.push(g.data()[r * cols + c]);
                    }
                }
                send(*a, Tensor::new(val(*a).shape().to_vec(), out)?);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    let piece = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    send(p, Tensor::new(val(p).shape().to_vec(), piece)?);
                }
            }
        }
        Ok(())
    }
}
