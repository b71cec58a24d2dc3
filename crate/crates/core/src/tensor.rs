//! Dense row-major `f64` tensors and the raw kernels shared by the tape and
//! by tape-free evaluation paths.
//!
//! Both paths call the same kernels so a forward pass recorded on a
//! [`Tape`](crate::autodiff::Tape) and a plain evaluation produce bitwise
//! identical values.

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(dim_err(format!("shape {shape:?} has a zero dimension")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len().max(1)],
            data: if data.is_empty() { vec![0.0] } else { data },
            requires_grad: false,
        }
    }

    /// Builds an `rows × cols` matrix. Panics if the value count is wrong;
    /// meant for literals and internal construction.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix literal has wrong length");
        Self {
            shape: vec![rows, cols],
            data,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// `(rows, cols)` when viewed as a matrix; vectors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let cols = *s.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(dim_err(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    /// In-place `self -= lr * grad`, refusing to leave non-finite values behind.
    pub fn sgd_step(&mut self, grad: &Tensor, lr: f64) -> Result<()> {
        if grad.numel() != self.numel() {
            return Err(dim_err(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                grad.shape, self.shape
            )));
        }
        let mut next = self.data.clone();
        for (p, g) in next.iter_mut().zip(&grad.data) {
            *p -= lr * g;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("update produced non-finite values".into()));
        }
        self.data = next;
        Ok(())
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(dim_err(format!(
            "matmul of {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor::matrix(m, n, out))
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 {
        return Err(dim_err(format!("transpose of {:?}", a.shape)));
    }
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Ok(Tensor::matrix(c, r, out))
}

/// `x[m×n] + bias[n]`, broadcasting the bias over rows.
pub fn add_row(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2();
    if bias.numel() != n {
        return Err(dim_err(format!(
            "row bias {:?} against {:?}",
            bias.shape, x.shape
        )));
    }
    let mut out = x.data.clone();
    for i in 0..m {
        for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
        requires_grad: false,
    })
}

/// Affine layer `x · wᵀ + b` with `w` stored as `[out × in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    add_row(&matmul(x, &transpose(w)?)?, b)
}

/// Row-wise `log softmax` with max subtraction.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = x.dims2();
    let mut out = x.data.clone();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
        requires_grad: false,
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = x.dims2();
    let mut out = x.data.clone();
    for i in 0..m {
        softmax_in_place(&mut out[i * n..(i + 1) * n]);
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
        requires_grad: false,
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Concatenates every tensor's data in order.
pub fn flatten_params(params: &[Tensor]) -> Vec<f64> {
    let total = params.iter().map(Tensor::numel).sum();
    let mut flat = Vec::with_capacity(total);
    for p in params {
        flat.extend_from_slice(&p.data);
    }
    flat
}

/// Inverse of [`flatten_params`] given the shapes to restore.
pub fn unflatten(flat: &[f64], shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if total != flat.len() {
        return Err(dim_err(format!(
            "flat vector has {} values but shapes need {total}",
            flat.len()
        )));
    }
    let mut offset = 0;
    shapes
        .iter()
        .map(|shape| {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.clone(), flat[offset..offset + n].to_vec());
            offset += n;
            t
        })
        .collect()
}
