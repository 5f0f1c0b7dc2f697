//! Dense row-major `f64` tensors and the reverse-mode autodiff tape built on them.
//!
//! The operation set is deliberately small: matrix products (plain, batched and
//! left-broadcast), elementwise arithmetic, suffix-broadcast bias/gain, row
//! softmax, row layer-norm, concat, reshape/permute, row gather and full
//! reductions. Everything the forecasting model needs is expressed with these.

mod check;
mod tape;

pub use check::{finite_diff, max_relative_error, relative_error};
pub use tape::{Gradients, NodeKind, Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor from external data, rejecting length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::InvalidArgument {
                op: "tensor",
                msg: format!(
                    "shape {:?} needs {} values, got {}",
                    shape,
                    numel(&shape),
                    data.len()
                ),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor; callers guarantee `numel(shape) == data.len()`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Matrix from nested rows. Panics on ragged input; intended for fixtures.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged matrix rows");
        Self::from_parts(vec![r, c], rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn vector(values: &[f64]) -> Self {
        Self::from_parts(vec![values.len()], values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn suffix_check(&self, b: &Tensor, op: &'static str) -> Result<usize> {
        let r = b.rank();
        if r > self.rank() || self.shape[self.rank() - r..] != b.shape[..] || b.is_empty() {
            return Err(Error::shape(op, &self.shape, &b.shape));
        }
        Ok(b.len())
    }

    /// `self + b` where `b`'s shape is a trailing suffix of `self`'s shape
    /// (bias-row addition generalised to any number of leading axes).
    pub fn add_suffix(&self, b: &Tensor) -> Result<Tensor> {
        let inner = self.suffix_check(b, "add_suffix")?;
        let mut out = self.data.clone();
        for chunk in out.chunks_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(&b.data) {
                *o += v;
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// `self * b` with the same suffix-broadcast rule as [`Tensor::add_suffix`].
    pub fn mul_suffix(&self, b: &Tensor) -> Result<Tensor> {
        let inner = self.suffix_check(b, "mul_suffix")?;
        let mut out = self.data.clone();
        for chunk in out.chunks_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(&b.data) {
                *o *= v;
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidArgument {
                op: "permute",
                msg: format!("{axes:?} is not a permutation of the axes of {:?}", self.shape),
            });
        }
        let mut in_strides = vec![1; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * self.shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.len());
        if self.is_empty() {
            return Ok(Tensor::from_parts(out_shape, out));
        }
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        loop {
            out.push(self.data[offset]);
            // odometer increment over the output index
            let mut axis = rank;
            loop {
                if axis == 0 {
                    return Ok(Tensor::from_parts(out_shape, out));
                }
                axis -= 1;
                idx[axis] += 1;
                offset += strides[axis];
                if idx[axis] < out_shape[axis] {
                    break;
                }
                offset -= strides[axis] * idx[axis];
                idx[axis] = 0;
            }
        }
    }

    /// 2-D transpose.
    pub fn t(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument { op: "transpose", msg: format!("expected a matrix, got {:?}", self.shape) });
        }
        self.permute(&[1, 0])
    }

    /// Concatenates along `axis`; every other dimension must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::InvalidArgument { op: "concat", msg: "no parts".into() })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidArgument { op: "concat", msg: format!("axis {axis} out of range for {:?}", first.shape) });
        }
        for p in &parts[1..] {
            let ok = p.rank() == rank && (0..rank).all(|d| d == axis || p.shape[d] == first.shape[d]);
            if !ok {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor::from_parts(shape, out))
    }

    /// Inverse of [`Tensor::concat`]: splits along `axis` into pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if axis >= self.rank() || sizes.iter().sum::<usize>() != self.shape[axis] {
            return Err(Error::InvalidArgument {
                op: "split",
                msg: format!("sizes {sizes:?} do not partition axis {axis} of {:?}", self.shape),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let total = self.shape[axis] * inner;
        let mut pieces: Vec<Vec<f64>> = sizes.iter().map(|s| Vec::with_capacity(outer * s * inner)).collect();
        for o in 0..outer {
            let mut start = o * total;
            for (piece, &s) in pieces.iter_mut().zip(sizes) {
                piece.extend_from_slice(&self.data[start..start + s * inner]);
                start += s * inner;
            }
        }
        Ok(pieces
            .into_iter()
            .zip(sizes)
            .map(|(data, &s)| {
                let mut shape = self.shape.clone();
                shape[axis] = s;
                Tensor::from_parts(shape, data)
            })
            .collect())
    }

    /// Selects rows of a matrix (repetition allowed).
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument { op: "gather_rows", msg: format!("expected a matrix, got {:?}", self.shape) });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::InvalidArgument { op: "gather_rows", msg: format!("row {i} out of range for {r} rows") });
            }
            out.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(Tensor::from_parts(vec![rows.len(), c], out))
    }

    /// Softmax over the last axis, stabilised by subtracting each row's max.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let n = self.last_dim("softmax_rows")?;
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Per-row standardisation over the last axis (no gain/bias). Returns the
    /// normalised tensor and each row's `1/sqrt(var + eps)`.
    pub fn layer_norm_rows(&self, eps: f64) -> Result<(Tensor, Vec<f64>)> {
        let n = self.last_dim("layer_norm")?;
        let mut out = self.data.clone();
        let mut inv_std = Vec::with_capacity(self.len() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        Ok((Tensor::from_parts(self.shape.clone(), out), inv_std))
    }

    fn last_dim(&self, op: &'static str) -> Result<usize> {
        match self.shape.last() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(Error::InvalidArgument { op, msg: format!("needs a non-empty last axis, got {:?}", self.shape) }),
        }
    }

    /// Matrix product. Supported forms:
    /// `[.., m, k] x [k, n]` (rows of any leading shape), `[m, k] x [g, k, n]`
    /// (left operand shared across the batch) and `[g, m, k] x [g, k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let kind = MatmulKind::classify(&self.shape, &other.shape)?;
        let mut out = vec![0.0; numel(&kind.out_shape(&self.shape, &other.shape))];
        match kind {
            MatmulKind::Rows { m, k, n } => gemm(&self.data, &other.data, &mut out, m, k, n),
            MatmulKind::SharedLeft { g, m, k, n } => {
                for b in 0..g {
                    gemm(&self.data, &other.data[b * k * n..(b + 1) * k * n], &mut out[b * m * n..(b + 1) * m * n], m, k, n);
                }
            }
            MatmulKind::Batched { g, m, k, n } => {
                for b in 0..g {
                    gemm(
                        &self.data[b * m * k..(b + 1) * m * k],
                        &other.data[b * k * n..(b + 1) * k * n],
                        &mut out[b * m * n..(b + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        Ok(Tensor::from_parts(kind.out_shape(&self.shape, &other.shape), out))
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum MatmulKind {
    Rows { m: usize, k: usize, n: usize },
    SharedLeft { g: usize, m: usize, k: usize, n: usize },
    Batched { g: usize, m: usize, k: usize, n: usize },
}

impl MatmulKind {
    pub(crate) fn classify(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || Error::shape("matmul", a, b);
        match (a.len(), b.len()) {
            (ra, 2) if ra >= 2 => {
                let k = a[ra - 1];
                if k != b[0] {
                    return Err(err());
                }
                Ok(MatmulKind::Rows { m: a[..ra - 1].iter().product(), k, n: b[1] })
            }
            (2, 3) => {
                if a[1] != b[1] {
                    return Err(err());
                }
                Ok(MatmulKind::SharedLeft { g: b[0], m: a[0], k: a[1], n: b[2] })
            }
            (3, 3) => {
                if a[0] != b[0] || a[2] != b[1] {
                    return Err(err());
                }
                Ok(MatmulKind::Batched { g: a[0], m: a[1], k: a[2], n: b[2] })
            }
            _ => Err(err()),
        }
    }

    pub(crate) fn out_shape(&self, a: &[usize], _b: &[usize]) -> Vec<usize> {
        match *self {
            MatmulKind::Rows { n, .. } => {
                let mut s = a[..a.len() - 1].to_vec();
                s.push(n);
                s
            }
            MatmulKind::SharedLeft { g, m, n, .. } | MatmulKind::Batched { g, m, n, .. } => vec![g, m, n],
        }
    }
}

/// `out += a[m×k] · b[k×n]`
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for l in 0..k {
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = a[l * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
