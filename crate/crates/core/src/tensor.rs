//! Dense multilinear algebra.
//!
//! Tensors are stored row-major with mode 1 varying slowest, so the flat
//! buffer of a tensor is also its vectorization. Mode indices in the public
//! API are 1-based, matching the usual notation `X ×n M`.
//!
//! The mode-n unfolding places the mode-n fibers in the columns. An element
//! with (1-based) multi-index `(i_1, .., i_N)` lands in row `i_n` and column
//! `j = 1 + Σ_{k≠n} (i_k - 1) J_k` with `J_k = Π_{m<k, m≠n} I_m`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Order-N real array with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Row-major real matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return invalid("tensor order must be at least 1");
    }
    if shape.contains(&0) {
        return invalid(format!("tensor extents must be positive, got {shape:?}"));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if data.len() != len {
            return invalid(format!(
                "data length {} does not match shape {:?} (expected {len})",
                data.len(),
                shape
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
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

    /// Element at a 0-based multi-index.
    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &e)| acc * e + i)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|x| *x *= a);
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        axpy(&mut self.data, a, &other.data);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return invalid(format!("matrix extents must be positive, got {rows}x{cols}"));
        }
        if data.len() != rows * cols {
            return invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix extents must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix extents must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return invalid(format!(
                "matmul dimension mismatch: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                axpy(out_row, a, &other.data[k * other.cols..(k + 1) * other.cols]);
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return invalid(format!(
                "matvec dimension mismatch: {}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            ));
        }
        Ok(self.data.chunks_exact(self.cols).map(|row| dot(row, v)).collect())
    }

    pub fn is_identity(&self) -> bool {
        self.is_square()
            && (0..self.rows).all(|r| (0..self.cols).all(|c| self.get(r, c) == if r == c { 1.0 } else { 0.0 }))
    }

    pub fn is_symmetric(&self) -> bool {
        self.is_square() && (0..self.rows).all(|r| (0..r).all(|c| self.get(r, c) == self.get(c, r)))
    }
}

fn check_mode(order: usize, n: usize) -> Result<usize> {
    if n == 0 || n > order {
        return invalid(format!("mode {n} out of range for order-{order} tensor"));
    }
    Ok(n - 1)
}

/// Column multipliers `J_k` of the mode-`n` unfolding (0-based `n`).
fn unfold_multipliers(shape: &[usize], n: usize) -> Vec<usize> {
    let mut mult = vec![0; shape.len()];
    let mut acc = 1;
    for (k, &e) in shape.iter().enumerate() {
        if k == n {
            continue;
        }
        mult[k] = acc;
        acc *= e;
    }
    mult
}

/// Visits every 0-based multi-index of `shape` in row-major order together
/// with its flat offset.
fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize], usize)) {
    let mut index = vec![0usize; shape.len()];
    let len: usize = shape.iter().product();
    for flat in 0..len {
        f(&index, flat);
        for k in (0..shape.len()).rev() {
            index[k] += 1;
            if index[k] < shape[k] {
                break;
            }
            index[k] = 0;
        }
    }
}

/// Mode-`n` unfolding (1-based `n`).
pub fn unfold(t: &Tensor, n: usize) -> Result<Matrix> {
    let n0 = check_mode(t.order(), n)?;
    let rows = t.shape[n0];
    let cols = t.len() / rows;
    let mult = unfold_multipliers(&t.shape, n0);
    let mut out = Matrix::zeros(rows, cols);
    for_each_index(&t.shape, |idx, flat| {
        let j: usize = idx.iter().zip(&mult).map(|(&i, &m)| i * m).sum();
        out.data[idx[n0] * cols + j] = t.data[flat];
    });
    Ok(out)
}

/// Inverse of [`unfold`].
pub fn fold(m: &Matrix, n: usize, shape: &[usize]) -> Result<Tensor> {
    let len = check_shape(shape)?;
    let n0 = check_mode(shape.len(), n)?;
    if m.rows != shape[n0] || m.rows * m.cols != len {
        return invalid(format!(
            "cannot fold a {}x{} matrix at mode {n} into shape {shape:?}",
            m.rows, m.cols
        ));
    }
    let mult = unfold_multipliers(shape, n0);
    let mut data = vec![0.0; len];
    for_each_index(shape, |idx, flat| {
        let j: usize = idx.iter().zip(&mult).map(|(&i, &m)| i * m).sum();
        data[flat] = m.data[idx[n0] * m.cols + j];
    });
    Tensor::new(shape.to_vec(), data)
}

/// n-mode product `t ×n m` (1-based `n`): every mode-n fiber `x` becomes `m x`.
pub fn mode_product(t: &Tensor, m: &Matrix, n: usize) -> Result<Tensor> {
    let n0 = check_mode(t.order(), n)?;
    let extent = t.shape[n0];
    if m.cols != extent {
        return invalid(format!(
            "mode-{n} product needs a matrix with {extent} columns, got {}x{}",
            m.rows, m.cols
        ));
    }
    let outer: usize = t.shape[..n0].iter().product();
    let inner: usize = t.shape[n0 + 1..].iter().product();
    let mut shape = t.shape.clone();
    shape[n0] = m.rows;
    let mut data = vec![0.0; outer * m.rows * inner];
    for o in 0..outer {
        let src = &t.data[o * extent * inner..(o + 1) * extent * inner];
        let dst = &mut data[o * m.rows * inner..(o + 1) * m.rows * inner];
        if inner == 1 {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = dot(&m.data[j * m.cols..(j + 1) * m.cols], src);
            }
            continue;
        }
        for j in 0..m.rows {
            let dst_row = &mut dst[j * inner..(j + 1) * inner];
            for i in 0..extent {
                let a = m.data[j * m.cols + i];
                if a == 0.0 {
                    continue;
                }
                axpy(dst_row, a, &src[i * inner..(i + 1) * inner]);
            }
        }
    }
    Ok(Tensor { shape, data })
}

/// Kronecker product: block `(p, q)` of the result is `a[p, q] * b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let rows = a.rows * b.rows;
    let cols = a.cols * b.cols;
    let mut out = Matrix::zeros(rows, cols);
    for p in 0..a.rows {
        for q in 0..a.cols {
            let s = a.get(p, q);
            for r in 0..b.rows {
                for c in 0..b.cols {
                    out.data[(p * b.rows + r) * cols + q * b.cols + c] = s * b.get(r, c);
                }
            }
        }
    }
    out
}

/// Vectorization, lexicographic with mode 1 most significant.
pub fn vectorize(t: &Tensor) -> Vec<f64> {
    t.data.clone()
}

pub fn devectorize(v: &[f64], shape: &[usize]) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), v.to_vec())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Normwise relative error `‖a - b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error: length mismatch");
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm2(a).max(norm2(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
