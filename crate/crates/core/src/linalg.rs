//! Dense double-precision vectors and matrices with the differentiable
//! primitives the loss terms need: products, Euclidean distance, LU-based
//! inversion, and softmax cross-entropy.
//!
//! Everything here is a pure function on immutable inputs. Shape mismatches
//! are programming errors and panic with both shapes in the message;
//! singularity is data-driven and reported through [`Error::SingularMatrix`].

use crate::error::{Error, Result};

/// Pivot threshold below which LU factorization reports singularity.
pub const PIVOT_TOL: f64 = 1e-12;

/// Floor applied to distances inside gradient formulas so coincident points
/// yield a zero (sub)gradient instead of NaN.
pub const DIST_EPS: f64 = 1e-12;

/// A dense vector of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    pub data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn zeros(n: usize) -> Self {
        Vector { data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(
            self.len(),
            other.len(),
            "dot: length mismatch {} vs {}",
            self.len(),
            other.len()
        );
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector::new(self.data.iter().map(|x| x * s).collect())
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(
            self.len(),
            other.len(),
            "add: length mismatch {} vs {}",
            self.len(),
            other.len()
        );
        Vector::new(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(
            self.len(),
            other.len(),
            "sub: length mismatch {} vs {}",
            self.len(),
            other.len()
        );
        Vector::new(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    /// self += coeff * other
    pub fn axpy(&mut self, coeff: f64, other: &Vector) {
        assert_eq!(
            self.len(),
            other.len(),
            "axpy: length mismatch {} vs {}",
            self.len(),
            other.len()
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += coeff * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// A dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { data, rows, cols }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// self += coeff * u vᵀ (rank-one update; the workhorse of the
    /// hand-derived gradients).
    pub fn add_outer(&mut self, coeff: f64, u: &Vector, v: &Vector) {
        assert_eq!(
            (self.rows, self.cols),
            (u.len(), v.len()),
            "add_outer: shape {}x{} vs outer {}x{}",
            self.rows,
            self.cols,
            u.len(),
            v.len()
        );
        for r in 0..self.rows {
            let ur = coeff * u.data[r];
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (x, vc) in row.iter_mut().zip(&v.data) {
                *x += ur * vc;
            }
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Standard matrix-vector product.
pub fn matvec(m: &Matrix, v: &Vector) -> Vector {
    assert_eq!(
        m.cols,
        v.len(),
        "matvec: matrix {}x{} incompatible with vector of length {}",
        m.rows,
        m.cols,
        v.len()
    );
    let mut out = Vector::zeros(m.rows);
    for r in 0..m.rows {
        out.data[r] = m.row(r).iter().zip(&v.data).map(|(a, b)| a * b).sum();
    }
    out
}

/// Mᵀ v without materializing the transpose.
pub fn matvec_transpose(m: &Matrix, v: &Vector) -> Vector {
    assert_eq!(
        m.rows,
        v.len(),
        "matvec_transpose: matrix {}x{} incompatible with vector of length {}",
        m.rows,
        m.cols,
        v.len()
    );
    let mut out = Vector::zeros(m.cols);
    for r in 0..m.rows {
        let vr = v.data[r];
        for (o, a) in out.data.iter_mut().zip(m.row(r)) {
            *o += vr * a;
        }
    }
    out
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(
        a.cols, b.rows,
        "matmul: {}x{} incompatible with {}x{}",
        a.rows, a.cols, b.rows, b.cols
    );
    let mut out = Matrix::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        for k in 0..a.cols {
            let ark = a.get(r, k);
            if ark == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let orow = &mut out.data[r * b.cols..(r + 1) * b.cols];
            for (o, x) in orow.iter_mut().zip(brow) {
                *o += ark * x;
            }
        }
    }
    out
}

/// Matrix inverse via LU decomposition with partial pivoting.
///
/// Reports [`Error::SingularMatrix`] when a pivot falls below [`PIVOT_TOL`];
/// callers inverting a named attribute operator attach the name.
pub fn lu_invert(m: &Matrix) -> Result<Matrix> {
    assert_eq!(
        m.rows, m.cols,
        "lu_invert: matrix {}x{} is not square",
        m.rows, m.cols
    );
    let n = m.rows;
    let mut lu = m.clone();
    let mut perm: Vec<usize> = (0..n).collect();

    for k in 0..n {
        // partial pivoting: largest magnitude in column k at or below the diagonal
        let mut p = k;
        let mut best = lu.get(k, k).abs();
        for r in (k + 1)..n {
            let mag = lu.get(r, k).abs();
            if mag > best {
                best = mag;
                p = r;
            }
        }
        if best < PIVOT_TOL {
            return Err(Error::SingularMatrix { attribute: None });
        }
        if p != k {
            for c in 0..n {
                let tmp = lu.get(k, c);
                lu.set(k, c, lu.get(p, c));
                lu.set(p, c, tmp);
            }
            perm.swap(k, p);
        }
        let pivot = lu.get(k, k);
        for r in (k + 1)..n {
            let factor = lu.get(r, k) / pivot;
            lu.set(r, k, factor);
            for c in (k + 1)..n {
                lu.set(r, c, lu.get(r, c) - factor * lu.get(k, c));
            }
        }
    }

    // Solve for each column of the inverse: LU x = P e_j
    let mut inv = Matrix::zeros(n, n);
    let mut col = vec![0.0; n];
    for j in 0..n {
        for (i, c) in col.iter_mut().enumerate() {
            *c = if perm[i] == j { 1.0 } else { 0.0 };
        }
        // forward substitution (L has unit diagonal)
        for i in 1..n {
            let mut s = col[i];
            for k in 0..i {
                s -= lu.get(i, k) * col[k];
            }
            col[i] = s;
        }
        // back substitution
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in (i + 1)..n {
                s -= lu.get(i, k) * col[k];
            }
            col[i] = s / lu.get(i, i);
        }
        for i in 0..n {
            inv.set(i, j, col[i]);
        }
    }
    Ok(inv)
}

/// ℓ₂ distance between two equal-length vectors.
pub fn euclidean_distance(u: &Vector, v: &Vector) -> f64 {
    assert_eq!(
        u.len(),
        v.len(),
        "euclidean_distance: length mismatch {} vs {}",
        u.len(),
        v.len()
    );
    u.data
        .iter()
        .zip(&v.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Gradient of `euclidean_distance(u, v)` with respect to `u`: (u − v)/d.
///
/// Returns the zero vector when d < [`DIST_EPS`] (subgradient choice at the
/// coincident point).
pub fn distance_grad(u: &Vector, v: &Vector) -> Vector {
    let d = euclidean_distance(u, v);
    if d < DIST_EPS {
        return Vector::zeros(u.len());
    }
    u.sub(v).scale(1.0 / d)
}

/// Numerically stable softmax cross-entropy.
///
/// Returns `(−log softmax(logits)[label], softmax(logits) − onehot(label))`.
pub fn softmax_cross_entropy(logits: &Vector, label: usize) -> (f64, Vector) {
    assert!(
        label < logits.len(),
        "softmax_cross_entropy: label {} out of range for {} logits",
        label,
        logits.len()
    );
    let max = logits
        .data
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (logits.data[label] - max);
    let mut grad = Vector::new(exps.iter().map(|e| e / z).collect());
    grad.data[label] -= 1.0;
    (loss, grad)
}
