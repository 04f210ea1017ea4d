//! Dense row-major matrices and the decompositions the rest of the crate
//! is built on: SVD (one-sided Jacobi), Cholesky solves, covariance and
//! Gaussian kernel matrices.
//!
//! Rows are samples and columns are features everywhere in the crate.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense real matrix stored in row-major order: `data[i * cols + j]`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput {
                context: "matrix data",
                index,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for data produced by arithmetic on valid matrices.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a 0×0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("lhs cols = rhs rows ({})", self.cols),
                format!("rhs rows = {}", other.rows),
            ));
        }
        let n = other.cols;
        let mut out = Matrix::zeros(self.rows, n);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("equal row counts ({})", self.rows),
                format!("{}", other.rows),
            ));
        }
        let n = other.cols;
        let mut out = Matrix::zeros(self.cols, n);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("equal column counts ({})", self.cols),
                format!("{}", other.cols),
            ));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Entrywise ℓ1 norm.
    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn col_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (m, v) in means.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        let n = self.rows.max(1) as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    /// Subtracts the column means from every row.
    pub fn centered(&self) -> Matrix {
        let means = self.col_means();
        let mut out = self.clone();
        for i in 0..out.rows {
            for (v, m) in out.row_mut(i).iter_mut().zip(&means) {
                *v -= m;
            }
        }
        out
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(indices.len(), self.cols, data)
    }

    /// Stacks matrices with equal row counts side by side.
    pub fn hstack(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if let Some(b) = blocks.iter().find(|b| b.rows != rows) {
            return Err(Error::shape(
                "hstack",
                format!("{rows} rows"),
                format!("{} rows", b.rows),
            ));
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(blocks: &[&Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        if let Some(b) = blocks.iter().find(|b| b.cols != cols) {
            return Err(Error::shape(
                "vstack",
                format!("{cols} cols"),
                format!("{} cols", b.cols),
            ));
        }
        let mut data = Vec::new();
        for b in blocks {
            data.extend_from_slice(&b.data);
        }
        Ok(Matrix::from_raw(data.len() / cols.max(1), cols, data))
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        assert!(start + width <= self.cols, "column block out of range");
        Matrix::from_fn(self.rows, width, |i, j| self.get(i, start + j))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Thin SVD `A = U · diag(s) · Vt` with `k = min(m, n)` singular values.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// m×k. Columns paired with zero singular values are zero.
    pub u: Matrix,
    /// Non-negative, non-increasing.
    pub singular_values: Vec<f64>,
    /// k×n.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(&self.singular_values)
    }

    /// `U · diag(values) · Vt` for replacement singular values.
    pub fn reconstruct_with(&self, values: &[f64]) -> Matrix {
        let (m, k) = self.u.shape();
        let n = self.vt.cols();
        let mut out = Matrix::zeros(m, n);
        for (r, &s) in values.iter().enumerate().take(k) {
            if s == 0.0 {
                continue;
            }
            let v_row = self.vt.row(r);
            for i in 0..m {
                let a = self.u.get(i, r) * s;
                if a == 0.0 {
                    continue;
                }
                for (o, &v) in out.row_mut(i).iter_mut().zip(v_row) {
                    *o += a * v;
                }
            }
        }
        out
    }
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::NumericFailure {
            op: "svd",
            reason: "input contains non-finite entries".into(),
        });
    }
    if a.rows < a.cols {
        let t = svd_tall(&a.transpose())?;
        return Ok(SvdResult {
            u: t.vt.transpose(),
            singular_values: t.singular_values,
            vt: t.u.transpose(),
        });
    }
    svd_tall(a)
}

/// Requires `rows >= cols`.
fn svd_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    // Columns of A and V stored as contiguous rows.
    let mut w = a.transpose();
    let mut v = Matrix::identity(n);

    // Orthogonality is judged to m·eps, and columns below that relative
    // size count as zero; tighter tests can cycle on rounding noise.
    let tol = m as f64 * f64::EPSILON;
    let total: f64 = a.data.iter().map(|x| x * x).sum();
    let floor = total * tol * tol;
    let mut converged = n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let wp = w.row(p);
                    let wq = w.row(q);
                    (dot(wp, wp), dot(wq, wq), dot(wp, wq))
                };
                if gamma == 0.0
                    || alpha <= floor
                    || beta <= floor
                    || gamma.abs() <= tol * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::NumericFailure {
            op: "svd",
            reason: format!("Jacobi sweeps did not converge within {JACOBI_MAX_SWEEPS} sweeps"),
        });
    }

    let norms: Vec<f64> = (0..n).map(|j| dot(w.row(j), w.row(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let tiny = scale * f64::EPSILON * (m as f64);
    let mut u = Matrix::zeros(m, n);
    let mut vt = Matrix::zeros(n, n);
    let mut singular_values = Vec::with_capacity(n);
    for (r, &j) in order.iter().enumerate() {
        let s = norms[j];
        if s > tiny && s > 0.0 {
            for i in 0..m {
                u.set(i, r, w.get(j, i) / s);
            }
            singular_values.push(s);
        } else {
            singular_values.push(0.0);
        }
        vt.row_mut(r).copy_from_slice(v.row(j));
    }
    Ok(SvdResult {
        u,
        singular_values,
        vt,
    })
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols;
    let (head, tail) = m.data.split_at_mut(q * cols);
    let rp = &mut head[p * cols..(p + 1) * cols];
    let rq = &mut tail[..cols];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Sum of singular values.
pub fn nuclear_norm(a: &Matrix) -> Result<f64> {
    Ok(svd(a)?.singular_values.iter().sum())
}

/// Unbiased sample covariance (divisor `n − 1`) of the columns of `x`.
pub fn covariance(x: &Matrix) -> Result<Matrix> {
    if x.rows < 2 {
        return Err(Error::Degenerate {
            op: "covariance",
            reason: format!("need at least 2 rows, got {}", x.rows),
        });
    }
    let xc = x.centered();
    let mut cov = xc.t_matmul(&xc)?.scale(1.0 / (x.rows - 1) as f64);
    // Exact symmetry regardless of summation order.
    let m = cov.cols;
    for i in 0..m {
        for j in i + 1..m {
            let v = cov.get(i, j);
            cov.set(j, i, v);
        }
    }
    Ok(cov)
}

/// Gaussian kernel `K[i][j] = exp(−‖x_i − y_j‖² / (2·bandwidth))`.
pub fn rbf_kernel_matrix(x: &Matrix, y: &Matrix, bandwidth: f64) -> Result<Matrix> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::invalid(
            "bandwidth",
            format!("must be positive, got {bandwidth}"),
        ));
    }
    if x.cols != y.cols {
        return Err(Error::shape(
            "rbf_kernel_matrix",
            format!("{} columns", x.cols),
            y.cols,
        ));
    }
    let denom = 2.0 * bandwidth;
    Ok(Matrix::from_fn(x.rows, y.rows, |i, j| {
        (-sq_dist(x.row(i), y.row(j)) / denom).exp()
    }))
}

/// Median of the non-zero pairwise squared distances among the pooled rows
/// of `x` and `y`; 1 when every distance is zero. Even counts average the
/// two middle values.
pub fn median_sq_dist(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.cols != y.cols {
        return Err(Error::shape(
            "median_sq_dist",
            format!("{} columns", x.cols),
            y.cols,
        ));
    }
    let n = x.rows + y.rows;
    if n < 2 {
        return Err(Error::Degenerate {
            op: "median_sq_dist",
            reason: format!("need at least 2 pooled rows, got {n}"),
        });
    }
    let row = |i: usize| {
        if i < x.rows {
            x.row(i)
        } else {
            y.row(i - x.rows)
        }
    };
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(row(i), row(j));
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return Ok(1.0);
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    Ok(if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    })
}

/// Solves `S · X = B` for symmetric positive-definite `S` via Cholesky.
pub fn cholesky_solve(s: &Matrix, b: &Matrix) -> Result<Matrix> {
    Cholesky::factor(s)?.solve(b)
}

/// Lower-triangular Cholesky factor, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn factor(s: &Matrix) -> Result<Self> {
        let n = s.rows;
        if s.cols != n {
            return Err(Error::shape(
                "cholesky",
                "square matrix",
                format!("{}x{}", s.rows, s.cols),
            ));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = s.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::NumericFailure {
                    op: "cholesky",
                    reason: format!("non-positive pivot {d} at column {j}"),
                });
            }
            let d = d.sqrt();
            l.set(j, j, d);
            for i in j + 1..n {
                let mut v = s.get(i, j);
                for k in 0..j {
                    v -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, v / d);
            }
        }
        Ok(Self { l })
    }

    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.l.rows;
        if b.rows != n {
            return Err(Error::shape("cholesky solve", format!("{n} rows"), b.rows));
        }
        let mut x = b.clone();
        let cols = b.cols;
        // Forward: L y = b
        for i in 0..n {
            for k in 0..i {
                let lik = self.l.get(i, k);
                if lik == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    let v = x.get(k, c);
                    x.data[i * cols + c] -= lik * v;
                }
            }
            let d = self.l.get(i, i);
            x.row_mut(i).iter_mut().for_each(|v| *v /= d);
        }
        // Backward: Lᵀ x = y
        for i in (0..n).rev() {
            for k in i + 1..n {
                let lki = self.l.get(k, i);
                if lki == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    let v = x.get(k, c);
                    x.data[i * cols + c] -= lki * v;
                }
            }
            let d = self.l.get(i, i);
            x.row_mut(i).iter_mut().for_each(|v| *v /= d);
        }
        if !x.is_finite() {
            return Err(Error::NumericFailure {
                op: "cholesky solve",
                reason: "solution overflowed".into(),
            });
        }
        Ok(x)
    }
}
