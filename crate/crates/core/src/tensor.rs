//! Dense row-major matrices, per-layer parameter sets and the small amount of
//! linear algebra the estimators and optimizers need.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for row in self.data.chunks(self.cols) {
            writeln!(f, "  {row:?}")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Wraps a row-major buffer. Fails if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("matrix dimensions must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dims("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dims(
                "matmul",
                format!("lhs cols == rhs rows ({})", self.cols),
                other.rows,
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
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

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dims(
                "t_matmul",
                format!("row counts equal ({})", self.rows),
                other.rows,
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
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
            return Err(Error::dims(
                "matmul_t",
                format!("column counts equal ({})", self.cols),
                other.cols,
            ));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::dims(
                "add_scaled",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Frobenius inner product `⟨self, other⟩`.
    pub fn frobenius_dot(&self, other: &Matrix) -> f64 {
        debug_assert!(self.same_shape(other));
        dot(&self.data, &other.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sqrt(Σ a_ij²)`.
pub fn frobenius_norm(a: &Matrix) -> f64 {
    // Scaled accumulation so huge or tiny entries don't overflow/underflow.
    let scale = a.max_abs();
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let ss: f64 = a.data.iter().map(|v| (v / scale) * (v / scale)).sum();
    scale * ss.sqrt()
}

/// Returns `s · U Vᵀ` for `U: m×r`, `V: n×r`.
pub fn outer_product_scaled(u: &Matrix, v: &Matrix, s: f64) -> Result<Matrix> {
    let mut out = Matrix::zeros(u.rows(), v.rows());
    add_scaled_outer(&mut out, u, v, s)?;
    Ok(out)
}

/// In place `X += s · U Vᵀ` without materializing `U Vᵀ`.
///
/// Every code path that perturbs or updates a layer goes through this
/// function so that replayed and eagerly stored factors produce bit-identical
/// results.
pub fn add_scaled_outer(x: &mut Matrix, u: &Matrix, v: &Matrix, s: f64) -> Result<()> {
    if u.cols() != v.cols() || x.rows() != u.rows() || x.cols() != v.rows() {
        return Err(Error::dims(
            "add_scaled_outer",
            format!("X {}x{} = U {}xr · Vᵀ rx{}", x.rows(), x.cols(), x.rows(), x.cols()),
            format!("U {}x{}, V {}x{}", u.rows(), u.cols(), v.rows(), v.cols()),
        ));
    }
    if s == 0.0 {
        return Ok(());
    }
    let n = x.cols();
    for i in 0..x.rows() {
        let u_row = u.row(i);
        let x_row = &mut x.data[i * n..(i + 1) * n];
        for (j, xij) in x_row.iter_mut().enumerate() {
            *xij += s * dot(u_row, v.row(j));
        }
    }
    Ok(())
}

/// All singular values of `a`, descending, by one-sided Jacobi rotations.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    // Work on the orientation with more rows than columns.
    let work = if a.rows() >= a.cols() {
        a.clone()
    } else {
        a.transpose()
    };
    let (m, n) = (work.rows(), work.cols());
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| work.column(j)).collect();

    const TOL: f64 = 1e-15;
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                let (cp, cq) = (&mut lo[p], &mut hi[0]);
                for k in 0..m {
                    let xp = cp[k];
                    let xq = cq[k];
                    cp[k] = c * xp - s * xq;
                    cq[k] = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// The `k` largest singular values, descending.
pub fn top_singular_values(a: &Matrix, k: usize) -> Result<Vec<f64>> {
    let max_k = a.rows().min(a.cols());
    if k == 0 || k > max_k {
        return Err(Error::invalid(format!("k = {k} outside 1..={max_k}")));
    }
    let mut sv = singular_values(a);
    sv.truncate(k);
    Ok(sv)
}

/// Number of singular values strictly above `rel_tol · σ₁`; zero for the zero matrix.
pub fn numeric_rank(a: &Matrix, rel_tol: f64) -> usize {
    let sv = singular_values(a);
    let top = sv.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Thin Householder QR of a tall matrix (`rows ≥ cols`), with the diagonal of
/// `R` forced nonnegative so the factorization is unique.
pub fn thin_qr(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, n) = (a.rows(), a.cols());
    if m < n {
        return Err(Error::invalid(format!("thin_qr needs rows >= cols, got {m}x{n}")));
    }
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut v: Vec<f64> = (k..m).map(|i| r.get(i, k)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = dot(&v, &v).sqrt();
        if vnorm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        for j in k..n {
            let proj: f64 = (k..m).map(|i| v[i - k] * r.get(i, j)).sum();
            for i in k..m {
                let val = r.get(i, j) - 2.0 * v[i - k] * proj;
                r.set(i, j, val);
            }
        }
        reflectors.push(v);
    }

    let mut q = Matrix::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..n).rev() {
        let v = &reflectors[k];
        if v.is_empty() {
            continue;
        }
        for j in 0..n {
            let proj: f64 = (k..m).map(|i| v[i - k] * q.get(i, j)).sum();
            for i in k..m {
                let val = q.get(i, j) - 2.0 * v[i - k] * proj;
                q.set(i, j, val);
            }
        }
    }

    let mut r_thin = Matrix::from_fn(n, n, |i, j| if j >= i { r.get(i, j) } else { 0.0 });
    for i in 0..n {
        if r_thin.get(i, i) < 0.0 {
            for j in 0..n {
                r_thin.set(i, j, -r_thin.get(i, j));
            }
            for row in 0..m {
                q.set(row, i, -q.get(row, i));
            }
        }
    }
    Ok((q, r_thin))
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix,
/// or `None` if a pivot is not positive.
pub fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return None;
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 0.0) {
            return None;
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Some(l)
}

/// Solves `L Lᵀ x = b` given the Cholesky factor `L`.
pub fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

/// Shape and rank of one layer: an `m × n` weight with rank-`r` perturbations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShape {
    pub m: usize,
    pub n: usize,
    pub r: usize,
}

impl LayerShape {
    pub fn new(m: usize, n: usize, r: usize) -> Result<Self> {
        if m == 0 || n == 0 || r == 0 {
            return Err(Error::invalid(format!("layer shape {m}x{n} rank {r}: all must be positive")));
        }
        if r > m.min(n) {
            return Err(Error::invalid(format!(
                "rank {r} exceeds min({m}, {n}) for layer {m}x{n}"
            )));
        }
        Ok(Self { m, n, r })
    }

    pub fn elements(&self) -> usize {
        self.m * self.n
    }
}

/// The optimization variable: an ordered list of per-layer matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    layers: Vec<Matrix>,
}

impl ParamSet {
    pub fn new(layers: Vec<Matrix>) -> Self {
        Self { layers }
    }

    /// Zero-initialized layers of the given `(rows, cols)` dimensions.
    pub fn zeros(dims: &[(usize, usize)]) -> Self {
        Self {
            layers: dims.iter().map(|&(m, n)| Matrix::zeros(m, n)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.dims())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.rows(), l.cols())).collect()
    }

    /// Layer shapes paired with per-layer ranks; validates `r ≤ min(m, n)`.
    pub fn shapes(&self, ranks: &[usize]) -> Result<Vec<LayerShape>> {
        if ranks.len() != self.layers.len() {
            return Err(Error::dims("ParamSet::shapes", self.layers.len(), ranks.len()));
        }
        self.layers
            .iter()
            .zip(ranks)
            .map(|(l, &r)| LayerShape::new(l.rows(), l.cols(), r))
            .collect()
    }

    /// Total number of scalar parameters `d`.
    pub fn num_elements(&self) -> usize {
        self.layers.iter().map(Matrix::len).sum()
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut Matrix {
        &mut self.layers[l]
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Matrix] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Matrix> {
        self.layers
    }

    pub fn conforms(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    /// Global norm `sqrt(Σ_ℓ ‖X_ℓ‖²_F)`.
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                let f = frobenius_norm(l);
                f * f
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &ParamSet) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.frobenius_dot(b))
            .sum()
    }

    /// `self += s · other`, layer by layer.
    pub fn add_scaled(&mut self, other: &ParamSet, s: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::dims("ParamSet::add_scaled", self.layers.len(), other.layers.len()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_scaled(b, s)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.layers.iter_mut().for_each(|l| l.scale(s));
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .fold(0.0, |m, (a, b)| m.max(a.max_abs_diff(b)))
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Matrix::is_finite)
    }

    /// Flat view index `i` → `(layer, row, col)`.
    pub fn locate(&self, mut i: usize) -> Option<(usize, usize, usize)> {
        for (l, layer) in self.layers.iter().enumerate() {
            if i < layer.len() {
                return Some((l, i / layer.cols(), i % layer.cols()));
            }
            i -= layer.len();
        }
        None
    }
}
