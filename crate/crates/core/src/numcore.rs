//! Dense row-major matrices, the logistic activation, seeded random streams
//! and principal component analysis.
//!
//! Every product accumulates each output element over the shared dimension in
//! ascending index order, so results are reproducible bit for bit regardless
//! of which product routine computed them.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Generator behind every random draw in the crate: ChaCha with 8 rounds.
pub type RngState = ChaCha8Rng;

/// Named sub-streams fanned out from one root seed.
///
/// Each stage draws from `ChaCha8Rng::seed_from_u64(root)` with its own
/// stream id, so adding draws to one stage never perturbs another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Synthetic = 1,
    Split = 2,
    SpectralBranch = 3,
    SpatialBranch = 4,
    FusionBranch = 5,
    ActiveLearning = 6,
    Transfer = 7,
    Finetune = 8,
}

pub fn seeded_rng(seed: u64) -> RngState {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn substream(seed: u64, stream: Stream) -> RngState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Largest double strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
const SIGMOID_CLAMP: f64 = 500.0;

/// Logistic function `1 / (1 + e^-x)`.
///
/// The argument is clamped to `[-500, 500]` and the result capped just below
/// one, so the output always lies in the open interval (0, 1) and downstream
/// logarithms of `s` and `1 - s` stay finite.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let z = x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    (1.0 / (1.0 + (-z).exp())).min(BELOW_ONE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::new",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

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

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    op: "Matrix::from_rows",
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds a matrix from an element generator.
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero, and a zero-column matrix has no data anyway
        self.data
            .chunks_exact(self.cols.max(1))
            .take(if self.cols == 0 { 0 } else { self.rows })
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
            return Err(self.shape_error("matmul", other));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, the layer-forward product for row-major batches.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(self.shape_error("matmul_t", other));
        }
        self.matmul(&other.transpose())
    }

    /// `selfᵀ · other`, the weight-gradient product.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(self.shape_error("t_matmul", other));
        }
        let n = other.cols;
        let mut out = Matrix::zeros(self.cols, n);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    // skipping exact zeros leaves every sum bit-identical
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

    /// Matrix-vector product `self · x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                op: "mul_vec",
                expected: self.cols,
                actual: x.len(),
            });
        }
        Ok(self.row_iter().map(|r| dot(r, x)).collect())
    }

    /// Adds `bias` to every row.
    pub fn add_row(&mut self, bias: &[f64]) {
        debug_assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.rows as f64;
        self.column_sums().into_iter().map(|s| s / n).collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Keeps the first `cols` columns.
    pub fn truncate_cols(&self, cols: usize) -> Matrix {
        let cols = cols.min(self.cols);
        let mut data = Vec::with_capacity(self.rows * cols);
        for row in self.row_iter() {
            data.extend_from_slice(&row[..cols]);
        }
        Matrix {
            rows: self.rows,
            cols,
            data,
        }
    }

    /// Side-by-side concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(self.shape_error("hcat", other));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Column block `[start, start + len)`.
    pub fn column_block(&self, start: usize, len: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * len);
        for row in self.row_iter() {
            data.extend_from_slice(&row[start..start + len]);
        }
        Matrix {
            rows: self.rows,
            cols: len,
            data,
        }
    }

    /// Stacks `other` below `self`.
    pub fn vcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows > 0 && other.rows > 0 && self.cols != other.cols {
            return Err(self.shape_error("vcat", other));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn shape_error(&self, op: &'static str, other: &Matrix) -> Error {
        Error::ShapeMismatch {
            op,
            left_rows: self.rows,
            left_cols: self.cols,
            right_rows: other.rows,
            right_cols: other.cols,
        }
    }
}

/// Free-function form of [`Matrix::matmul`].
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Principal axes of a sample matrix (one sample per row).
#[derive(Debug, Clone)]
pub struct Pca {
    /// `cols × k`; column `j` is the j-th principal direction.
    pub components: Matrix,
    pub means: Vec<f64>,
    /// Covariance eigenvalues of the retained directions, descending.
    pub eigenvalues: Vec<f64>,
    pub total_variance: f64,
}

impl Pca {
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| l / self.total_variance).collect()
    }

    /// Projects samples onto the retained directions (`rows × k`).
    pub fn project(&self, samples: &Matrix) -> Result<Matrix> {
        let centered = center(samples, &self.means)?;
        centered.matmul(&self.components)
    }

    pub fn reconstruct(&self, scores: &Matrix) -> Result<Matrix> {
        let mut out = scores.matmul_t(&self.components)?;
        out.add_row(&self.means);
        Ok(out)
    }
}

fn center(samples: &Matrix, means: &[f64]) -> Result<Matrix> {
    if samples.cols() != means.len() {
        return Err(Error::DimensionMismatch {
            op: "pca center",
            expected: means.len(),
            actual: samples.cols(),
        });
    }
    let mut centered = samples.clone();
    for row in centered.as_mut_slice().chunks_exact_mut(means.len().max(1)) {
        for (v, m) in row.iter_mut().zip(means) {
            *v -= m;
        }
    }
    Ok(centered)
}

/// Leading `k` principal components from the eigendecomposition of the
/// sample covariance.
///
/// Components come back ordered by descending eigenvalue, each flipped so
/// that its largest-magnitude coordinate is positive.
pub fn pca_components(samples: &Matrix, k: usize) -> Result<Pca> {
    let (n, d) = samples.shape();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "PCA needs at least 2 samples, got {n}"
        )));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::InvalidParameter(format!(
            "PCA component count {k} must lie in 1..={}",
            n.min(d)
        )));
    }
    let means = samples.column_means();
    let centered = center(samples, &means)?;
    let mut cov = centered.t_matmul(&centered)?;
    let scale = 1.0 / (n as f64 - 1.0);
    cov.map_inplace(|v| v * scale);
    // symmetrize exactly so the eigen solver sees a symmetric input
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (cov.get(i, j) + cov.get(j, i));
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }

    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.as_slice()));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let largest = eig.eigenvalues[order[0]].max(0.0);
    let tol = largest * d as f64 * 1e-12;
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > tol && eig.eigenvalues[i] > 0.0)
        .count();
    if rank < k {
        return Err(Error::DegenerateCovariance { requested: k, rank });
    }

    let mut components = Matrix::zeros(d, k);
    let mut eigenvalues = Vec::with_capacity(k);
    for (j, &idx) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let norm = col.norm();
        let pivot = (0..d)
            .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components.set(i, j, sign * col[i] / norm);
        }
        eigenvalues.push(eig.eigenvalues[idx]);
    }
    let total_variance = (0..d).map(|i| cov.get(i, i)).sum();

    Ok(Pca {
        components,
        means,
        eigenvalues,
        total_variance,
    })
}
