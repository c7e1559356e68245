//! Dense row-major matrices, a splittable deterministic RNG, and the
//! norm/trace primitives the probe and PAGE code build on.
//!
//! Summation order is fixed everywhere: rows top-to-bottom, and within a row
//! left-to-right. Squared norms are accumulated per row first and the row
//! totals are then added in row order. `frobenius_sq` and `trace_of_gram`
//! follow exactly this order, so they agree bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `rows × cols` matrix of `f64`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data has {} entries, expected {rows}×{cols}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_shape(&self, rows: usize, cols: usize, what: &str) -> Result<()> {
        if self.shape() != (rows, cols) {
            return Err(Error::ShapeMismatch {
                what: what.to_string(),
                expected: (rows, cols),
                found: self.shape(),
            });
        }
        Ok(())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in o_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        out
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "add shape");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "sub shape");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Row-major flattening, `vec(m)`.
    pub fn vectorize(&self) -> Vec<f64> {
        self.data.clone()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Squared Frobenius norm, Σ m[a,b]².
pub fn frobenius_sq(m: &Matrix) -> f64 {
    let mut total = 0.0;
    for r in 0..m.rows() {
        let mut row_sum = 0.0;
        for &x in m.row(r) {
            row_sum += x * x;
        }
        total += row_sum;
    }
    total
}

/// `tr(mᵀm)`, evaluated as `tr(m mᵀ)`: each diagonal entry of the row Gram
/// matrix is a row's squared norm, and the diagonal is summed in row order.
pub fn trace_of_gram(m: &Matrix) -> f64 {
    let mut total = 0.0;
    for r in 0..m.rows() {
        let row = m.row(r);
        let mut diag = 0.0;
        for (&x, &y) in row.iter().zip(row) {
            diag += x * y;
        }
        total += diag;
    }
    total
}

/// Squared Euclidean norm of a flat vector, left to right.
pub fn vector_norm_sq(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc + x * x)
}

/// Counter-based generator state (ChaCha8 with a 64-bit stream id).
///
/// `split(i)` derives an independent child stream from the seed and the
/// current stream id only, never from how many values have been drawn, so
/// workers can each take `split(worker_or_trial_index)` and the results do
/// not depend on scheduling.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn split(&self, index: u64) -> RngState {
        let child = splitmix64(self.stream ^ splitmix64(index.wrapping_add(0x9E37_79B9)));
        Self::with_stream(self.seed, child)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform draw in `[lo, hi]` (closed at `hi` only up to rounding).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `r × d_in` matrix with i.i.d. entries from `U(−1/√d_in, 1/√d_in)`, the
/// LoRA `A` initialization.
pub fn kaiming_uniform_init(rng: &mut RngState, r: usize, d_in: usize) -> Result<Matrix> {
    if r == 0 || d_in == 0 {
        return Err(Error::InvalidArgument(format!(
            "kaiming_uniform_init needs positive dimensions, got r={r}, d_in={d_in}"
        )));
    }
    let bound = 1.0 / (d_in as f64).sqrt();
    let data = (0..r * d_in).map(|_| rng.uniform(-bound, bound)).collect();
    Ok(Matrix { rows: r, cols: d_in, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_sq(&Matrix::zeros(3, 4)), 0.0);
        assert_eq!(frobenius_sq(&Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])), 30.0);
        assert_eq!(frobenius_sq(&Matrix::identity(5)), 5.0);
    }

    #[test]
    fn trace_of_gram_examples() {
        assert_eq!(trace_of_gram(&Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])), 30.0);
        assert_eq!(trace_of_gram(&Matrix::zeros(2, 6)), 0.0);
        assert_eq!(trace_of_gram(&Matrix::from_rows(&[&[-2.0]])), 4.0);
    }

    #[test]
    fn trace_of_gram_matches_explicit_gram_trace() {
        let mut rng = RngState::new(3);
        let m = Matrix::from_fn(7, 5, |_, _| rng.uniform(-2.0, 2.0));
        let explicit = m.t_matmul(&m).trace();
        assert!((explicit - trace_of_gram(&m)).abs() <= 1e-12 * explicit);
    }

    #[test]
    fn kaiming_bounds() {
        let mut rng = RngState::new(11);
        let a = kaiming_uniform_init(&mut rng, 4, 16).unwrap();
        assert_eq!(a.shape(), (4, 16));
        assert!(a.data().iter().all(|x| x.abs() <= 0.25));
        let one = kaiming_uniform_init(&mut rng, 1, 1).unwrap();
        assert!(one.get(0, 0).abs() <= 1.0);
    }

    #[test]
    fn kaiming_rejects_zero_dims() {
        let mut rng = RngState::new(0);
        assert!(kaiming_uniform_init(&mut rng, 0, 4).is_err());
        assert!(kaiming_uniform_init(&mut rng, 4, 0).is_err());
    }

    #[test]
    fn kaiming_second_moment() {
        // Per-entry second moment of U(-b, b) is b²/3 = 1/(3 d_in).
        let d_in = 12;
        let draws = 1_000_000;
        let mut rng = RngState::new(2024);
        let a = kaiming_uniform_init(&mut rng, draws / d_in, d_in).unwrap();
        let sq: Vec<f64> = a.data().iter().map(|x| x * x).collect();
        let n = sq.len() as f64;
        let mean = sq.iter().sum::<f64>() / n;
        let var = sq.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let stderr = (var / n).sqrt();
        assert!((mean - 1.0 / 36.0).abs() <= 3.0 * stderr, "mean {mean}, stderr {stderr}");
        let first: f64 = a.data().iter().sum::<f64>() / n;
        assert!(first.abs() < 5.0 * (1.0 / 36.0 / n).sqrt());
    }

    #[test]
    fn rng_determinism_and_split() {
        let mut a = RngState::new(9);
        let mut b = RngState::new(9);
        assert_eq!(
            kaiming_uniform_init(&mut a, 3, 5).unwrap(),
            kaiming_uniform_init(&mut b, 3, 5).unwrap()
        );
        // Splitting ignores draw position.
        let fresh = RngState::new(9);
        let mut s1 = a.split(4);
        let mut s2 = fresh.split(4);
        assert_eq!(s1.next_f64(), s2.next_f64());
        let mut other = fresh.split(5);
        assert_ne!(fresh.split(4).next_f64(), other.next_f64());
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = RngState::new(1);
        let a = Matrix::from_fn(3, 4, |_, _| rng.uniform(-1.0, 1.0));
        let b = Matrix::from_fn(5, 4, |_, _| rng.uniform(-1.0, 1.0));
        let c = Matrix::from_fn(3, 2, |_, _| rng.uniform(-1.0, 1.0));
        assert!(a.matmul_t(&b).max_abs_diff(&a.matmul(&b.transpose())) < 1e-14);
        assert!(a.t_matmul(&c).max_abs_diff(&a.transpose().matmul(&c)) < 1e-14);
    }

    #[test]
    fn new_rejects_bad_data() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix() -> impl Strategy<Value = Matrix> {
            (1usize..7, 1usize..7).prop_flat_map(|(r, c)| {
                proptest::collection::vec(-1e3f64..1e3, r * c)
                    .prop_map(move |d| Matrix::new(r, c, d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn gram_trace_is_bit_identical(m in matrix()) {
                prop_assert_eq!(trace_of_gram(&m).to_bits(), frobenius_sq(&m).to_bits());
            }

            #[test]
            fn vectorization_preserves_norm(m in matrix()) {
                let f = frobenius_sq(&m);
                let v = vector_norm_sq(&m.vectorize());
                prop_assert!((f - v).abs() <= 1e-12 * f.max(1e-300));
            }
        }
    }
}
