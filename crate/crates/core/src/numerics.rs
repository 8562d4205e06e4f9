//! Dense row-major matrices, activations, similarity primitives and the
//! seeded generator every other module draws from.
//!
//! Everything is `f64`. Shapes are explicit and nothing broadcasts.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`cosine_similarity`].
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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

    /// Copies column `c` out (columns are strided in row-major storage).
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
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

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `y = self · x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape("matvec", self.shape(), (x.len(), 1)));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `y = selfᵀ · x` without materialising the transpose.
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::shape("matvec_t", (self.cols, self.rows), (x.len(), 1)));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * xr;
            }
        }
        Ok(out)
    }

    /// `self += a · bᵀ` (rank-one update).
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) -> Result<()> {
        if a.len() != self.rows || b.len() != self.cols {
            return Err(Error::shape("outer", self.shape(), (a.len(), b.len())));
        }
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            for (w, &bc) in self.row_mut(r).iter_mut().zip(b) {
                *w += ar * bc;
            }
        }
        Ok(())
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

pub fn relu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for v in out.data.iter_mut() {
        *v = v.max(0.0);
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Usage("softmax of an empty vector".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Usage("log-sum-exp of an empty vector".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln())
}

/// Cosine similarity; zero when either vector has (near) zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", (a.len(), 1), (b.len(), 1)));
    }
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Accumulates `upstream · ∂cos(a,b)/∂a` into `grad_a` and the `b` half into
/// `grad_b`. Matches the zero-norm convention of [`cosine_similarity`]: no
/// gradient flows when either norm is below [`NORM_FLOOR`].
pub fn cosine_backward(a: &[f64], b: &[f64], upstream: f64, grad_a: &mut [f64], grad_b: &mut [f64]) {
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_FLOOR || nb < NORM_FLOOR || upstream == 0.0 {
        return;
    }
    let inv = 1.0 / (na * nb);
    let cos = dot(a, b) * inv;
    let ka = cos / (na * na);
    let kb = cos / (nb * nb);
    for i in 0..a.len() {
        grad_a[i] += upstream * (b[i] * inv - ka * a[i]);
        grad_b[i] += upstream * (a[i] * inv - kb * b[i]);
    }
}

/// Deterministic generator: ChaCha with 8 rounds, seeded through
/// `SeedableRng::seed_from_u64` (PCG32-expanded key). The keystream is
/// specified independently of platform and word size, so a seed reproduces
/// the same draws everywhere.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent sub-stream of the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-scale, scale]`.
    pub fn uniform(&mut self, scale: f64) -> f64 {
        (2.0 * self.next_f64() - 1.0) * scale
    }

    /// Uniform integer in `0..n` (rejection sampling, unbiased).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn init_uniform(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Usage(format!("init scale must be positive, got {scale}")));
    }
    let data = (0..rows * cols).map(|_| rng.uniform(scale)).collect();
    Ok(Matrix { rows, cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_times_m() {
        let mut rng = SeededRng::new(3);
        let m = init_uniform(&mut rng, 3, 4, 1.0).unwrap();
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn small_matmul_by_hand() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(11);
        let a = init_uniform(&mut rng, 5, 4, 1.0).unwrap();
        let b = init_uniform(&mut rng, 4, 3, 1.0).unwrap();
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3 vs 2x3"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let s = softmax(&[1000.0, 1000.0, 1000.0]).unwrap();
        for p in s {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softmax_matches_direct_formula() {
        // e^1, e^2, e^3 summed without shifting; small inputs so no overflow.
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        let s = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (p, q) in s.iter().zip(e.iter().map(|x| x / z)) {
            assert!((p - q).abs() < 1e-12);
        }
        // Frozen reference values (computed at 50 digits with mpmath).
        let frozen = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (p, q) in s.iter().zip(frozen) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_cases() {
        let m = Matrix::from_rows(&[vec![-1.0, 2.0]]).unwrap();
        assert_eq!(relu(&m).as_slice(), &[0.0, 2.0]);
        let neg = Matrix::from_rows(&[vec![-1.0, -3.0], vec![-0.5, -2.0]]).unwrap();
        assert!(relu(&neg).as_slice().iter().all(|&v| v == 0.0));
        let pos = Matrix::from_rows(&[vec![0.0, 3.0], vec![0.5, 2.0]]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosine_backward_matches_finite_differences() {
        let a = [0.4, -0.7, 1.1];
        let b = [-0.2, 0.9, 0.3];
        let mut ga = [0.0; 3];
        let mut gb = [0.0; 3];
        cosine_backward(&a, &b, 1.0, &mut ga, &mut gb);
        let h = 1e-6;
        for i in 0..3 {
            let mut ap = a;
            let mut am = a;
            ap[i] += h;
            am[i] -= h;
            let fd = (cosine_similarity(&ap, &b).unwrap() - cosine_similarity(&am, &b).unwrap()) / (2.0 * h);
            assert!((fd - ga[i]).abs() < 1e-8);
            let mut bp = b;
            let mut bm = b;
            bp[i] += h;
            bm[i] -= h;
            let fd = (cosine_similarity(&a, &bp).unwrap() - cosine_similarity(&a, &bm).unwrap()) / (2.0 * h);
            assert!((fd - gb[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn init_uniform_statistics_and_determinism() {
        let mut rng = SeededRng::new(42);
        let m = init_uniform(&mut rng, 100, 100, 0.05).unwrap();
        let mean = m.as_slice().iter().sum::<f64>() / 1e4;
        assert!(mean.abs() < 0.005);
        assert!(m.as_slice().iter().all(|v| v.abs() <= 0.05));

        let again = init_uniform(&mut SeededRng::new(42), 100, 100, 0.05).unwrap();
        assert_eq!(m, again);
        let other = init_uniform(&mut SeededRng::new(43), 100, 100, 0.05).unwrap();
        assert_ne!(m, other);
        assert!(init_uniform(&mut rng, 2, 2, 0.0).is_err());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        SeededRng::new(5).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    #[test]
    fn streams_are_independent() {
        let a = SeededRng::with_stream(9, 0).next_u64();
        let b = SeededRng::with_stream(9, 1).next_u64();
        assert_ne!(a, b);
    }
}
