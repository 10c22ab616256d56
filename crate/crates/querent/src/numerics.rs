//! Dense f64 matrices, the seeded random stream, and scalar activations.
//!
//! Accumulation order is part of the contract: every reduction here runs
//! left-to-right over the inner index, so outputs are bit-identical across
//! runs, chunk sizes, and thread counts. That rules out BLAS-style blocked
//! kernels on purpose; the row-axpy form below still autovectorizes well.

use crate::error::{Error, Result};
use crate::exec;

/// Row-major dense matrix. Constructors reject non-finite entries so public
/// operations can assume finite inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("matrix construction with non-finite entry".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Matrix {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Entries drawn i.i.d. N(0, std^2) from the given stream, row-major order.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.next_gaussian() * std)
    }

    pub fn identity(n: usize) -> Matrix {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn debug_check_finite(&self, what: &str) {
        debug_assert!(self.is_finite(), "{what} produced a non-finite entry");
    }
}

/// `self @ rhs` with the inner (k) accumulation strictly left-to-right per
/// output element; rows may be computed on different threads because each
/// output row depends only on one input row.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let cols = b.cols;
    exec::for_each_row(&mut out.data, cols.max(1), 0, |i, orow| {
        let arow = a.row(i);
        for (k, aik) in arow.iter().enumerate() {
            let brow = b.row(k);
            for (o, bkj) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bkj;
            }
        }
    });
    out.debug_check_finite("matmul");
    Ok(out)
}

/// Dot product, accumulated left-to-right.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// `out += s * v`, element-wise.
#[inline]
pub fn axpy(out: &mut [f64], s: f64, v: &[f64]) {
    debug_assert_eq!(out.len(), v.len());
    for (o, x) in out.iter_mut().zip(v.iter()) {
        *o += s * x;
    }
}

/// Row-stochastic softmax with per-row max subtraction. Finite input rows of
/// any magnitude in [-700, 700] produce rows that sum to 1 within 1e-12.
pub fn stable_softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows {
        softmax_slice(out.row_mut(i));
    }
    out.debug_check_finite("stable_softmax_rows");
    out
}

/// In-place softmax over one slice (max-subtracted, left-to-right sums).
#[inline]
pub fn softmax_slice(row: &mut [f64]) {
    let mut mx = f64::NEG_INFINITY;
    for v in row.iter() {
        if *v > mx {
            mx = *v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-column minimum and maximum across all rows.
/// Errors on a matrix with zero rows rather than inventing identities.
pub fn rowwise_extrema(m: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if m.rows == 0 {
        return Err(Error::EmptyRegion(
            "extrema of a matrix with zero rows".into(),
        ));
    }
    let mut lo = m.row(0).to_vec();
    let mut hi = m.row(0).to_vec();
    for i in 1..m.rows {
        for (j, v) in m.row(i).iter().enumerate() {
            if *v < lo[j] {
                lo[j] = *v;
            }
            if *v > hi[j] {
                hi[j] = *v;
            }
        }
    }
    Ok((lo, hi))
}

/// Largest singular value, by power iteration on WᵀW from a fixed start
/// vector. Deterministic; converges to 1e-13 relative or 500 rounds.
pub fn spectral_norm(w: &Matrix) -> f64 {
    let (rows, cols) = (w.rows(), w.cols());
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut wv = vec![0.0; rows];
    let mut prev = 0.0;
    for _ in 0..500 {
        for (i, out) in wv.iter_mut().enumerate() {
            *out = dot(w.row(i), &v);
        }
        let sigma = wv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if sigma == 0.0 {
            return 0.0;
        }
        for x in v.iter_mut() {
            *x = 0.0;
        }
        for i in 0..rows {
            let s = wv[i];
            for (j, x) in w.row(i).iter().enumerate() {
                v[j] += s * x;
            }
        }
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= vnorm;
        }
        if (sigma - prev).abs() <= 1e-13 * sigma.max(1.0) {
            return sigma;
        }
        prev = sigma;
    }
    prev
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gaussian error linear unit, tanh form:
/// 0.5·x·(1 + tanh(sqrt(2/π)·(x + 0.044715·x³))).
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

/// Derivative of the tanh-form GELU above.
pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let t = (C * (x + A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// Largest slope of the tanh-form GELU (attained near x ≈ 1.42); used when a
/// Lipschitz constant for a GELU-activated projection head is reported.
pub const GELU_LIPSCHITZ: f64 = 1.128_993_068_655_480_8;

/// Deterministic stream over the SplitMix64 generator. The u64 sequence for
/// a given seed is fixed by the algorithm, hence identical on every
/// platform; uniforms take the top 53 bits, gaussians come from Box-Muller
/// over consecutive uniforms (the second value of each pair is cached).
#[derive(Clone, Debug)]
pub struct RngStream {
    state: u64,
    spare_gaussian: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> RngStream {
        RngStream {
            state: seed,
            spare_gaussian: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; used where a logarithm of the draw is taken.
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Multiply-shift bounded draw; bias below 2^-64 is irrelevant here.
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        self.spare_gaussian = Some(r * th.sin());
        r * th.cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_small_fixture() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = RngStream::new(11);
        let a = Matrix::gaussian(100, 16, 1.0, &mut rng);
        let b = Matrix::gaussian(16, 23, 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        // naive i-j-k oracle with the same left-to-right k order
        for i in 0..100 {
            for j in 0..23 {
                let mut acc = 0.0;
                for k in 0..16 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!(
                    close(c.get(i, j), acc, 0.0),
                    "mismatch at ({i},{j}): {} vs {}",
                    c.get(i, j),
                    acc
                );
            }
        }
    }

    #[test]
    fn matmul_identity_is_exact() {
        let mut rng = RngStream::new(5);
        let a = Matrix::gaussian(17, 9, 2.0, &mut rng);
        let i9 = Matrix::identity(9);
        let ai = matmul(&a, &i9).unwrap();
        let b = Matrix::gaussian(9, 13, 1.5, &mut rng);
        let left = matmul(&ai, &b).unwrap();
        let right = matmul(&a, &b).unwrap();
        assert_eq!(left, right);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_pinned_row() {
        let m = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let p = stable_softmax_rows(&m);
        // frozen: e^{1,2,3} normalized
        assert!(close(p.get(0, 0), 0.090_030_573_170_380_46, 1e-6));
        assert!(close(p.get(0, 1), 0.244_728_471_054_797_64, 1e-6));
        assert!(close(p.get(0, 2), 0.665_240_955_774_821_8, 1e-6));
    }

    #[test]
    fn spectral_norm_pinned_cases() {
        assert!(close(spectral_norm(&Matrix::identity(5)), 1.0, 1e-12));
        assert_eq!(spectral_norm(&Matrix::zeros(3, 4)), 0.0);
        let diag = Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(close(spectral_norm(&diag), 3.0, 1e-12));
        // WᵀW = [[25,20],[20,25]], top eigenvalue 45
        let w = Matrix::from_vec(2, 2, vec![3.0, 0.0, 4.0, 5.0]).unwrap();
        assert!(close(spectral_norm(&w), 45.0_f64.sqrt(), 1e-10));
        // rectangular: norm of a row vector is its Euclidean length
        let r = Matrix::from_vec(1, 3, vec![1.0, 2.0, 2.0]).unwrap();
        assert!(close(spectral_norm(&r), 3.0, 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one_at_extreme_magnitudes() {
        let mut rng = RngStream::new(3);
        let m = Matrix::from_fn(20, 7, |_, _| (rng.next_f64() - 0.5) * 1400.0);
        let p = stable_softmax_rows(&m);
        for i in 0..20 {
            let s: f64 = p.row(i).iter().sum();
            assert!(close(s, 1.0, 1e-12), "row {i} sums to {s}");
            assert!(p.row(i).iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn extrema_per_column() {
        let m = Matrix::from_vec(3, 2, vec![1.0, -4.0, -2.0, 9.0, 0.5, 3.0]).unwrap();
        let (lo, hi) = rowwise_extrema(&m).unwrap();
        assert_eq!(lo, vec![-2.0, -4.0]);
        assert_eq!(hi, vec![1.0, 9.0]);
    }

    #[test]
    fn extrema_of_empty_matrix_is_an_error() {
        let m = Matrix::zeros(0, 4);
        assert!(matches!(rowwise_extrema(&m), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn sigmoid_pinned_values() {
        assert!(close(sigmoid(2.0), 0.880_797_077_977_882_3, 1e-6));
        assert!(close(sigmoid(-3.0), 0.047_425_873_177_566_79, 1e-9));
        assert!(close(sigmoid(0.0), 0.5, 0.0));
        // saturation stays finite and inside (0,1)
        assert!(sigmoid(800.0) <= 1.0 && sigmoid(800.0) > 0.99);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-10);
    }

    #[test]
    fn gelu_pinned_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!(close(gelu(1.0), 0.841_191_990_608_276_8, 1e-12));
        assert!(close(gelu(-1.0), -0.158_808_009_391_723_24, 1e-12));
        assert!(close(gelu(3.0), 2.996_362_607_918_227, 1e-12));
    }

    #[test]
    fn gelu_prime_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-2.0, -0.7, 0.0, 0.3, 1.1, 2.5] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(
                close(gelu_prime(x), fd, 1e-8),
                "gelu'({x}): {} vs fd {}",
                gelu_prime(x),
                fd
            );
        }
    }

    #[test]
    fn gelu_slope_never_exceeds_reported_lipschitz() {
        let mut worst: f64 = 0.0;
        for i in -4000..=4000 {
            let x = i as f64 * 1e-3;
            worst = worst.max(gelu_prime(x).abs());
        }
        assert!(worst <= GELU_LIPSCHITZ + 1e-9, "observed slope {worst}");
        assert!(worst > GELU_LIPSCHITZ - 1e-3);
    }

    #[test]
    fn rng_is_reproducible_and_seed_sensitive() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        let mut c = RngStream::new(43);
        let sa: Vec<u64> = (0..32).map(|_| a.next_u64()).collect();
        let sb: Vec<u64> = (0..32).map(|_| b.next_u64()).collect();
        let sc: Vec<u64> = (0..32).map(|_| c.next_u64()).collect();
        assert_eq!(sa, sb);
        assert_ne!(sa, sc);
    }

    #[test]
    fn rng_uniforms_live_in_unit_interval() {
        let mut rng = RngStream::new(7);
        let mut sum = 0.0;
        for _ in 0..10_000 {
            let u = rng.next_f64();
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        assert!(close(sum / 10_000.0, 0.5, 0.02));
    }

    #[test]
    fn rng_gaussians_have_sane_moments() {
        let mut rng = RngStream::new(99);
        let n = 20_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let g = rng.next_gaussian();
            s1 += g;
            s2 += g * g;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(close(mean, 0.0, 0.03), "mean {mean}");
        assert!(close(var, 1.0, 0.05), "var {var}");
    }

    #[test]
    fn bounded_draws_cover_range_uniformly() {
        let mut rng = RngStream::new(1234);
        let mut counts = [0u32; 10];
        for _ in 0..10_000 {
            counts[rng.next_below(10) as usize] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            assert!((850..=1150).contains(c), "bucket {i} holds {c}");
        }
    }

    #[test]
    fn non_finite_construction_is_rejected() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            Matrix::from_vec(1, 3, vec![1.0, 2.0]),
            Err(Error::Shape(_))
        ));
    }
}
