//! Complex-valued linear-algebra kernels and random sampling shared by all
//! other modules.
//!
//! Matrices are `nalgebra::DMatrix<Complex64>`, which is column-major; the
//! `vec`/`unvec` pair therefore follows the column-stacking convention
//! globally. Factorizations (SVD, Cholesky, eigendecomposition, LU) are
//! delegated to nalgebra; the domain kernels (Kronecker/Khatri-Rao products,
//! CSCG sampling, water-filling) are implemented here.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("column counts differ: {0} vs {1}")]
    ColumnMismatch(usize, usize),
    #[error("vector of length {len} cannot fill a {rows}x{cols} matrix")]
    SizeMismatch { len: usize, rows: usize, cols: usize },
    #[error("negative variance {0}")]
    NegativeVariance(f64),
    #[error("matrix is not Hermitian positive definite")]
    NotHpd,
    #[error("SVD did not converge")]
    NoConvergence,
    #[error("all water-filling gains are zero")]
    AllZeroGains,
}

/// Deterministic, splittable random stream. The same `(seed, stream)` pair
/// reproduces identical draws regardless of thread schedule, so Monte-Carlo
/// sweeps hand one stream id to each task.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// A fresh stream with the same seed and a different stream id.
    pub fn substream(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        use rand_distr::StandardNormal;
        self.rng.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

/// Three-way tensor stored as frontal slices of uniform shape `d1 x d2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CTensor3 {
    slices: Vec<CMat>,
}

impl CTensor3 {
    pub fn from_slices(slices: Vec<CMat>) -> Self {
        assert!(!slices.is_empty(), "tensor needs at least one slice");
        let shape = slices[0].shape();
        assert!(
            slices.iter().all(|s| s.shape() == shape),
            "frontal slices must share one shape"
        );
        Self { slices }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let (d1, d2) = self.slices[0].shape();
        (d1, d2, self.slices.len())
    }

    pub fn slice(&self, i: usize) -> &CMat {
        &self.slices[i]
    }

    pub fn slices(&self) -> &[CMat] {
        &self.slices
    }
}

/// Kronecker product `A ⊗ B`.
pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = CMat::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * aij));
        }
    }
    out
}

/// Khatri-Rao (column-wise Kronecker) product `A ⊙ B`.
pub fn khatri_rao(a: &CMat, b: &CMat) -> Result<CMat, NumericsError> {
    if a.ncols() != b.ncols() {
        return Err(NumericsError::ColumnMismatch(a.ncols(), b.ncols()));
    }
    let (ar, br) = (a.nrows(), b.nrows());
    let mut out = CMat::zeros(ar * br, a.ncols());
    for j in 0..a.ncols() {
        for i in 0..ar {
            let aij = a[(i, j)];
            for k in 0..br {
                out[(i * br + k, j)] = aij * b[(k, j)];
            }
        }
    }
    Ok(out)
}

/// Column-stacking vectorization.
pub fn vec_of(a: &CMat) -> CVec {
    CVec::from_column_slice(a.as_slice())
}

/// Inverse of [`vec_of`]: reshape a column vector into `rows x cols`.
pub fn unvec(v: &CVec, rows: usize, cols: usize) -> Result<CMat, NumericsError> {
    if v.len() != rows * cols {
        return Err(NumericsError::SizeMismatch { len: v.len(), rows, cols });
    }
    Ok(CMat::from_column_slice(rows, cols, v.as_slice()))
}

/// Reshape a row slice (length `rows*cols`) into `rows x cols`, column-major.
pub fn unvec_slice(v: &[C64], rows: usize, cols: usize) -> Result<CMat, NumericsError> {
    if v.len() != rows * cols {
        return Err(NumericsError::SizeMismatch { len: v.len(), rows, cols });
    }
    Ok(CMat::from_column_slice(rows, cols, v))
}

/// i.i.d. circularly-symmetric complex Gaussian entries with total per-entry
/// variance `variance` (real and imaginary parts each carry half).
pub fn sample_cscg(
    variance: f64,
    rows: usize,
    cols: usize,
    rng: &mut RngStream,
) -> Result<CMat, NumericsError> {
    if variance < 0.0 {
        return Err(NumericsError::NegativeVariance(variance));
    }
    let s = (variance / 2.0).sqrt();
    Ok(CMat::from_fn(rows, cols, |_, _| {
        C64::new(s * rng.normal(), s * rng.normal())
    }))
}

/// Natural-log determinant of a Hermitian positive definite matrix via
/// Cholesky with explicit pivot checks. Callers divide by `ln 2` for bits.
pub fn logdet_hpd(a: &CMat) -> Result<f64, NumericsError> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut l = a.clone();
    let mut acc = 0.0;
    for j in 0..n {
        let mut d = l[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(NumericsError::NotHpd);
        }
        let dj = d.sqrt();
        acc += dj.ln();
        l[(j, j)] = C64::new(dj, 0.0);
        for i in j + 1..n {
            let mut s = l[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(2.0 * acc)
}

/// Thin SVD with singular values sorted in descending order.
/// Returns `(U, sigma, V)` such that `A = U diag(sigma) V^H`.
pub fn svd(a: &CMat) -> Result<(CMat, Vec<f64>, CMat), NumericsError> {
    let svd = a.clone().try_svd(true, true, f64::EPSILON * 16.0, 0)
        .ok_or(NumericsError::NoConvergence)?;
    let u = svd.u.ok_or(NumericsError::NoConvergence)?;
    let v_t = svd.v_t.ok_or(NumericsError::NoConvergence)?;
    let sig: Vec<f64> = svd.singular_values.iter().copied().collect();

    // nalgebra does not guarantee ordering; sort descending and permute.
    let mut idx: Vec<usize> = (0..sig.len()).collect();
    idx.sort_by(|&i, &j| sig[j].partial_cmp(&sig[i]).unwrap());
    let sorted: Vec<f64> = idx.iter().map(|&i| sig[i]).collect();
    let u_sorted = CMat::from_fn(u.nrows(), idx.len(), |r, c| u[(r, idx[c])]);
    let v = v_t.adjoint();
    let v_sorted = CMat::from_fn(v.nrows(), idx.len(), |r, c| v[(r, idx[c])]);
    Ok((u_sorted, sorted, v_sorted))
}

/// Water-filling power allocation: `p_r = max(w - noise/gain_r, 0)` with the
/// water level `w` found by bisection so that the powers sum to `budget`.
pub fn water_fill(gains: &[f64], noise: f64, budget: f64) -> Result<Vec<f64>, NumericsError> {
    assert!(budget > 0.0, "budget must be positive");
    if !gains.iter().any(|&g| g > 0.0) {
        return Err(NumericsError::AllZeroGains);
    }
    let alloc = |w: f64| -> Vec<f64> {
        gains
            .iter()
            .map(|&g| if g > 0.0 { (w - noise / g).max(0.0) } else { 0.0 })
            .collect()
    };
    let total = |w: f64| alloc(w).iter().sum::<f64>();

    let mut lo = gains
        .iter()
        .filter(|&&g| g > 0.0)
        .map(|&g| noise / g)
        .fold(f64::INFINITY, f64::min);
    let mut hi = lo + budget;
    while total(hi) < budget {
        hi = lo + 2.0 * (hi - lo);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) < budget {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-16 * hi.max(1.0) {
            break;
        }
    }
    let w = 0.5 * (lo + hi);
    let mut p = alloc(w);
    // Absorb the bisection residual into the active streams so the sum is
    // exact to 1e-9 * budget.
    let s: f64 = p.iter().sum();
    if s > 0.0 {
        let scale = budget / s;
        for x in p.iter_mut() {
            *x *= scale;
        }
    }
    Ok(p)
}

/// Hermitian eigenvalues of `A` (ascending).
pub fn eigvals_hermitian(a: &CMat) -> Vec<f64> {
    let sym = nalgebra::SymmetricEigen::new(a.clone());
    let mut v: Vec<f64> = sym.eigenvalues.iter().copied().collect();
    v.sort_by(|x, y| x.partial_cmp(y).unwrap());
    v
}

/// Frobenius norm of the difference, relative to the norm of `b`.
pub fn rel_frob_err(a: &CMat, b: &CMat) -> f64 {
    let nb = b.norm();
    if nb == 0.0 {
        return a.norm();
    }
    (a - b).norm() / nb
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_cmat(rows: usize, cols: usize, rng: &mut RngStream) -> CMat {
        sample_cscg(1.0, rows, cols, rng).unwrap()
    }

    #[test]
    fn kron_identity_case() {
        let i2 = CMat::identity(2, 2);
        let i3 = CMat::identity(3, 3);
        assert_eq!(kron(&i2, &i3), CMat::identity(6, 6));
    }

    #[test]
    fn kron_scalar_case() {
        let s = CMat::from_element(1, 1, C64::new(2.0, 0.0));
        let mut rng = RngStream::new(1, 0);
        let b = random_cmat(3, 2, &mut rng);
        assert_eq!(kron(&s, &b), &b * C64::new(2.0, 0.0));
    }

    #[test]
    fn kron_matches_index_formula() {
        let mut rng = RngStream::new(2, 0);
        let a = random_cmat(2, 2, &mut rng);
        let b = random_cmat(2, 2, &mut rng);
        let k = kron(&a, &b);
        for i in 0..2 {
            for j in 0..2 {
                for l in 0..2 {
                    for m in 0..2 {
                        assert_eq!(k[(i * 2 + l, j * 2 + m)], a[(i, j)] * b[(l, m)]);
                    }
                }
            }
        }
    }

    #[test]
    fn khatri_rao_single_column_is_kron() {
        let mut rng = RngStream::new(3, 0);
        let a = random_cmat(3, 1, &mut rng);
        let b = random_cmat(2, 1, &mut rng);
        assert_eq!(khatri_rao(&a, &b).unwrap(), kron(&a, &b));
    }

    #[test]
    fn khatri_rao_identity_columns() {
        let i2 = CMat::identity(2, 2);
        let kr = khatri_rao(&i2, &i2).unwrap();
        assert_eq!(kr.shape(), (4, 2));
        let one = C64::new(1.0, 0.0);
        assert_eq!(kr[(0, 0)], one);
        assert_eq!(kr[(3, 1)], one);
        assert_eq!(kr.iter().map(|z| z.norm_sqr()).sum::<f64>(), 2.0);
    }

    #[test]
    fn khatri_rao_per_column_kron_oracle() {
        let mut rng = RngStream::new(4, 0);
        let a = random_cmat(3, 4, &mut rng);
        let b = random_cmat(2, 4, &mut rng);
        let kr = khatri_rao(&a, &b).unwrap();
        for j in 0..4 {
            let aj = CMat::from_fn(3, 1, |r, _| a[(r, j)]);
            let bj = CMat::from_fn(2, 1, |r, _| b[(r, j)]);
            let col = kron(&aj, &bj);
            for r in 0..6 {
                assert_eq!(kr[(r, j)], col[(r, 0)]);
            }
        }
    }

    #[test]
    fn khatri_rao_column_mismatch() {
        let a = CMat::zeros(2, 3);
        let b = CMat::zeros(2, 2);
        assert!(matches!(
            khatri_rao(&a, &b),
            Err(NumericsError::ColumnMismatch(3, 2))
        ));
    }

    #[test]
    fn vec_is_column_major() {
        let a = CMat::from_row_slice(
            2,
            2,
            &[
                C64::new(1.0, 0.0),
                C64::new(2.0, 0.0),
                C64::new(3.0, 0.0),
                C64::new(4.0, 0.0),
            ],
        );
        let v = vec_of(&a);
        let expect = [1.0, 3.0, 2.0, 4.0];
        for (x, e) in v.iter().zip(expect) {
            assert_eq!(x.re, e);
        }
    }

    #[test]
    fn unvec_round_trip() {
        let mut rng = RngStream::new(5, 0);
        let a = random_cmat(3, 5, &mut rng);
        assert_eq!(unvec(&vec_of(&a), 3, 5).unwrap(), a);
    }

    #[test]
    fn vec_of_product_identity() {
        // vec(AXB) == (B^T ⊗ A) vec(X)
        let mut rng = RngStream::new(6, 0);
        let a = random_cmat(2, 2, &mut rng);
        let x = random_cmat(2, 2, &mut rng);
        let b = random_cmat(2, 2, &mut rng);
        let lhs = vec_of(&(&a * &x * &b));
        let rhs = kron(&b.transpose(), &a) * vec_of(&x);
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn cscg_zero_variance() {
        let mut rng = RngStream::new(7, 0);
        let m = sample_cscg(0.0, 4, 4, &mut rng).unwrap();
        assert_eq!(m.norm(), 0.0);
    }

    #[test]
    fn cscg_sample_variance() {
        let mut rng = RngStream::new(8, 0);
        let n = 100_000;
        let m = sample_cscg(2.0, n, 1, &mut rng).unwrap();
        let var = m.iter().map(|z| z.norm_sqr()).sum::<f64>() / n as f64;
        assert!((var - 2.0).abs() < 0.05, "sample variance {var}");
    }

    #[test]
    fn cscg_deterministic() {
        let a = sample_cscg(1.0, 8, 8, &mut RngStream::new(9, 3)).unwrap();
        let b = sample_cscg(1.0, 8, 8, &mut RngStream::new(9, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cscg_negative_variance_rejected() {
        let mut rng = RngStream::new(9, 0);
        assert!(sample_cscg(-1.0, 2, 2, &mut rng).is_err());
    }

    #[test]
    fn cscg_distinct_streams_uncorrelated() {
        let n = 100_000;
        let a = sample_cscg(1.0, n, 1, &mut RngStream::new(11, 0)).unwrap();
        let b = sample_cscg(1.0, n, 1, &mut RngStream::new(11, 1)).unwrap();
        let corr: C64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| x * y.conj())
            .sum::<C64>()
            / C64::new(n as f64, 0.0);
        assert!(corr.norm() < 0.02, "cross-stream correlation {}", corr.norm());
    }

    #[test]
    fn logdet_identity() {
        assert_eq!(logdet_hpd(&CMat::identity(4, 4)).unwrap(), 0.0);
    }

    #[test]
    fn logdet_diagonal() {
        let d = CMat::from_diagonal(&CVec::from_vec(vec![
            C64::new(2.0, 0.0),
            C64::new(3.0, 0.0),
        ]));
        assert_relative_eq!(logdet_hpd(&d).unwrap(), 6.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn logdet_matches_eigen_oracle() {
        let mut rng = RngStream::new(10, 0);
        let x = random_cmat(4, 4, &mut rng);
        let a = CMat::identity(4, 4) + &x * x.adjoint();
        let eig_sum: f64 = eigvals_hermitian(&a).iter().map(|l| l.ln()).sum();
        let ld = logdet_hpd(&a).unwrap();
        assert!((ld - eig_sum).abs() < 1e-10 * ld.abs().max(1.0));
    }

    #[test]
    fn logdet_rejects_indefinite() {
        let d = CMat::from_diagonal(&CVec::from_vec(vec![
            C64::new(1.0, 0.0),
            C64::new(-1.0, 0.0),
        ]));
        assert!(logdet_hpd(&d).is_err());
    }

    #[test]
    fn logdet_block_diagonal_additivity() {
        let mut rng = RngStream::new(12, 0);
        let xa = random_cmat(3, 3, &mut rng);
        let xb = random_cmat(2, 2, &mut rng);
        let a = CMat::identity(3, 3) + &xa * xa.adjoint();
        let b = CMat::identity(2, 2) + &xb * xb.adjoint();
        let mut block = CMat::zeros(5, 5);
        block.view_mut((0, 0), (3, 3)).copy_from(&a);
        block.view_mut((3, 3), (2, 2)).copy_from(&b);
        let lhs = logdet_hpd(&a).unwrap() + logdet_hpd(&b).unwrap();
        assert_relative_eq!(lhs, logdet_hpd(&block).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn svd_diagonal() {
        let d = CMat::from_diagonal(&CVec::from_vec(vec![
            C64::new(-3.0, 0.0),
            C64::new(1.0, 0.0),
        ]));
        let (_, sig, _) = svd(&d).unwrap();
        assert_relative_eq!(sig[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(sig[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn svd_rank_one() {
        let mut rng = RngStream::new(13, 0);
        let u = random_cmat(4, 1, &mut rng);
        let v = random_cmat(3, 1, &mut rng);
        let a = &u * v.adjoint();
        let (_, sig, _) = svd(&a).unwrap();
        assert_relative_eq!(sig[0], u.norm() * v.norm(), epsilon = 1e-10);
        for s in &sig[1..] {
            assert!(*s < 1e-10);
        }
    }

    #[test]
    fn svd_reconstruction() {
        let mut rng = RngStream::new(14, 0);
        let a = random_cmat(4, 3, &mut rng);
        let (u, sig, v) = svd(&a).unwrap();
        let s = CMat::from_diagonal(&CVec::from_vec(
            sig.iter().map(|&x| C64::new(x, 0.0)).collect(),
        ));
        let recon = &u * s * v.adjoint();
        assert!(rel_frob_err(&recon, &a) < 1e-9);
        assert!(rel_frob_err(&(u.adjoint() * &u), &CMat::identity(3, 3)) < 1e-9);
        assert!(rel_frob_err(&(v.adjoint() * &v), &CMat::identity(3, 3)) < 1e-9);
    }

    #[test]
    fn water_fill_single_gain() {
        let p = water_fill(&[2.0], 1.0, 5.0).unwrap();
        assert_relative_eq!(p[0], 5.0, epsilon = 1e-9);
    }

    #[test]
    fn water_fill_equal_gains_split() {
        let p = water_fill(&[3.0, 3.0], 1.0, 4.0).unwrap();
        assert_relative_eq!(p[0], 2.0, epsilon = 1e-9);
        assert_relative_eq!(p[1], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn water_fill_matches_grid_oracle() {
        // gains {4,1}, noise 1, budget 1: 1-D grid over the split.
        let gains = [4.0, 1.0];
        let rate = |p1: f64| {
            (1.0 + 4.0 * p1).log2() + (1.0 + (1.0 - p1)).log2()
        };
        let mut best = (0.0, f64::MIN);
        for i in 0..=100_000 {
            let p1 = i as f64 / 100_000.0;
            let r = rate(p1);
            if r > best.1 {
                best = (p1, r);
            }
        }
        let p = water_fill(&gains, 1.0, 1.0).unwrap();
        assert!((p[0] - best.0).abs() < 1e-4, "wf {} grid {}", p[0], best.0);
    }

    #[test]
    fn water_fill_kkt() {
        let gains = [5.0, 2.0, 0.3, 0.0];
        let noise = 1.0;
        let p = water_fill(&gains, noise, 2.0).unwrap();
        assert_relative_eq!(p.iter().sum::<f64>(), 2.0, epsilon = 1e-9 * 2.0);
        // recover the water level from any active stream
        let w = p
            .iter()
            .zip(&gains)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, g)| pi + noise / g)
            .next()
            .unwrap();
        for (pi, &g) in p.iter().zip(&gains) {
            if *pi > 0.0 {
                assert_relative_eq!(pi + noise / g, w, epsilon = 1e-6 * w);
            } else if g > 0.0 {
                assert!(noise / g >= w - 1e-9);
            }
        }
    }

    #[test]
    fn water_fill_all_zero_gains() {
        assert!(matches!(
            water_fill(&[0.0, 0.0], 1.0, 1.0),
            Err(NumericsError::AllZeroGains)
        ));
    }

    #[test]
    fn mixed_product_identity() {
        // (AB) ⊙ (CD) == (A ⊗ C)(B ⊙ D)
        let mut rng = RngStream::new(15, 0);
        let a = random_cmat(2, 3, &mut rng);
        let b = random_cmat(3, 4, &mut rng);
        let c = random_cmat(2, 3, &mut rng);
        let d = random_cmat(3, 4, &mut rng);
        let lhs = khatri_rao(&(&a * &b), &(&c * &d)).unwrap();
        let rhs = kron(&a, &c) * khatri_rao(&b, &d).unwrap();
        assert!(rel_frob_err(&lhs, &rhs) < 1e-10);
    }

    #[test]
    fn kron_product_identity() {
        // (AB ⊗ CD) == (A ⊗ C)(B ⊗ D)
        let mut rng = RngStream::new(16, 0);
        let a = random_cmat(2, 2, &mut rng);
        let b = random_cmat(2, 3, &mut rng);
        let c = random_cmat(2, 2, &mut rng);
        let d = random_cmat(2, 2, &mut rng);
        let lhs = kron(&(&a * &b), &(&c * &d));
        let rhs = kron(&a, &c) * kron(&b, &d);
        assert!(rel_frob_err(&lhs, &rhs) < 1e-10);
    }
}
