//! Geometric primitives on the sphere and the orthogonal group.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on `max |QᵀQ - I|` for matrices produced by this crate.
pub const ORTHO_TOL: f64 = 1e-10;

/// A `p x p` matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalMatrix(DMatrix<f64>);

impl OrthogonalMatrix {
    pub fn identity(p: usize) -> Self {
        Self(DMatrix::identity(p, p))
    }

    /// Wraps `m`, checking orthonormality against `tol`.
    pub fn new_checked(m: DMatrix<f64>, tol: f64) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension { expected: m.nrows(), got: m.ncols() });
        }
        let err = linalg::orthogonality_error(&m);
        if err > tol {
            return Err(Error::Numerical(format!("matrix not orthogonal: max |QᵀQ - I| = {err:e}")));
        }
        Ok(Self(m))
    }

    /// Wraps `m` after re-orthonormalizing its columns (Gram-Schmidt).
    pub fn from_matrix_reorthonormalized(m: &DMatrix<f64>) -> Self {
        Self(linalg::orthonormalize(m, 1e-12))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn orthogonality_error(&self) -> f64 {
        linalg::orthogonality_error(&self.0)
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        let p = self.dim();
        (0..p).flat_map(|i| (0..p).map(move |j| (i, j))).map(|(i, j)| self.0[(i, j)]).collect()
    }

    pub fn from_row_major(p: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != p * p {
            return Err(Error::Dimension { expected: p * p, got: entries.len() });
        }
        Self::new_checked(DMatrix::from_row_slice(p, p, entries), 1e-8)
    }

    /// Product of plane rotations by `theta`, applied sequentially in the
    /// listed order: each new rotation left-multiplies the running product, so
    /// `Q = G_k ... G_2 G_1`. Pair indices are 1-based.
    pub fn givens(pairs: &[(usize, usize)], theta: f64, p: usize) -> Result<Self> {
        let mut q = DMatrix::identity(p, p);
        let (s, c) = theta.sin_cos();
        for &(i, j) in pairs {
            if i == 0 || j == 0 || i > p || j > p || i == j {
                return Err(Error::Index(format!("Givens pair ({i}, {j}) invalid for p = {p}")));
            }
            let (a, b) = (i - 1, j - 1);
            // left-multiplication by G touches rows a and b only
            for col in 0..p {
                let ra = q[(a, col)];
                let rb = q[(b, col)];
                q[(a, col)] = c * ra - s * rb;
                q[(b, col)] = s * ra + c * rb;
            }
        }
        Ok(Self(q))
    }

    /// `self · exp(S(α))`.
    pub fn exp_skew(&self, alpha: &SkewCoordinates) -> Self {
        let p = self.dim();
        let s = alpha.to_matrix(p);
        Self(&self.0 * linalg::expm(&s))
    }

    /// Flip column `j`.
    pub fn flip_column(&mut self, j: usize) {
        let mut c = self.0.column_mut(j);
        c.neg_mut();
    }

    /// Permute columns: new column `k` is old column `order[k]`.
    pub fn permute_columns(&self, order: &[usize]) -> Self {
        let cols: Vec<_> = order.iter().map(|&k| self.0.column(k).into_owned()).collect();
        Self(DMatrix::from_columns(&cols))
    }
}

/// Strict upper-triangle coordinates of a skew-symmetric matrix `S(α)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewCoordinates(pub Vec<f64>);

impl SkewCoordinates {
    pub fn zeros(p: usize) -> Self {
        Self(vec![0.0; linalg::skew_dim(p)])
    }

    pub fn to_matrix(&self, p: usize) -> DMatrix<f64> {
        assert_eq!(self.0.len(), linalg::skew_dim(p), "skew coordinate count");
        let mut s = DMatrix::zeros(p, p);
        for (k, a) in self.0.iter().enumerate() {
            if *a != 0.0 {
                let (i, j) = linalg::skew_pair(p, k);
                s[(i, j)] -= a;
                s[(j, i)] += a;
            }
        }
        s
    }

    /// Coordinates of the skew part of `m`.
    pub fn from_skew_matrix(m: &DMatrix<f64>) -> Self {
        let p = m.nrows();
        Self(
            (0..linalg::skew_dim(p))
                .map(|k| {
                    let (i, j) = linalg::skew_pair(p, k);
                    0.5 * (m[(j, i)] - m[(i, j)])
                })
                .collect(),
        )
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unconstrained coordinates for an ordered eigenvalue vector with `λ₁ = 0`:
/// `λᵢ = λᵢ₋₁ + softplus(uᵢ)`, `u₁ ≡ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenvalueReparam {
    u: Vec<f64>,
}

impl EigenvalueReparam {
    /// `u` including the fixed leading zero.
    pub fn new(mut u: Vec<f64>) -> Self {
        if let Some(first) = u.first_mut() {
            *first = 0.0;
        }
        Self { u }
    }

    /// Free coordinates `u₂..u_p`.
    pub fn from_free(free: &[f64]) -> Self {
        let mut u = Vec::with_capacity(free.len() + 1);
        u.push(0.0);
        u.extend_from_slice(free);
        Self { u }
    }

    /// Inverse map. Gaps are floored at `min_gap` so the coordinates stay finite.
    pub fn from_lambda(lambda: &[f64], min_gap: f64) -> Self {
        let mut u = vec![0.0; lambda.len()];
        for i in 1..lambda.len() {
            u[i] = softplus_inv((lambda[i] - lambda[i - 1]).max(min_gap));
        }
        Self { u }
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn free(&self) -> &[f64] {
        &self.u[1..]
    }

    pub fn lambda(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.u.len());
        for (i, ui) in self.u.iter().enumerate() {
            if i > 0 {
                acc += softplus(*ui);
            }
            out.push(acc);
        }
        out
    }

    /// Chain rule: gradient w.r.t. the free coordinates `u₂..u_p` given a
    /// gradient w.r.t. `λ`.
    pub fn pullback(&self, d_lambda: &[f64]) -> Vec<f64> {
        let p = self.u.len();
        let mut tail = 0.0;
        let mut out = vec![0.0; p - 1];
        for i in (1..p).rev() {
            tail += d_lambda[i];
            out[i - 1] = sigmoid(self.u[i]) * tail;
        }
        out
    }
}

/// Uniform draw on `S^{p-1}` by normalizing a standard Gaussian vector.
pub fn sample_uniform_sphere<R: Rng + ?Sized>(p: usize, rng: &mut R) -> DVector<f64> {
    assert!(p >= 1, "sphere dimension must be positive");
    loop {
        let g = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let n = g.norm();
        if n > 1e-300 {
            return g / n;
        }
    }
}

/// Uniform draw on the open negative orthant of `S^{m-1}`.
pub fn sample_uniform_negative_orthant<R: Rng + ?Sized>(m: usize, rng: &mut R) -> DVector<f64> {
    let mut x = sample_uniform_sphere(m, rng);
    x.iter_mut().for_each(|v| *v = -v.abs());
    x
}

/// Surface area `2π^{p/2} / Γ(p/2)` of `S^{p-1}`.
pub fn sphere_area(p: usize) -> f64 {
    log_sphere_area(p).exp()
}

pub fn log_sphere_area(p: usize) -> f64 {
    assert!(p >= 1, "sphere dimension must be positive");
    let half = p as f64 / 2.0;
    std::f64::consts::LN_2 + half * std::f64::consts::PI.ln() - ln_gamma(half)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn givens_trivial_cases() {
        let q = OrthogonalMatrix::givens(&[], 0.35, 3).unwrap();
        assert_eq!(q.matrix(), &DMatrix::identity(3, 3));
        let q = OrthogonalMatrix::givens(&[(1, 2)], 0.0, 3).unwrap();
        assert!((q.matrix() - DMatrix::identity(3, 3)).amax() < 1e-15);
    }

    #[test]
    fn givens_q3_orthogonal_with_unit_determinant() {
        let q = OrthogonalMatrix::givens(&[(1, 2), (2, 3)], 0.35, 3).unwrap();
        assert!(q.orthogonality_error() < 1e-14);
        assert!((q.determinant() - 1.0).abs() < 1e-14);
        // left-multiplied product G₂₃ · G₁₂
        let (s, c) = 0.35f64.sin_cos();
        let g12 = DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
        let g23 = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c]);
        assert!((q.matrix() - g23 * g12).amax() < 1e-15);
    }

    #[test]
    fn givens_rejects_bad_pairs() {
        assert!(OrthogonalMatrix::givens(&[(1, 4)], 0.1, 3).is_err());
        assert!(OrthogonalMatrix::givens(&[(2, 2)], 0.1, 3).is_err());
        assert!(OrthogonalMatrix::givens(&[(0, 1)], 0.1, 3).is_err());
    }

    #[test]
    fn exp_skew_identity_and_single_plane() {
        let q = OrthogonalMatrix::givens(&[(1, 2), (2, 3)], 0.35, 3).unwrap();
        assert_eq!(q.exp_skew(&SkewCoordinates::zeros(3)), q);

        let theta = 0.8;
        let r = OrthogonalMatrix::identity(3).exp_skew(&SkewCoordinates(vec![theta, 0.0, 0.0]));
        let g = OrthogonalMatrix::givens(&[(1, 2)], theta, 3).unwrap();
        assert!((r.matrix() - g.matrix()).amax() < 1e-14);
    }

    /// Independent series oracle: plain Taylor series of `exp` with many
    /// terms after repeated halving, evaluated without the production routine.
    fn series_exp(s: &DMatrix<f64>) -> DMatrix<f64> {
        let n = s.nrows();
        let k = 10;
        let scaled = s / 2f64.powi(k);
        let mut term = DMatrix::identity(n, n);
        let mut sum = DMatrix::identity(n, n);
        for j in 1..40 {
            term = &term * &scaled / j as f64;
            sum += &term;
        }
        for _ in 0..k {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn exp_skew_matches_series_oracle() {
        let mut rng = stream(11, "exp-skew", 0);
        for _ in 0..10 {
            let alpha = SkewCoordinates((0..6).map(|_| rng.random_range(-0.3..0.3)).collect());
            let got = OrthogonalMatrix::identity(4).exp_skew(&alpha);
            let want = series_exp(&alpha.to_matrix(4));
            let rel = (got.matrix() - &want).amax() / want.amax();
            assert!(rel < 1e-8, "relative error {rel}");
            assert!(got.orthogonality_error() < ORTHO_TOL);
        }
    }

    #[test]
    fn exp_skew_first_order() {
        let q = OrthogonalMatrix::givens(&[(1, 2), (2, 3)], 0.35, 3).unwrap();
        let dir = [0.3, -0.5, 0.2];
        let mut ratios = Vec::new();
        for h in [1e-2, 5e-3, 2.5e-3] {
            let alpha = SkewCoordinates(dir.iter().map(|d| d * h).collect());
            let s = alpha.to_matrix(3);
            let lin = q.matrix() * (DMatrix::identity(3, 3) + &s);
            let err = (q.exp_skew(&alpha).matrix() - lin).norm();
            ratios.push(err / (h * h));
        }
        // O(h²): err / h² roughly constant
        for r in &ratios {
            assert!((r / ratios[0] - 1.0).abs() < 0.05, "{ratios:?}");
        }
    }

    #[test]
    fn skew_coordinates_round_trip() {
        let a = SkewCoordinates(vec![0.1, -0.2, 0.3]);
        let s = a.to_matrix(3);
        assert_eq!(&s, &(-s.transpose()));
        let b = SkewCoordinates::from_skew_matrix(&s);
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn softplus_inverse_large_argument() {
        assert_eq!(softplus_inv(40.0), 40.0);
        assert!((softplus(softplus_inv(1e-6)) - 1e-6).abs() < 1e-18);
        assert!((softplus(softplus_inv(5.0)) - 5.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn eigen_reparam_round_trip(gaps in proptest::collection::vec(1e-8f64..50.0, 1..9)) {
            let mut lambda = vec![0.0];
            for g in &gaps {
                let last = *lambda.last().unwrap();
                lambda.push(last + g);
            }
            let r = EigenvalueReparam::from_lambda(&lambda, 1e-12);
            let back = r.lambda();
            prop_assert_eq!(back[0], 0.0);
            for w in back.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
            for (a, b) in lambda.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
            }
            let r2 = EigenvalueReparam::from_lambda(&back, 1e-12);
            for (a, b) in r.u().iter().zip(r2.u()) {
                // u is only well conditioned up to the gap size
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()) || (softplus(*a) - softplus(*b)).abs() < 1e-12);
            }
        }

        #[test]
        fn exp_skew_stays_orthogonal(alpha in proptest::collection::vec(-3.0f64..3.0, 10)) {
            let q = OrthogonalMatrix::givens(&[(1, 2), (2, 3), (4, 5)], 0.35, 5).unwrap();
            let r = q.exp_skew(&SkewCoordinates(alpha));
            prop_assert!(r.orthogonality_error() < ORTHO_TOL);
        }
    }

    #[test]
    fn pullback_matches_finite_difference() {
        let r = EigenvalueReparam::from_free(&[0.3, -1.0, 2.0]);
        let w = [0.5, -1.0, 2.0, 0.25];
        let f = |r: &EigenvalueReparam| r.lambda().iter().zip(&w).map(|(l, w)| l * w).sum::<f64>();
        let g = r.pullback(&w);
        for k in 0..3 {
            let mut plus = r.free().to_vec();
            let mut minus = r.free().to_vec();
            plus[k] += 1e-6;
            minus[k] -= 1e-6;
            let fd = (f(&EigenvalueReparam::from_free(&plus)) - f(&EigenvalueReparam::from_free(&minus))) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn sphere_area_closed_forms() {
        use std::f64::consts::PI;
        assert!((sphere_area(2) - 2.0 * PI).abs() < 1e-12);
        assert!((sphere_area(3) - 4.0 * PI).abs() < 1e-12);
        assert!((sphere_area(4) - 2.0 * PI * PI).abs() < 1e-12);
        assert!((sphere_area(1) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_sphere_is_two_points() {
        let mut rng = stream(1, "s0", 0);
        let mut plus = 0;
        let n = 20_000;
        for _ in 0..n {
            let x = sample_uniform_sphere(1, &mut rng);
            assert!(x[0] == 1.0 || x[0] == -1.0);
            if x[0] > 0.0 {
                plus += 1;
            }
        }
        let frac = plus as f64 / n as f64;
        assert!((frac - 0.5).abs() < 3.0 * 0.5 / (n as f64).sqrt());
    }

    #[test]
    fn uniform_sphere_moments() {
        let mut rng = stream(2, "s2", 0);
        let n = 100_000;
        let mut mean = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut sq2 = [0.0; 3];
        for _ in 0..n {
            let x = sample_uniform_sphere(3, &mut rng);
            assert!((x.norm() - 1.0).abs() < 1e-12);
            for i in 0..3 {
                mean[i] += x[i];
                sq[i] += x[i] * x[i];
                sq2[i] += x[i].powi(4);
            }
        }
        let nf = n as f64;
        let bound = 3.0 * (1.0 / 3f64.sqrt()) / nf.sqrt();
        for i in 0..3 {
            assert!((mean[i] / nf).abs() < bound);
            let m2 = sq[i] / nf;
            let se = ((sq2[i] / nf - m2 * m2) / nf).sqrt();
            assert!((m2 - 1.0 / 3.0).abs() < 3.0 * se);
        }
    }

    #[test]
    fn uniform_sphere_octants_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut rng = stream(3, "octant", 0);
        let n = 100_000;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            let x = sample_uniform_sphere(3, &mut rng);
            let cell = (x[0] > 0.0) as usize | ((x[1] > 0.0) as usize) << 1 | ((x[2] > 0.0) as usize) << 2;
            counts[cell] += 1;
        }
        let e = n as f64 / 8.0;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        let pval = 1.0 - ChiSquared::new(7.0).unwrap().cdf(stat);
        assert!(pval > 0.001, "chi-square p = {pval}");
    }

    #[test]
    fn negative_orthant_draws() {
        let mut rng = stream(4, "neg", 0);
        for _ in 0..100 {
            assert_eq!(sample_uniform_negative_orthant(1, &mut rng)[0], -1.0);
        }
        for m in 2..6 {
            for _ in 0..200 {
                let u = sample_uniform_negative_orthant(m, &mut rng);
                assert!(u.max() <= 0.0);
                assert!((u.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn negative_orthant_mean_matches_resampling_oracle() {
        // oracle: mean of -|g₁|/‖g‖ over independent Gaussian pairs
        let mut oracle_rng = stream(5, "oracle", 0);
        let mut acc = 0.0;
        let n_oracle = 1_000_000;
        for _ in 0..n_oracle {
            let a: f64 = oracle_rng.sample(StandardNormal);
            let b: f64 = oracle_rng.sample(StandardNormal);
            acc += -a.abs() / (a * a + b * b).sqrt();
        }
        let oracle = acc / n_oracle as f64;

        let mut rng = stream(6, "neg-mean", 0);
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let u = sample_uniform_negative_orthant(2, &mut rng);
            s += u[0];
            s2 += u[0] * u[0];
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - oracle).abs() < 3.0 * se * (1.0 + 0.1f64).sqrt(), "{mean} vs {oracle}");
    }
}
