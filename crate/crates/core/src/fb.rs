//! Fisher-Bingham distribution on `S^{p-1}`: density `∝ exp(-zᵀAz + γᵀz)`.
//!
//! Parameters are stored in the canonical eigenbasis form `A = Q diag(λ) Qᵀ`
//! with `0 = λ₁ ≤ … ≤ λ_p` and `γ̃ = Qᵀγ`.
//!
//! # Normalizing constant
//!
//! The constant depends on `A` only through `λ` and on `γ` only through `γ̃`.
//! It is evaluated by characteristic-function inversion. For `θ = λ + c` with
//! all `θᵢ > 0`,
//!
//! ```text
//! C(λ, γ̃) = e^c · 2 · ∏ᵢ √(π/θᵢ) e^{γ̃ᵢ²/(4θᵢ)} · f_S(1)
//! ```
//!
//! where `S = Σ yᵢ²`, `yᵢ ~ N(γ̃ᵢ/(2θᵢ), 1/(2θᵢ))` independent. The shift `c`
//! is chosen so that `E[S] = 1`, which places the saddle point of the
//! inversion integral at `t = 0`. The integral of `e^{-it} φ_S(t)` is then
//! taken along the hyperbolic contour `t(u) = u - i·tan(ω)(√(u² + b²) - b)`,
//! on which the integrand decays exponentially, and evaluated with the
//! trapezoidal rule while halving the step until successive values agree.
//! On the real line the integrand only decays like `|t|^{-p/2}`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_4, LN_2, PI};

use crate::error::{Error, Result};
use crate::linalg;
use crate::sphere::{self, OrthogonalMatrix};

/// Tolerance on `‖z‖ - 1` accepted by density evaluation.
pub const UNIT_TOL: f64 = 1e-8;

/// Canonical Fisher-Bingham parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FbParams {
    pub q: OrthogonalMatrix,
    pub lambda: Vec<f64>,
    pub gamma_tilde: Vec<f64>,
}

impl FbParams {
    pub fn new(q: OrthogonalMatrix, lambda: Vec<f64>, gamma_tilde: Vec<f64>) -> Result<Self> {
        let p = q.dim();
        if lambda.len() != p {
            return Err(Error::Dimension { expected: p, got: lambda.len() });
        }
        if gamma_tilde.len() != p {
            return Err(Error::Dimension { expected: p, got: gamma_tilde.len() });
        }
        if lambda[0] != 0.0 {
            return Err(Error::InvalidInput(format!("λ₁ must be 0, got {}", lambda[0])));
        }
        if lambda.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidInput("λ must be nondecreasing".into()));
        }
        if lambda.iter().chain(&gamma_tilde).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        Ok(Self { q, lambda, gamma_tilde })
    }

    /// Uniform distribution on `S^{p-1}`.
    pub fn uniform(p: usize) -> Self {
        Self { q: OrthogonalMatrix::identity(p), lambda: vec![0.0; p], gamma_tilde: vec![0.0; p] }
    }

    /// Canonical parameters from an arbitrary symmetric `A` and `γ`. The
    /// smallest eigenvalue is shifted to zero, which leaves the distribution
    /// unchanged.
    pub fn from_a_gamma(a: &DMatrix<f64>, gamma: &DVector<f64>) -> Result<Self> {
        let (vals, vecs) = linalg::sym_eigen_sorted(a);
        let lmin = vals[0];
        let lambda: Vec<f64> = vals.iter().map(|v| (v - lmin).max(0.0)).collect();
        let q = OrthogonalMatrix::new_checked(vecs, 1e-10)?;
        let gt = q.matrix().transpose() * gamma;
        Self::new(q, lambda, gt.iter().copied().collect())
    }

    pub fn p(&self) -> usize {
        self.lambda.len()
    }

    pub fn a(&self) -> DMatrix<f64> {
        let q = self.q.matrix();
        let lam = DMatrix::from_diagonal(&DVector::from_column_slice(&self.lambda));
        let a = q * lam * q.transpose();
        linalg::sym_part(&a)
    }

    pub fn gamma(&self) -> DVector<f64> {
        self.q.matrix() * DVector::from_column_slice(&self.gamma_tilde)
    }

    /// Replace `Q`, keeping `γ` fixed in the original coordinates.
    pub fn with_rotation(&self, q: OrthogonalMatrix, gamma: &DVector<f64>) -> Self {
        let gt = q.matrix().transpose() * gamma;
        Self { q, lambda: self.lambda.clone(), gamma_tilde: gt.iter().copied().collect() }
    }

    pub fn with_gamma(&self, gamma: &DVector<f64>) -> Self {
        let gt = self.q.matrix().transpose() * gamma;
        Self { q: self.q.clone(), lambda: self.lambda.clone(), gamma_tilde: gt.iter().copied().collect() }
    }

    /// Flip eigenvector signs so the first nonzero entry of each column of `Q`
    /// is positive, negating the matching `γ̃` entries. `A` and `γ` are
    /// unchanged.
    pub fn canonicalize_signs(&mut self) {
        let p = self.p();
        for j in 0..p {
            let col = self.q.matrix().column(j);
            let lead = col.iter().find(|v| v.abs() > 1e-12).copied().unwrap_or(1.0);
            if lead < 0.0 {
                self.q.flip_column(j);
                self.gamma_tilde[j] = -self.gamma_tilde[j];
            }
        }
    }

    /// Sort eigenpairs by `λ` ascending and re-anchor `λ₁ = 0`.
    pub fn canonicalize_order(&mut self) {
        let p = self.p();
        let mut idx: Vec<usize> = (0..p).collect();
        idx.sort_by(|&a, &b| self.lambda[a].total_cmp(&self.lambda[b]));
        if idx.iter().enumerate().any(|(k, &i)| k != i) {
            self.q = self.q.permute_columns(&idx);
            self.lambda = idx.iter().map(|&i| self.lambda[i]).collect();
            self.gamma_tilde = idx.iter().map(|&i| self.gamma_tilde[i]).collect();
        }
        let l0 = self.lambda[0];
        self.lambda.iter_mut().for_each(|l| *l = (*l - l0).max(0.0));
    }
}

/// `-zᵀAz + γᵀz`.
pub fn tilt(z: &DVector<f64>, a: &DMatrix<f64>, gamma: &DVector<f64>) -> f64 {
    -(z.transpose() * a * z)[(0, 0)] + gamma.dot(z)
}

/// Unnormalized log density `-zᵀAz + γᵀz`.
pub fn fb_log_density_unnorm(z: &DVector<f64>, params: &FbParams) -> Result<f64> {
    let n = z.norm();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotUnit(n));
    }
    let y = params.q.matrix().transpose() * z;
    Ok(y.iter()
        .zip(&params.lambda)
        .zip(&params.gamma_tilde)
        .map(|((yi, l), g)| -l * yi * yi + g * yi)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormConstMethod {
    CfInversion,
    McOracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormConst {
    pub log_value: f64,
    pub method: NormConstMethod,
    pub rel_error_estimate: f64,
}

/// `log C(λ, γ̃)` together with `∂/∂λ` and `∂/∂γ̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogNormConstGrad {
    pub value: LogNormConst,
    pub d_lambda: Vec<f64>,
    pub d_gamma: Vec<f64>,
}

const CONTOUR_ANGLE: f64 = FRAC_PI_4;
const INITIAL_STEP: f64 = 0.5;
const REL_TOL: f64 = 1e-14;
const MAX_LEVELS: usize = 9;
const LOG_CUTOFF: f64 = -42.0;
const MAX_NODES: usize = 400_000;

/// Shift `c` such that `Σ γ̃ᵢ²/(4θᵢ²) + 1/(2θᵢ) = 1` for `θ = base + c`,
/// `base ≥ 0` with a zero entry.
fn saddle_shift(base: &[f64], gt: &[f64]) -> f64 {
    let mean_s = |c: f64| -> f64 {
        base.iter().zip(gt).map(|(b, g)| {
            let th = b + c;
            g * g / (4.0 * th * th) + 0.5 / th
        }).sum()
    };
    let mut hi = 1.0;
    while mean_s(hi) > 1.0 {
        hi *= 2.0;
    }
    let mut lo = hi / 2.0;
    while mean_s(lo) < 1.0 && lo > 1e-300 {
        lo /= 2.0;
    }
    // bisection in log space: E[S] is monotone decreasing in c
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if mean_s(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    (lo * hi).sqrt()
}

struct Inversion {
    theta: Vec<f64>,
    kappa: Vec<f64>,
    shift: f64,
    b: f64,
    tan_w: f64,
}

impl Inversion {
    fn new(lambda: &[f64], gt: &[f64]) -> Self {
        let lmin = lambda.iter().copied().fold(f64::INFINITY, f64::min);
        let base: Vec<f64> = lambda.iter().map(|l| l - lmin).collect();
        let c = saddle_shift(&base, gt);
        let theta: Vec<f64> = base.iter().map(|b| b + c).collect();
        let kappa: Vec<f64> = theta.iter().zip(gt).map(|(t, g)| g * g / (4.0 * t)).collect();
        let var: f64 = theta.iter().zip(gt).map(|(t, g)| 0.5 / (t * t) + g * g / (2.0 * t * t * t)).sum();
        Self { theta, kappa, shift: c - lmin, b: 1.0 / var.sqrt(), tan_w: CONTOUR_ANGLE.tan() }
    }

    fn contour(&self, u: f64) -> (Complex64, Complex64) {
        let r = (u * u + self.b * self.b).sqrt();
        let h = self.tan_w * (r - self.b);
        let dh = self.tan_w * u / r;
        (Complex64::new(u, -h), Complex64::new(1.0, -dh))
    }

    /// Exponent `G(t) - G(0)` and, optionally, `∂G/∂θᵢ`, `∂G/∂γ̃ᵢ`.
    fn exponent(&self, t: Complex64, gt: &[f64], grads: Option<(&mut [Complex64], &mut [Complex64])>) -> Complex64 {
        let mut g = Complex64::new(0.0, -1.0) * t;
        let it = Complex64::new(0.0, 1.0) * t;
        match grads {
            None => {
                for (th, k) in self.theta.iter().zip(&self.kappa) {
                    let w = Complex64::new(1.0, 0.0) - it / th;
                    let inv = w.inv();
                    g += -0.5 * w.ln() + k * (inv - 1.0);
                }
            }
            Some((d_theta, d_gamma)) => {
                for i in 0..self.theta.len() {
                    let th = self.theta[i];
                    let k = self.kappa[i];
                    let w = Complex64::new(1.0, 0.0) - it / th;
                    let inv = w.inv();
                    let one_minus_over_w = inv - 1.0;
                    g += -0.5 * w.ln() + k * one_minus_over_w;
                    d_gamma[i] = one_minus_over_w * (gt[i] / (2.0 * th));
                    d_theta[i] = -one_minus_over_w / th * (0.5 + k + k * inv);
                }
            }
        }
        g
    }

    /// Sum of `Re F(u_k)` over `u_k = offset + k·step`, `k ≥ 0`, until the
    /// integrand stays below the truncation threshold.
    fn sweep(&self, gt: &[f64], step: f64, offset: f64, want_grad: bool, acc: &mut Accum) -> Result<()> {
        let p = self.theta.len();
        let mut dth = vec![Complex64::new(0.0, 0.0); p];
        let mut dg = vec![Complex64::new(0.0, 0.0); p];
        let mut below = 0usize;
        let mut k = 0usize;
        loop {
            let u = offset + k as f64 * step;
            let (t, dt) = self.contour(u);
            let weight = if u == 0.0 { 0.5 } else { 1.0 };
            let e = if want_grad {
                self.exponent(t, gt, Some((&mut dth, &mut dg)))
            } else {
                self.exponent(t, gt, None)
            };
            if !e.re.is_finite() || !e.im.is_finite() {
                return Err(Error::Numerical("non-finite inversion integrand".into()));
            }
            let f = e.exp() * dt * weight;
            acc.value += f.re;
            if want_grad {
                for i in 0..p {
                    acc.d_theta[i] += (f * dth[i]).re;
                    acc.d_gamma[i] += (f * dg[i]).re;
                }
            }
            if e.re < LOG_CUTOFF {
                below += 1;
                if below >= 4 {
                    break;
                }
            } else {
                below = 0;
            }
            k += 1;
            if k > MAX_NODES {
                return Err(Error::Numerical("inversion truncation did not converge".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone)]
struct Accum {
    value: f64,
    d_theta: Vec<f64>,
    d_gamma: Vec<f64>,
}

fn check_inputs(lambda: &[f64], gt: &[f64]) -> Result<()> {
    if lambda.len() != gt.len() {
        return Err(Error::Dimension { expected: lambda.len(), got: gt.len() });
    }
    if lambda.is_empty() {
        return Err(Error::InvalidInput("empty parameter vector".into()));
    }
    if lambda.iter().chain(gt).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite parameter".into()));
    }
    Ok(())
}

fn invert(lambda: &[f64], gt: &[f64], want_grad: bool) -> Result<(LogNormConst, Option<(Vec<f64>, Vec<f64>)>)> {
    check_inputs(lambda, gt)?;
    let p = lambda.len();
    let inv = Inversion::new(lambda, gt);
    let sd_inv = inv.b;
    let mut step = INITIAL_STEP * sd_inv;
    let mut acc = Accum { value: 0.0, d_theta: vec![0.0; p], d_gamma: vec![0.0; p] };
    inv.sweep(gt, step, 0.0, want_grad, &mut acc)?;
    let mut estimate = acc.value * step / PI;
    let mut rel_err = f64::INFINITY;
    for _ in 0..MAX_LEVELS {
        // halving the step adds the midpoints of the current grid
        inv.sweep(gt, step, step / 2.0, want_grad, &mut acc)?;
        step /= 2.0;
        let next = acc.value * step / PI;
        rel_err = ((next - estimate) / next).abs();
        estimate = next;
        if rel_err < REL_TOL {
            break;
        }
    }
    if !(estimate > 0.0) || !estimate.is_finite() {
        return Err(Error::Numerical(format!("inversion produced non-positive density {estimate}")));
    }
    if rel_err > 1e-8 {
        return Err(Error::Numerical(format!("inversion did not converge (rel change {rel_err:e})")));
    }
    let log_value = inv.shift
        + LN_2
        + inv.theta.iter().map(|t| 0.5 * (PI / t).ln()).sum::<f64>()
        + inv.kappa.iter().sum::<f64>()
        + estimate.ln();
    let value = LogNormConst { log_value, method: NormConstMethod::CfInversion, rel_error_estimate: rel_err.max(f64::EPSILON) };
    if !want_grad {
        return Ok((value, None));
    }
    let total = acc.value;
    let d_lambda: Vec<f64> = (0..p)
        .map(|i| {
            let th = inv.theta[i];
            -0.5 / th - gt[i] * gt[i] / (4.0 * th * th) + acc.d_theta[i] / total
        })
        .collect();
    let d_gamma: Vec<f64> = (0..p).map(|i| gt[i] / (2.0 * inv.theta[i]) + acc.d_gamma[i] / total).collect();
    Ok((value, Some((d_lambda, d_gamma))))
}

/// `log C(λ, γ̃)` by characteristic-function inversion.
pub fn log_norm_const(lambda: &[f64], gamma_tilde: &[f64]) -> Result<LogNormConst> {
    invert(lambda, gamma_tilde, false).map(|(v, _)| v)
}

/// `log C(λ, γ̃)` with its exact gradient: `∂/∂λᵢ = -E[xᵢ²]`,
/// `∂/∂γ̃ᵢ = E[xᵢ]` under `FB(diag λ, γ̃)`. Both come from differentiating
/// the inversion integrand, evaluated on the same nodes as the value.
pub fn log_norm_const_grad(lambda: &[f64], gamma_tilde: &[f64]) -> Result<LogNormConstGrad> {
    let (value, grads) = invert(lambda, gamma_tilde, true)?;
    let (d_lambda, d_gamma) = grads.expect("gradient requested");
    Ok(LogNormConstGrad { value, d_lambda, d_gamma })
}

/// Gradient only; see [`log_norm_const_grad`].
pub fn grad_log_norm_const(lambda: &[f64], gamma_tilde: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    log_norm_const_grad(lambda, gamma_tilde).map(|g| (g.d_lambda, g.d_gamma))
}

/// Monte Carlo estimate of `C(λ, γ̃)`: sphere area times the sample mean of
/// `exp(-Σλᵢxᵢ² + γ̃ᵀx)` over uniform draws. Returns `(estimate, standard error)`.
pub fn mc_norm_const_oracle<R: Rng + ?Sized>(lambda: &[f64], gamma_tilde: &[f64], n_samples: usize, rng: &mut R) -> (f64, f64) {
    assert!(n_samples >= 1000, "oracle needs at least 10³ draws");
    let p = lambda.len();
    let area = sphere::sphere_area(p);
    if lambda.iter().chain(gamma_tilde).all(|v| *v == 0.0) {
        return (area, 0.0);
    }
    // accumulate relative to a reference exponent to avoid overflow
    let reference: f64 = gamma_tilde.iter().map(|g| g.abs()).sum::<f64>() - lambda.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n_samples {
        let x = sphere::sample_uniform_sphere(p, rng);
        let e: f64 = (0..p).map(|i| -lambda[i] * x[i] * x[i] + gamma_tilde[i] * x[i]).sum();
        let v = (e - reference).exp();
        s += v;
        s2 += v * v;
    }
    let n = n_samples as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    let scale = area * reference.exp();
    (scale * mean, scale * (var / n).sqrt())
}

/// Root `b₀ > 0` of `Σᵢ 1/(b₀ + 2λᵢ) = 1` for nonnegative `λ`, by bisection
/// inside `max_k (k - (2/k) Σ_{i≤k} λ₍ᵢ₎) ≤ b₀ ≤ p` (λ sorted ascending).
pub fn solve_b0(lambda_shifted: &[f64]) -> f64 {
    let p = lambda_shifted.len();
    let (lo, hi) = b0_bounds(lambda_shifted);
    let f = |b: f64| lambda_shifted.iter().map(|l| 1.0 / (b + 2.0 * l)).sum::<f64>() - 1.0;
    let lmin = lambda_shifted.iter().copied().fold(f64::INFINITY, f64::min);
    let mut lo = lo.max(-2.0 * lmin + 1e-300).max(f64::MIN_POSITIVE);
    let mut hi = hi.max(lo);
    if p == 0 {
        return 0.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Lower and upper bracket for [`solve_b0`].
pub fn b0_bounds(lambda_shifted: &[f64]) -> (f64, f64) {
    let mut sorted = lambda_shifted.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut acc = 0.0;
    let mut lower = f64::NEG_INFINITY;
    for (i, l) in sorted.iter().enumerate() {
        acc += l;
        let k = (i + 1) as f64;
        lower = lower.max(k - 2.0 / k * acc);
    }
    (lower, lambda_shifted.len() as f64)
}

/// Rejection sampler with an angular central Gaussian envelope.
///
/// Setup is done once per parameter value; [`FbSampler::sample`] then draws
/// exact Fisher-Bingham variates.
#[derive(Debug, Clone)]
pub struct FbSampler {
    p: usize,
    q: DMatrix<f64>,
    lambda: Vec<f64>,
    gamma_tilde: Vec<f64>,
    /// columns scaled by `1/√ω` so that `y = proposal · ξ ~ N(0, Ω⁻¹)`
    proposal: DMatrix<f64>,
    omega: DMatrix<f64>,
    log_bound: f64,
    b0: f64,
}

impl FbSampler {
    pub fn new(params: &FbParams) -> Self {
        let p = params.p();
        let lam = &params.lambda;
        let gt = DVector::from_column_slice(&params.gamma_tilde);
        let gnorm = gt.norm();
        let mut a1 = DMatrix::from_diagonal(&DVector::from_column_slice(lam));
        if gnorm > 0.0 {
            let proj = DMatrix::identity(p, p) - &gt * gt.transpose() / (gnorm * gnorm);
            a1 += proj * (gnorm / 2.0);
        }
        let (vals, vecs) = linalg::sym_eigen_sorted(&a1);
        let lmin = vals[0];
        let shifted: Vec<f64> = vals.iter().map(|v| (v - lmin).max(0.0)).collect();
        let b0 = solve_b0(&shifted);
        let omega_vals: Vec<f64> = shifted.iter().map(|l| 1.0 + 2.0 * l / b0).collect();
        let mut proposal = vecs.clone();
        for (j, w) in omega_vals.iter().enumerate() {
            let mut c = proposal.column_mut(j);
            c /= w.sqrt();
        }
        let omega = &vecs * DMatrix::from_diagonal(&DVector::from_vec(omega_vals)) * vecs.transpose();
        let pf = p as f64;
        let log_bound = gnorm - lmin - (pf - b0) / 2.0 + pf / 2.0 * (pf / b0).ln();
        Self {
            p,
            q: params.q.matrix().clone(),
            lambda: lam.clone(),
            gamma_tilde: params.gamma_tilde.clone(),
            proposal,
            omega,
            log_bound,
            b0,
        }
    }

    pub fn b0(&self) -> f64 {
        self.b0
    }

    /// Log acceptance ratio for an eigenbasis point `x` on the sphere.
    pub fn log_acceptance_ratio(&self, x: &DVector<f64>) -> f64 {
        let target: f64 = (0..self.p).map(|i| -self.lambda[i] * x[i] * x[i] + self.gamma_tilde[i] * x[i]).sum();
        let quad = (x.transpose() * &self.omega * x)[(0, 0)];
        target - (self.log_bound - self.p as f64 / 2.0 * quad.ln())
    }

    /// One exact draw in the original coordinates, with the number of
    /// proposals used.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(DVector<f64>, usize)> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let xi = DVector::from_iterator(self.p, (0..self.p).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)));
            let y = &self.proposal * xi;
            let n = y.norm();
            if n == 0.0 {
                continue;
            }
            let x = y / n;
            let log_r = self.log_acceptance_ratio(&x);
            if log_r > 1e-9 {
                return Err(Error::Numerical(format!("acceptance ratio exceeds one: log r = {log_r:e}")));
            }
            let u: f64 = rng.random();
            if u.ln() < log_r {
                return Ok((&self.q * x, attempts));
            }
        }
    }
}

/// Exact draw from `FB(A, γ)` by rejection; returns the draw and the number
/// of proposals used.
pub fn fb_sample<R: Rng + ?Sized>(params: &FbParams, rng: &mut R) -> Result<(DVector<f64>, usize)> {
    FbSampler::new(params).sample(rng)
}
