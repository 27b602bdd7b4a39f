//! Block-coordinate Monte Carlo EM for RRFB parameters.
//!
//! The E-step replaces the sufficient statistics of the Fisher-Bingham
//! log-likelihood by posterior expectations,
//!
//! ```text
//! 𝒬(θ) = -log C(λ, γ̃) - tr(A S̄₁) + γᵀS̄₂      (per observation)
//! ```
//!
//! and the M-step increases 𝒬 one block at a time: `γ̃`, then `λ` through
//! the softplus gaps, then `Q` by ascent on the orthogonal group.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

use crate::chart::Chart;
use crate::error::{Error, Result};
use crate::fb::{self, FbParams};
use crate::linalg;
use crate::optim::{bfgs_minimize, BfgsOptions};
use crate::rrfb::{Evaluation, LikelihoodContext, ParamCache, RrfbObservation, SchemeSizes};
use crate::sphere::{EigenvalueReparam, OrthogonalMatrix, SkewCoordinates};

/// Where the E-step latent draws come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DrawPolicy {
    /// new importance draws at every iteration
    Refresh,
    /// one set of draws for the whole run, shared with the monitored
    /// likelihood; EM is then an exact ascent method on that likelihood
    Frozen,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iter: usize,
    pub rel_tol_loglik: f64,
    pub rel_tol_params: f64,
    pub sizes: SchemeSizes,
    pub draws: DrawPolicy,
    /// quasi-Newton iteration cap for the γ̃ and λ blocks
    pub inner_max_iter: usize,
    /// ascent step cap for the Q block
    pub q_max_steps: usize,
    pub seed: u64,
    pub c_gamma: f64,
    pub c_lambda: f64,
    /// follow the block pass with a joint quasi-Newton step on 𝒬
    pub joint_refine: bool,
    /// compare block gradients against finite differences at every M-step
    pub debug_gradients: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tol_loglik: 1e-4,
            rel_tol_params: 1e-4,
            sizes: SchemeSizes::ESTEP,
            draws: DrawPolicy::Frozen,
            inner_max_iter: 50,
            q_max_steps: 25,
            seed: 0,
            c_gamma: 0.5,
            c_lambda: 10.0,
            joint_refine: true,
            debug_gradients: false,
        }
    }
}

/// Averaged posterior sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub s1_bar: DMatrix<f64>,
    pub s2_bar: DVector<f64>,
}

impl SufficientStats {
    pub fn from_evaluation(eval: &Evaluation) -> Self {
        let n = eval.moments.len() as f64;
        let p = eval.moments[0].m2.len();
        let mut s1 = DMatrix::zeros(p, p);
        let mut s2 = DVector::zeros(p);
        for m in &eval.moments {
            s1 += &m.m1;
            s2 += &m.m2;
        }
        Self { s1_bar: linalg::sym_part(&(s1 / n)), s2_bar: s2 / n }
    }
}

/// Per-observation 𝒬 at `params`, given `log C` at `params`.
pub fn q_value(stats: &SufficientStats, params: &FbParams, log_c: f64) -> f64 {
    let q = params.q.matrix();
    let b = q.transpose() * &stats.s1_bar * q;
    let s2t = q.transpose() * &stats.s2_bar;
    let quad: f64 = params.lambda.iter().enumerate().map(|(j, l)| l * b[(j, j)]).sum();
    let lin: f64 = params.gamma_tilde.iter().zip(s2t.iter()).map(|(g, s)| g * s).sum();
    -log_c - quad + lin
}

/// 𝒬 values around one M-step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MStepReport {
    pub q_start: f64,
    pub q_after_gamma: f64,
    pub q_after_lambda: f64,
    pub q_after_rotation: f64,
    pub q_after_joint: f64,
    pub gamma_iterations: usize,
    pub lambda_iterations: usize,
    pub rotation_steps: usize,
    pub joint_iterations: usize,
    /// a block made no progress because its line search failed
    pub line_search_failed: bool,
    /// largest relative gradient error of the three blocks (debug mode)
    pub gradient_check: Option<f64>,
}

impl MStepReport {
    pub fn is_monotone(&self, tol: f64) -> bool {
        self.q_after_gamma >= self.q_start - tol
            && self.q_after_lambda >= self.q_after_gamma - tol
            && self.q_after_rotation >= self.q_after_lambda - tol
            && self.q_after_joint >= self.q_after_rotation - tol
    }
}

const LAMBDA_GAP_FLOOR: f64 = 1e-10;

fn gamma_objective(lambda: &[f64], b: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    let g = fb::log_norm_const_grad(lambda, gt)?;
    let f = g.value.log_value - gt.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let grad = g.d_gamma.iter().zip(b).map(|(d, y)| d - y).collect();
    Ok((f, grad))
}

fn lambda_objective(free: &[f64], diag_b: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    let re = EigenvalueReparam::from_free(free);
    let lambda = re.lambda();
    let g = fb::log_norm_const_grad(&lambda, gt)?;
    let f = g.value.log_value + lambda.iter().zip(diag_b).map(|(l, b)| l * b).sum::<f64>();
    let dl: Vec<f64> = g.d_lambda.iter().zip(diag_b).map(|(d, b)| d + b).collect();
    Ok((f, re.pullback(&dl)))
}

/// Q-dependent part of 𝒬: `-tr(ΛQᵀS̄₁Q) + γ̃ᵀQᵀS̄₂`.
fn rotation_objective(stats: &SufficientStats, q: &DMatrix<f64>, lambda: &[f64], gt: &[f64]) -> f64 {
    let sq = &stats.s1_bar * q;
    let mut quad = 0.0;
    for j in 0..lambda.len() {
        quad += lambda[j] * q.column(j).dot(&sq.column(j));
    }
    let s2t = q.transpose() * &stats.s2_bar;
    -quad + gt.iter().zip(s2t.iter()).map(|(g, s)| g * s).sum::<f64>()
}

/// Euclidean gradient of [`rotation_objective`]: `-2S̄₁QΛ + S̄₂γ̃ᵀ`.
pub fn rotation_gradient(stats: &SufficientStats, q: &DMatrix<f64>, lambda: &[f64], gt: &[f64]) -> DMatrix<f64> {
    let lam = DMatrix::from_diagonal(&DVector::from_column_slice(lambda));
    -2.0 * &stats.s1_bar * q * lam + &stats.s2_bar * DVector::from_column_slice(gt).transpose()
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-6))
}

fn check_gradients(stats: &SufficientStats, params: &FbParams) -> Result<f64> {
    let h = 1e-5;
    let q = params.q.matrix();
    let b: Vec<f64> = (q.transpose() * &stats.s2_bar).iter().copied().collect();
    let bm = q.transpose() * &stats.s1_bar * q;
    let diag_b: Vec<f64> = (0..params.p()).map(|j| bm[(j, j)]).collect();
    let mut worst = 0.0f64;
    let gt = &params.gamma_tilde;
    let (_, g) = gamma_objective(&params.lambda, &b, gt)?;
    for i in 0..gt.len() {
        let (mut a, mut c) = (gt.clone(), gt.clone());
        a[i] += h;
        c[i] -= h;
        let fd = (gamma_objective(&params.lambda, &b, &a)?.0 - gamma_objective(&params.lambda, &b, &c)?.0) / (2.0 * h);
        worst = worst.max(relative_error(fd, g[i]));
    }
    let free = EigenvalueReparam::from_lambda(&params.lambda, LAMBDA_GAP_FLOOR).free().to_vec();
    let (_, g) = lambda_objective(&free, &diag_b, gt)?;
    for i in 0..free.len() {
        let (mut a, mut c) = (free.clone(), free.clone());
        a[i] += h;
        c[i] -= h;
        let fd = (lambda_objective(&a, &diag_b, gt)?.0 - lambda_objective(&c, &diag_b, gt)?.0) / (2.0 * h);
        worst = worst.max(relative_error(fd, g[i]));
    }
    let p = params.p();
    let gq = rotation_gradient(stats, q, &params.lambda, gt);
    for k in 0..linalg::skew_dim(p) {
        let e = linalg::skew_basis(p, k);
        let analytic = (gq.transpose() * q * &e).trace();
        let step = |t: f64| {
            let mut a = SkewCoordinates::zeros(p);
            a.0[k] = t;
            rotation_objective(stats, params.q.exp_skew(&a).matrix(), &params.lambda, gt)
        };
        let fd = (step(h) - step(-h)) / (2.0 * h);
        worst = worst.max(relative_error(fd, analytic));
    }
    Ok(worst)
}

/// One generalized M-step. Every block either increases 𝒬 or is left
/// unchanged.
pub fn m_step(stats: &SufficientStats, params: &FbParams, config: &FitConfig) -> Result<(FbParams, MStepReport)> {
    let p = params.p();
    let mut report = MStepReport::default();
    if config.debug_gradients {
        report.gradient_check = Some(check_gradients(stats, params)?);
    }
    let q = params.q.matrix().clone();
    let log_c0 = fb::log_norm_const(&params.lambda, &params.gamma_tilde)?.log_value;
    report.q_start = q_value(stats, params, log_c0);
    let opts = BfgsOptions { max_iter: config.inner_max_iter, gtol: 1e-10, ..Default::default() };

    // γ̃ block: concave in γ̃
    let b: Vec<f64> = (q.transpose() * &stats.s2_bar).iter().copied().collect();
    let lambda = params.lambda.clone();
    let res = bfgs_minimize(&params.gamma_tilde, |g| gamma_objective(&lambda, &b, g), &opts)?;
    report.gamma_iterations = res.iterations;
    report.line_search_failed |= res.line_search_failed;
    let mut cur = params.clone();
    let f0 = gamma_objective(&lambda, &b, &params.gamma_tilde)?.0;
    if res.f <= f0 {
        cur.gamma_tilde = res.x;
    }
    let log_c1 = fb::log_norm_const(&cur.lambda, &cur.gamma_tilde)?.log_value;
    report.q_after_gamma = q_value(stats, &cur, log_c1);

    // λ block through the softplus gaps
    let bm = q.transpose() * &stats.s1_bar * &q;
    let diag_b: Vec<f64> = (0..p).map(|j| bm[(j, j)]).collect();
    if p > 1 {
        let start = EigenvalueReparam::from_lambda(&cur.lambda, LAMBDA_GAP_FLOOR);
        let gt = cur.gamma_tilde.clone();
        let f_start = lambda_objective(start.free(), &diag_b, &gt)?.0;
        let res = bfgs_minimize(start.free(), |u| lambda_objective(u, &diag_b, &gt), &opts)?;
        report.lambda_iterations = res.iterations;
        report.line_search_failed |= res.line_search_failed;
        if res.f <= f_start {
            let new_lambda = EigenvalueReparam::from_free(&res.x).lambda();
            let mut trial = cur.clone();
            trial.lambda = new_lambda;
            let lc = fb::log_norm_const(&trial.lambda, &trial.gamma_tilde)?.log_value;
            let qv = q_value(stats, &trial, lc);
            if qv >= report.q_after_gamma {
                cur = trial;
                report.q_after_lambda = qv;
            } else {
                report.q_after_lambda = report.q_after_gamma;
            }
        } else {
            report.q_after_lambda = report.q_after_gamma;
        }
    } else {
        report.q_after_lambda = report.q_after_gamma;
    }

    // Q block: Riemannian ascent with retraction Q·exp(tΩ)
    let gamma = cur.gamma();
    let (new_q, steps, failed) = rotation_ascent(stats, &cur, config.q_max_steps)?;
    report.rotation_steps = steps;
    report.line_search_failed |= failed;
    cur = cur.with_rotation(new_q, &gamma);
    let log_c = fb::log_norm_const(&cur.lambda, &cur.gamma_tilde)?.log_value;
    report.q_after_rotation = q_value(stats, &cur, log_c);
    report.q_after_joint = report.q_after_rotation;

    // joint refinement: the blocks are strongly coupled when the
    // distribution is concentrated, so a pass of block updates alone moves
    // along the ridge very slowly
    if config.joint_refine {
        let chart = Chart::new(cur.q.clone());
        let x0 = chart.coordinates(&cur);
        let fg = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let pt = chart.point(x)?;
            let v = chart.value(&pt, &stats.s1_bar, &stats.s2_bar);
            let g = chart.data_gradient(&pt, &stats.s1_bar, &stats.s2_bar);
            let gc = chart.log_c_gradient(&pt);
            Ok((-v, g.iter().zip(gc).map(|(a, b)| -(a + b)).collect()))
        };
        let jopts = BfgsOptions { max_iter: config.inner_max_iter, gtol: 1e-10, max_step: 1.0, ..Default::default() };
        let res = bfgs_minimize(&x0, fg, &jopts)?;
        report.joint_iterations = res.iterations;
        let trial = chart.params(&res.x)?;
        let lc = fb::log_norm_const(&trial.lambda, &trial.gamma_tilde)?.log_value;
        let qv = q_value(stats, &trial, lc);
        if qv >= report.q_after_rotation {
            cur = trial;
            report.q_after_joint = qv;
        }
    }
    cur.canonicalize_order();
    cur.canonicalize_signs();
    Ok((cur, report))
}

/// Q block: quasi-Newton in skew coordinates around the current `Q`,
/// `Q(α) = Q·exp(S(α))`, holding `γ = Qγ̃` fixed so that
///
/// ```text
/// φ(Q) = -log C(λ, Qᵀγ) - tr(ΛQᵀS̄₁Q) + γᵀS̄₂
/// ```
///
/// with Euclidean gradient `-2S̄₁QΛ - γ·(∂log C/∂γ̃)ᵀ` and the exact chain
/// rule `∂/∂αₖ = ⟨G(Q(α)), Q·Dexp_{S(α)}[Eₖ]⟩`.
fn rotation_ascent(stats: &SufficientStats, params: &FbParams, max_steps: usize) -> Result<(OrthogonalMatrix, usize, bool)> {
    let p = params.p();
    let base = params.q.clone();
    if p < 2 {
        return Ok((base, 0, false));
    }
    let lam = &params.lambda;
    let gamma = params.gamma();
    let dim = linalg::skew_dim(p);
    let basis: Vec<DMatrix<f64>> = (0..dim).map(|k| linalg::skew_basis(p, k)).collect();
    let lam_m = DMatrix::from_diagonal(&DVector::from_column_slice(lam));
    let value = |q: &DMatrix<f64>| -> Result<(f64, DMatrix<f64>)> {
        let gt: Vec<f64> = (q.transpose() * &gamma).iter().copied().collect();
        let lg = fb::log_norm_const_grad(lam, &gt)?;
        let sq = &stats.s1_bar * q;
        let quad: f64 = (0..p).map(|j| lam[j] * q.column(j).dot(&sq.column(j))).sum();
        let f = lg.value.log_value + quad - gamma.dot(&stats.s2_bar);
        // gradient of f (the negated objective)
        let g = 2.0 * sq * &lam_m + &gamma * DVector::from_vec(lg.d_gamma).transpose();
        Ok((f, g))
    };
    let fg = |alpha: &[f64]| -> Result<(f64, Vec<f64>)> {
        let a = SkewCoordinates(alpha.to_vec());
        let qa = base.exp_skew(&a);
        let (f, g) = value(qa.matrix())?;
        let at_origin = alpha.iter().all(|v| *v == 0.0);
        let s = a.to_matrix(p);
        let lhs = base.matrix().transpose() * g;
        let grad = basis
            .iter()
            .map(|e| {
                let d = if at_origin { e.clone() } else { linalg::expm_frechet(&s, e) };
                lhs.dot(&d)
            })
            .collect();
        Ok((f, grad))
    };
    let opts = BfgsOptions { max_iter: max_steps, gtol: 1e-11, max_step: 0.5, ..Default::default() };
    let res = bfgs_minimize(&vec![0.0; dim], fg, &opts)?;
    let f0 = value(base.matrix())?.0;
    if !(res.f < f0) {
        return Ok((base, res.iterations, res.line_search_failed));
    }
    let mut q = base.exp_skew(&SkewCoordinates(res.x));
    // guard the orthogonality invariant after repeated retractions
    if q.orthogonality_error() > 1e-12 {
        q = OrthogonalMatrix::from_matrix_reorthonormalized(q.matrix());
    }
    Ok((q, res.iterations, res.line_search_failed))
}

/// Moment-based starting value.
pub fn initialize(data: &[RrfbObservation], config: &FitConfig) -> Result<FbParams> {
    let n = data.len();
    let p = data.first().map_or(0, |o| o.p());
    if n < p + 1 || p == 0 {
        return Err(Error::Precondition(format!("need n ≥ p + 1 observations, got n = {n}, p = {p}")));
    }
    let mut xbar = DVector::zeros(p);
    for o in data {
        if o.p() != p {
            return Err(Error::Dimension { expected: p, got: o.p() });
        }
        xbar += &o.x;
    }
    xbar /= n as f64;
    let r = xbar.norm();
    if r >= 1.0 - 1e-12 {
        return Err(Error::Precondition("mean resultant length is 1: all observations coincide".into()));
    }
    let mu = &xbar / r;
    let pf = p as f64;
    let kappa = r * (pf - r * r) / (1.0 - r * r);
    let gamma0 = &mu * (config.c_gamma * kappa);
    let mut c = DMatrix::zeros(p, p);
    for o in data {
        let y = &o.x - &mu * o.x.dot(&mu);
        c += &y * y.transpose();
    }
    c /= n as f64;
    let (vals, vecs) = linalg::sym_eigen_sorted(&c);
    // decreasing order
    let nu: Vec<f64> = vals.iter().rev().copied().collect();
    let mut basis = DMatrix::zeros(p, p);
    basis.set_column(0, &mu);
    for j in 0..p - 1 {
        let v = vecs.column(p - 1 - j).into_owned();
        basis.set_column(j + 1, &(&v - &mu * v.dot(&mu)));
    }
    let q0 = OrthogonalMatrix::new_checked(linalg::orthonormalize(&basis, 1e-8), 1e-10)?;
    let spread = nu.iter().map(|v| nu[0] - v).fold(0.0f64, f64::max);
    let mut lambda: Vec<f64> = if spread > 0.0 {
        nu.iter().map(|v| config.c_lambda * (nu[0] - v) / spread).collect()
    } else {
        (0..p).map(|j| config.c_lambda * j as f64 / (pf - 1.0).max(1.0)).collect()
    };
    // ties would give infinite softplus coordinates
    let min_gap = 1e-6 * config.c_lambda;
    for j in 1..p {
        lambda[j] = lambda[j].max(lambda[j - 1] + min_gap);
    }
    let top = lambda[p - 1];
    if top > 0.0 {
        lambda.iter_mut().for_each(|l| *l *= config.c_lambda / top);
    }
    lambda[0] = 0.0;
    let gt: Vec<f64> = (q0.matrix().transpose() * gamma0).iter().copied().collect();
    let mut params = FbParams::new(q0, lambda, gt)?;
    params.canonicalize_signs();
    Ok(params)
}

/// Posterior sufficient statistics of `ctx` at `params`.
pub fn e_step(ctx: &LikelihoodContext, params: &FbParams) -> Result<(SufficientStats, Evaluation)> {
    let pc = ParamCache::new(params)?;
    let eval = ctx.evaluate(&pc).map_err(|e| match e {
        Error::Numerical(msg) => Error::Numerical(format!("E-step: {msg}")),
        other => other,
    })?;
    Ok((SufficientStats::from_evaluation(&eval), eval))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// monitored observed log-likelihood (sum over observations) at the
    /// parameters entering this iteration
    pub loglik: f64,
    pub mstep: MStepReport,
    pub param_change: f64,
    pub min_ess: f64,
    pub ess_warnings: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FitTrace {
    pub records: Vec<IterationRecord>,
}

impl FitTrace {
    pub fn q_monotone(&self, tol: f64) -> bool {
        self.records.iter().all(|r| r.mstep.is_monotone(tol))
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: FbParams,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
    pub trace: FitTrace,
}

/// Serialized layout of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitJson {
    pub p: usize,
    pub lambda: Vec<f64>,
    #[serde(rename = "Q")]
    pub q: Vec<f64>,
    pub gamma_tilde: Vec<f64>,
    pub gamma: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
}

impl FitResult {
    pub fn to_json(&self) -> FitJson {
        FitJson {
            p: self.params.p(),
            lambda: self.params.lambda.clone(),
            q: self.params.q.to_row_major(),
            gamma_tilde: self.params.gamma_tilde.clone(),
            gamma: self.params.gamma().iter().copied().collect(),
            loglik: self.loglik,
            iterations: self.iterations,
            converged: self.converged,
            seed: self.seed,
        }
    }
}

impl FitJson {
    pub fn params(&self) -> Result<FbParams> {
        FbParams::new(OrthogonalMatrix::from_row_major(self.p, &self.q)?, self.lambda.clone(), self.gamma_tilde.clone())
    }
}

fn param_distance(a: &FbParams, b: &FbParams) -> f64 {
    let da = (a.a() - b.a()).norm() + (a.gamma() - b.gamma()).norm();
    da / (b.a().norm() + b.gamma().norm() + 1e-12)
}

/// Run MCEM from the moment-based start.
pub fn fit(data: &[RrfbObservation], config: &FitConfig) -> Result<FitResult> {
    let init = initialize(data, config)?;
    let ctx = LikelihoodContext::new(data.to_vec(), config.seed, 0, config.sizes);
    fit_from(&ctx, init, config)
}

/// Run MCEM from `init`; `ctx` supplies the monitored (frozen) likelihood.
pub fn fit_from(ctx: &LikelihoodContext, init: FbParams, config: &FitConfig) -> Result<FitResult> {
    let n = ctx.len();
    let p = ctx.p();
    if n < p + 1 {
        return Err(Error::Precondition(format!("need n ≥ p + 1 observations, got n = {n}, p = {p}")));
    }
    let obs: Arc<Vec<RrfbObservation>> = ctx.obs.clone();
    let mut trace = FitTrace::default();
    let mut params = init;
    let mut prev: Option<(FbParams, f64)> = None;
    let mut best: Option<(FbParams, f64)> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_ll = f64::NAN;
    for iter in 0..config.max_iter {
        let clock = Instant::now();
        let (stats, eval, ll) = match config.draws {
            DrawPolicy::Frozen => {
                let (s, e) = e_step(ctx, &params)?;
                let ll = e.total_loglik();
                (s, e, ll)
            }
            DrawPolicy::Refresh => {
                let fresh = LikelihoodContext::shared(obs.clone(), ctx.seed, iter as u64 + 1, ctx.sizes);
                let (s, e) = e_step(&fresh, &params)?;
                (s, e, ctx.loglik(&params)?)
            }
        };
        last_ll = ll;
        iterations = iter;
        if best.as_ref().is_none_or(|(_, b)| ll > *b) {
            best = Some((params.clone(), ll));
        }
        let change = prev.as_ref().map_or(f64::INFINITY, |(pp, _)| param_distance(&params, pp));
        if let Some((_, pll)) = &prev {
            let rel = (ll - pll).abs() / pll.abs().max(1.0);
            if rel < config.rel_tol_loglik && change < config.rel_tol_params {
                converged = true;
                trace.records.push(IterationRecord {
                    iteration: iter,
                    loglik: ll,
                    mstep: MStepReport::default(),
                    param_change: change,
                    min_ess: eval.min_ess,
                    ess_warnings: eval.ess_warnings.len(),
                    wall_ms: clock.elapsed().as_secs_f64() * 1e3,
                });
                break;
            }
        }
        let (next, report) = m_step(&stats, &params, config)?;
        trace.records.push(IterationRecord {
            iteration: iter,
            loglik: ll,
            mstep: report,
            param_change: change,
            min_ess: eval.min_ess,
            ess_warnings: eval.ess_warnings.len(),
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        });
        prev = Some((params, ll));
        params = next;
        iterations = iter + 1;
    }
    let (params, loglik) = if converged {
        (params, last_ll)
    } else {
        best.expect("at least one iteration")
    };
    Ok(FitResult { params, loglik, iterations, converged, seed: config.seed, trace })
}
