//! Two-sample inference for `H₀: γ₀ = γ₁` with a shared `A`: a robust
//! score test on the RRFB likelihood, and PERMANOVA baselines.
//!
//! Parameters are `θ = (ψ, η)` with `ψ = (γ₁ - γ₀)/2` and nuisance
//! `η = (γ̄, u, α)`; an observation in group `g` sees `γ_g = γ̄ + (2g-1)ψ`.
//! All quantities are computed at the pooled fit (`ψ = 0`) on the frozen
//! likelihood surface, whose draws depend only on observation coordinates.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::chart::Chart;
use crate::error::{Error, Result};
use crate::fb::FbParams;
use crate::linalg;
use crate::mcem::{self, FitConfig, FitResult};
use crate::optim::{bfgs_minimize, BfgsOptions};
use crate::rng;
use crate::rrfb::{LikelihoodContext, ParamCache, RrfbObservation};
use crate::sphere::{EigenvalueReparam, SkewCoordinates};

/// Two samples, optionally paired (`pairing[k] = (i, j)` matches
/// `group0[i]` with `group1[j]`).
#[derive(Debug, Clone)]
pub struct TwoSampleData {
    pub group0: Vec<RrfbObservation>,
    pub group1: Vec<RrfbObservation>,
    pub pairing: Option<Vec<(usize, usize)>>,
}

impl TwoSampleData {
    pub fn new(group0: Vec<RrfbObservation>, group1: Vec<RrfbObservation>) -> Result<Self> {
        let d = Self { group0, group1, pairing: None };
        d.validate()?;
        Ok(d)
    }

    /// Paired design matching `group0[k]` with `group1[k]`.
    pub fn paired(group0: Vec<RrfbObservation>, group1: Vec<RrfbObservation>) -> Result<Self> {
        let n = group0.len();
        let d = Self { group0, group1, pairing: Some((0..n).map(|k| (k, k)).collect()) };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        let p = self.group0.first().or(self.group1.first()).map(|o| o.p()).unwrap_or(0);
        if self.group0.is_empty() || self.group1.is_empty() {
            return Err(Error::InvalidInput("both groups must be non-empty".into()));
        }
        if let Some(o) = self.group0.iter().chain(&self.group1).find(|o| o.p() != p) {
            return Err(Error::Dimension { expected: p, got: o.p() });
        }
        if let Some(pairs) = &self.pairing {
            let (n0, n1) = (self.group0.len(), self.group1.len());
            let mut seen0 = vec![false; n0];
            let mut seen1 = vec![false; n1];
            for &(i, j) in pairs {
                if i >= n0 || j >= n1 || seen0[i] || seen1[j] {
                    return Err(Error::InvalidInput("pairing is not a bijection".into()));
                }
                seen0[i] = true;
                seen1[j] = true;
            }
            if pairs.len() != n0 || n0 != n1 {
                return Err(Error::InvalidInput("pairing is not a bijection".into()));
            }
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.group0[0].p()
    }

    pub fn n(&self) -> usize {
        self.group0.len() + self.group1.len()
    }

    /// Pooled observations, group 0 first.
    pub fn pooled(&self) -> Vec<RrfbObservation> {
        self.group0.iter().chain(&self.group1).cloned().collect()
    }

    /// `2g - 1` for every pooled observation.
    pub fn signs(&self) -> Vec<f64> {
        std::iter::repeat_n(-1.0, self.group0.len()).chain(std::iter::repeat_n(1.0, self.group1.len())).collect()
    }

    /// Pooled-index pairs `(group-0 index, group-1 index)`.
    fn pooled_pairs(&self) -> Option<Vec<(usize, usize)>> {
        let n0 = self.group0.len();
        self.pairing.as_ref().map(|ps| ps.iter().map(|&(i, j)| (i, n0 + j)).collect())
    }
}

/// `θ = (ψ, γ̄, u₂..u_p, α)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub psi: Vec<f64>,
    pub gamma_bar: Vec<f64>,
    pub u: EigenvalueReparam,
    pub alpha: SkewCoordinates,
}

impl ThetaVector {
    pub fn len(&self) -> usize {
        self.psi.len() + self.gamma_bar.len() + self.u.free().len() + self.alpha.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.psi.clone();
        v.extend(&self.gamma_bar);
        v.extend(self.u.free());
        v.extend(&self.alpha.0);
        v
    }

    /// The restricted point `ψ = 0, α = 0` at `params`.
    pub fn restricted(params: &FbParams) -> Self {
        let p = params.p();
        Self {
            psi: vec![0.0; p],
            gamma_bar: params.gamma().iter().copied().collect(),
            u: EigenvalueReparam::from_lambda(&params.lambda, crate::chart::GAP_FLOOR),
            alpha: SkewCoordinates::zeros(p),
        }
    }
}

/// Pooled single-γ fit on a frozen likelihood surface.
#[derive(Debug, Clone)]
pub struct RestrictedFit {
    pub params: FbParams,
    pub context: LikelihoodContext,
    pub fit: FitResult,
    /// mean nuisance score after the final refinement
    pub mean_score_max: f64,
    pub polish_iterations: usize,
}

/// Quasi-Newton maximization of the frozen observed log-likelihood over the
/// chart `(γ, u, α)`, started at `params`. Returns the refined parameters,
/// the largest mean score entry and the number of iterations.
pub fn polish(ctx: &LikelihoodContext, params: &FbParams, gtol: f64, max_iter: usize) -> Result<(FbParams, f64, usize)> {
    let n = ctx.len() as f64;
    let chart = Chart::new(params.q.clone());
    let fg = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let pt = chart.point(x)?;
        let pc = ParamCache { params: pt.params.clone(), a: pt.params.a(), gamma: pt.gamma.clone(), log_c: pt.log_c.value.log_value };
        let eval = ctx.evaluate(&pc)?;
        let stats = mcem::SufficientStats::from_evaluation(&eval);
        let g = chart.data_gradient(&pt, &stats.s1_bar, &stats.s2_bar);
        let gc = chart.log_c_gradient(&pt);
        Ok((-eval.total_loglik() / n, g.iter().zip(gc).map(|(a, b)| -(a + b)).collect()))
    };
    let x0 = chart.coordinates(params);
    let opts = BfgsOptions { max_iter, gtol, ftol: 0.0, max_step: 0.5, ..Default::default() };
    let res = bfgs_minimize(&x0, fg, &opts)?;
    let smax = res.grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut out = chart.params(&res.x)?;
    out.canonicalize_order();
    out.canonicalize_signs();
    Ok((out, smax, res.iterations))
}

/// Fit of the `ψ = 0` model to the pooled sample. Labels are not used, so
/// the result is invariant to relabeling. MCEM runs on a frozen surface and
/// is finished by [`polish`] so the nuisance score vanishes to `1e-7`.
pub fn restricted_fit(data: &TwoSampleData, config: &FitConfig) -> Result<RestrictedFit> {
    let pooled = data.pooled();
    let p = data.p();
    if pooled.len() < p + 1 {
        return Err(Error::Precondition(format!("pooled n = {} < p + 1", pooled.len())));
    }
    let ctx = LikelihoodContext::new(pooled.clone(), config.seed, 0, config.sizes);
    let init = mcem::initialize(&pooled, config)?;
    let fit = mcem::fit_from(&ctx, init, config)?;
    let (params, smax, iters) = polish(&ctx, &fit.params, 1e-7, 100)?;
    Ok(RestrictedFit { params, context: ctx, fit, mean_score_max: smax, polish_iterations: iters })
}

/// Observation-level scores at the restricted point.
#[derive(Debug, Clone)]
pub struct ScoreContributions {
    /// `∂ℓᵢ/∂γ` (p entries each); the ψ-score is `(2g-1)` times this
    pub gamma: Vec<DVector<f64>>,
    /// `∂ℓᵢ/∂η`, `η = (γ̄, u, α)`
    pub eta: Vec<DVector<f64>>,
}

impl ScoreContributions {
    /// Full `θ`-score of observation `i` with group sign `sign`.
    pub fn theta(&self, i: usize, sign: f64) -> DVector<f64> {
        let p = self.gamma[i].len();
        let mut s = DVector::zeros(p + self.eta[i].len());
        s.rows_mut(0, p).copy_from(&(&self.gamma[i] * sign));
        s.rows_mut(p, self.eta[i].len()).copy_from(&self.eta[i]);
        s
    }
}

fn contributions_at(ctx: &LikelihoodContext, chart: &Chart, x: &[f64]) -> Result<ScoreContributions> {
    let pt = chart.point(x)?;
    let pc = ParamCache { params: pt.params.clone(), a: pt.params.a(), gamma: pt.gamma.clone(), log_c: pt.log_c.value.log_value };
    let gc = chart.log_c_gradient(&pt);
    let p = chart.gamma_range().len();
    let out: Vec<Result<DVector<f64>>> = (0..ctx.len())
        .into_par_iter()
        .map(|i| {
            let (mom, _, _) = ctx.observation(i, &pc)?;
            let g = chart.data_gradient(&pt, &mom.m1, &mom.m2);
            let v = DVector::from_iterator(g.len(), g.iter().zip(&gc).map(|(a, b)| a + b));
            if v.iter().any(|e| !e.is_finite()) {
                return Err(Error::Numerical(format!("non-finite score at observation {i}")));
            }
            Ok(v)
        })
        .collect();
    let eta: Vec<DVector<f64>> = out.into_iter().collect::<Result<_>>()?;
    let gamma = eta.iter().map(|e| e.rows(0, p).into_owned()).collect();
    Ok(ScoreContributions { gamma, eta })
}

/// Per-observation scores `sᵢ(θ)` at the restricted fit, via the Fisher
/// identity on the frozen surface (exact gradients of the approximate
/// likelihood).
pub fn score_contributions(fit: &RestrictedFit) -> Result<ScoreContributions> {
    let chart = Chart::new(fit.params.q.clone());
    contributions_at(&fit.context, &chart, &chart.coordinates(&fit.params))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    Unpaired,
    Paired,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreTestConfig {
    pub fit: FitConfig,
    pub n_permutations: usize,
    /// central-difference step for the Hessian blocks
    pub hessian_step: f64,
}

impl Default for ScoreTestConfig {
    fn default() -> Self {
        Self { fit: FitConfig::default(), n_permutations: 0, hessian_step: 1e-4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreTestResult {
    #[serde(rename = "T")]
    pub t: f64,
    pub df: usize,
    pub p_asymptotic: f64,
    pub p_permutation: Option<f64>,
    pub n_permutations: usize,
    pub method_flags: Vec<String>,
    #[serde(skip)]
    pub efficient_score: Vec<f64>,
    #[serde(skip)]
    pub permutation_stats: Vec<f64>,
}

/// Everything the statistic needs, split into label-free and
/// label-dependent parts.
#[derive(Debug, Clone)]
pub struct ScoreAggregates {
    n: usize,
    p: usize,
    /// `(1/n) Σ gᵢ`
    eta_mean: DVector<f64>,
    /// `H_ηη⁻¹`
    h_eta_inv: DMatrix<f64>,
    /// `(1/n) Σ vᵢvᵢᵀ`
    j_psipsi: DMatrix<f64>,
    /// `(1/n) Σ gᵢgᵢᵀ`
    j_etaeta: DMatrix<f64>,
    gamma: Vec<DVector<f64>>,
    eta: Vec<DVector<f64>>,
    /// `∂vᵢ/∂η`, p × dim η
    jac: Vec<DMatrix<f64>>,
    pub flags: Vec<String>,
}

fn ridge_if_needed(m: &DMatrix<f64>, flag: &str, flags: &mut Vec<String>) -> DMatrix<f64> {
    let sym = linalg::sym_part(m);
    let (vals, _) = linalg::sym_eigen_sorted(&sym);
    let dim = m.nrows();
    let max = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if vals[0] <= 1e-10 * max || !vals[0].is_finite() {
        flags.push(flag.to_string());
        let ridge = 1e-8 * sym.trace().abs() / dim as f64;
        return sym + DMatrix::identity(dim, dim) * ridge.max(1e-300);
    }
    sym
}

fn inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone().try_inverse().ok_or_else(|| Error::Numerical("singular matrix after regularization".into()))
}

impl ScoreAggregates {
    pub fn build(fit: &RestrictedFit, step: f64) -> Result<Self> {
        let ctx = &fit.context;
        let chart = Chart::new(fit.params.q.clone());
        let x0 = chart.coordinates(&fit.params);
        let base = contributions_at(ctx, &chart, &x0)?;
        let n = ctx.len();
        let p = chart.gamma_range().len();
        let d = chart.dim();
        let mut h = DMatrix::zeros(d, d);
        let mut jac = vec![DMatrix::zeros(p, d); n];
        for k in 0..d {
            let (mut xp, mut xm) = (x0.clone(), x0.clone());
            xp[k] += step;
            xm[k] -= step;
            let sp = contributions_at(ctx, &chart, &xp)?;
            let sm = contributions_at(ctx, &chart, &xm)?;
            let mut col = DVector::zeros(d);
            for i in 0..n {
                col += (&sp.eta[i] - &sm.eta[i]) / (2.0 * step);
                jac[i].set_column(k, &((&sp.gamma[i] - &sm.gamma[i]) / (2.0 * step)));
            }
            h.set_column(k, &(-col / n as f64));
        }
        let mut flags = Vec::new();
        let h = ridge_if_needed(&h, "ridge-H_eta_eta", &mut flags);
        let h_eta_inv = inverse(&h)?;
        let nf = n as f64;
        let mut eta_mean = DVector::zeros(d);
        let mut j_psipsi = DMatrix::zeros(p, p);
        let mut j_etaeta = DMatrix::zeros(d, d);
        for i in 0..n {
            eta_mean += &base.eta[i];
            j_psipsi += &base.gamma[i] * base.gamma[i].transpose();
            j_etaeta += &base.eta[i] * base.eta[i].transpose();
        }
        Ok(Self {
            n,
            p,
            eta_mean: eta_mean / nf,
            h_eta_inv,
            j_psipsi: j_psipsi / nf,
            j_etaeta: j_etaeta / nf,
            gamma: base.gamma,
            eta: base.eta,
            jac,
            flags,
        })
    }

    /// `T` for the group signs `σᵢ = 2gᵢ - 1`. With `pairs`, the signed sums
    /// are accumulated pair by pair so exact copies cancel exactly.
    pub fn statistic(&self, signs: &[f64], pairs: Option<&[(usize, usize)]>) -> Result<(f64, DVector<f64>, bool)> {
        let (p, d, nf) = (self.p, self.eta_mean.len(), self.n as f64);
        let mut s_psi = DVector::zeros(p);
        let mut h_sum = DMatrix::zeros(p, d);
        let mut j_pe = DMatrix::zeros(p, d);
        let add = |i: usize, sg: f64, s_psi: &mut DVector<f64>, h_sum: &mut DMatrix<f64>, j_pe: &mut DMatrix<f64>| {
            *s_psi += &self.gamma[i] * sg;
            *h_sum += &self.jac[i] * sg;
            *j_pe += &self.gamma[i] * self.eta[i].transpose() * sg;
        };
        match pairs {
            Some(ps) => {
                for &(a, b) in ps {
                    let mut ds = &self.gamma[a] * signs[a] + &self.gamma[b] * signs[b];
                    let mut dh = &self.jac[a] * signs[a] + &self.jac[b] * signs[b];
                    let mut dj = &self.gamma[a] * self.eta[a].transpose() * signs[a] + &self.gamma[b] * self.eta[b].transpose() * signs[b];
                    if signs[a] == -signs[b] && self.gamma[a] == self.gamma[b] && self.eta[a] == self.eta[b] {
                        ds.fill(0.0);
                        dh.fill(0.0);
                        dj.fill(0.0);
                    }
                    s_psi += ds;
                    h_sum += dh;
                    j_pe += dj;
                }
            }
            None => {
                for (i, sg) in signs.iter().enumerate() {
                    add(i, *sg, &mut s_psi, &mut h_sum, &mut j_pe);
                }
            }
        }
        let s_psi = s_psi / nf;
        let h_pe = -h_sum / nf;
        let j_pe = j_pe / nf;
        let b = &h_pe * &self.h_eta_inv;
        let eff = &s_psi - &b * &self.eta_mean;
        let v = &self.j_psipsi - &b * j_pe.transpose() - &j_pe * b.transpose() + &b * &self.j_etaeta * b.transpose();
        if eff.iter().all(|e| *e == 0.0) {
            return Ok((0.0, eff, false));
        }
        let mut flags = Vec::new();
        let v = ridge_if_needed(&v, "ridge-V", &mut flags);
        let t = nf * (eff.transpose() * inverse(&v)? * &eff)[(0, 0)];
        Ok((t.max(0.0), eff, !flags.is_empty()))
    }
}

/// Robust score test of `γ₀ = γ₁`.
pub fn score_test<R: Rng + ?Sized>(data: &TwoSampleData, config: &ScoreTestConfig, rng: &mut R) -> Result<ScoreTestResult> {
    let fit = restricted_fit(data, &config.fit)?;
    score_test_with_fit(data, &fit, config, rng)
}

/// Score test reusing an existing restricted fit of `data`.
pub fn score_test_with_fit<R: Rng + ?Sized>(data: &TwoSampleData, fit: &RestrictedFit, config: &ScoreTestConfig, rng: &mut R) -> Result<ScoreTestResult> {
    let agg = ScoreAggregates::build(fit, config.hessian_step)?;
    let signs = data.signs();
    let pairs = data.pooled_pairs();
    let (t, eff, ridge_v) = agg.statistic(&signs, pairs.as_deref())?;
    let p = data.p();
    let chi = ChiSquared::new(p as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    let p_asymptotic = if t == 0.0 { 1.0 } else { chi.sf(t) };
    let mut flags = agg.flags.clone();
    if ridge_v {
        flags.push("ridge-V".into());
    }
    flags.push(if pairs.is_some() { "paired".into() } else { "unpaired".into() });
    let mut perm_stats = Vec::new();
    let mut p_perm = None;
    if config.n_permutations > 0 {
        flags.push("plug-in permutation".into());
        let base_seed: u64 = rng.random();
        let stats: Vec<Result<f64>> = (0..config.n_permutations)
            .into_par_iter()
            .map(|b| {
                let mut r = rng::stream(base_seed, "permutation", b as u64);
                let mut s = signs.clone();
                match &pairs {
                    Some(ps) => {
                        for &(a, c) in ps {
                            if r.random::<bool>() {
                                s.swap(a, c);
                            }
                        }
                    }
                    None => s.shuffle(&mut r),
                }
                agg.statistic(&s, pairs.as_deref()).map(|r| r.0)
            })
            .collect();
        perm_stats = stats.into_iter().collect::<Result<_>>()?;
        let exceed = perm_stats.iter().filter(|v| **v >= t).count();
        p_perm = Some((1 + exceed) as f64 / (1 + config.n_permutations) as f64);
    }
    Ok(ScoreTestResult {
        t,
        df: p,
        p_asymptotic,
        p_permutation: p_perm,
        n_permutations: config.n_permutations,
        method_flags: flags,
        efficient_score: eff.iter().copied().collect(),
        permutation_stats: perm_stats,
    })
}

/// Symmetric nonnegative matrix with zero diagonal, stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| (0..n).map(|j| if i == j { 0.0 } else if i < j { f(i, j) } else { f(j, i) }).collect()).collect();
        Self { n, d: rows.concat() }
    }

    pub fn new_checked(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(Error::Dimension { expected: n * n, got: d.len() });
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(Error::InvalidInput("nonzero diagonal".into()));
            }
            for j in 0..i {
                if d[i * n + j] != d[j * n + i] || d[i * n + j] < 0.0 || !d[i * n + j].is_finite() {
                    return Err(Error::InvalidInput("distance matrix must be symmetric, finite and nonnegative".into()));
                }
            }
        }
        Ok(Self { n, d })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }
}

/// `Σ|xᵢ - yᵢ| / Σ(xᵢ + yᵢ)` on simplex compositions.
pub fn bray_curtis(x: &[f64], y: &[f64]) -> f64 {
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
    let den: f64 = x.iter().zip(y).map(|(a, b)| a + b).sum();
    if den == 0.0 { 0.0 } else { num / den }
}

/// Bray-Curtis distances of the compositions `xᵢ²`.
pub fn bray_curtis_matrix(data: &[RrfbObservation]) -> DistanceMatrix {
    let comps: Vec<Vec<f64>> = data.iter().map(|o| o.x.iter().map(|v| v * v).collect()).collect();
    DistanceMatrix::from_fn(data.len(), |i, j| bray_curtis(&comps[i], &comps[j]))
}

/// Euclidean distances between spherical coordinates (Hellinger-type).
pub fn sqrt_euclidean_distance_matrix(data: &[RrfbObservation]) -> DistanceMatrix {
    DistanceMatrix::from_fn(data.len(), |i, j| (&data[i].x - &data[j].x).norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermanovaResult {
    pub pseudo_f: f64,
    pub p_value: f64,
    pub n_permutations: usize,
}

fn within_sums(d2: &[f64], n: usize, labels: &[usize], groups: usize) -> Vec<f64> {
    let mut s = vec![0.0; groups];
    for i in 0..n {
        let row = &d2[i * n..(i + 1) * n];
        for j in i + 1..n {
            if labels[i] == labels[j] {
                s[labels[i]] += row[j];
            }
        }
    }
    s
}

fn pseudo_f(total: f64, within: &[f64], sizes: &[usize], n: usize) -> f64 {
    let ss_t = total / n as f64;
    let ss_w: f64 = within.iter().zip(sizes).map(|(s, m)| s / *m as f64).sum();
    let g = sizes.len() as f64;
    let ss_b = (ss_t - ss_w).max(0.0);
    if ss_w <= 0.0 {
        return if ss_b > 0.0 { f64::INFINITY } else { 0.0 };
    }
    (ss_b / (g - 1.0)) / (ss_w / (n as f64 - g))
}

/// PERMANOVA pseudo-F with a label-permutation p-value.
pub fn permanova<R: Rng + ?Sized>(dm: &DistanceMatrix, labels: &[usize], n_perm: usize, rng: &mut R) -> Result<PermanovaResult> {
    let n = dm.n();
    if labels.len() != n {
        return Err(Error::Dimension { expected: n, got: labels.len() });
    }
    let groups = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; groups];
    for &l in labels {
        sizes[l] += 1;
    }
    if groups < 2 || sizes.iter().any(|s| *s < 2) {
        return Err(Error::InvalidInput("PERMANOVA needs at least two groups of size ≥ 2".into()));
    }
    let d2: Vec<f64> = dm.d.iter().map(|v| v * v).collect();
    let row_sums: Vec<f64> = (0..n).map(|i| d2[i * n..(i + 1) * n].iter().sum()).collect();
    let total: f64 = row_sums.iter().sum::<f64>() / 2.0;
    let observed = pseudo_f(total, &within_sums(&d2, n, labels, groups), &sizes, n);
    let base_seed: u64 = rng.random();
    let two = groups == 2;
    // with two groups only the smaller group's pairs are needed:
    // S₁ = total − Σ_{i∈g₀} rᵢ + S₀
    let small = if sizes[0] <= sizes[1] { 0 } else { 1 };
    let perms: Vec<f64> = (0..n_perm)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(base_seed, "permanova", b as u64);
            let mut l = labels.to_vec();
            l.shuffle(&mut r);
            if two {
                let mut members: Vec<usize> = (0..n).filter(|&i| l[i] == small).collect();
                members.sort_unstable();
                let mut s0 = 0.0;
                let mut rs = 0.0;
                for (a, &i) in members.iter().enumerate() {
                    rs += row_sums[i];
                    let row = &d2[i * n..(i + 1) * n];
                    for &j in &members[a + 1..] {
                        s0 += row[j];
                    }
                }
                let s1 = total - rs + s0;
                let within = if small == 0 { [s0, s1] } else { [s1, s0] };
                pseudo_f(total, &within, &sizes, n)
            } else {
                pseudo_f(total, &within_sums(&d2, n, &l, groups), &sizes, n)
            }
        })
        .collect();
    let exceed = perms.iter().filter(|f| **f >= observed).count();
    Ok(PermanovaResult { pseudo_f: observed, p_value: (1 + exceed) as f64 / (1 + n_perm) as f64, n_permutations: n_perm })
}
