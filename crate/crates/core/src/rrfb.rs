//! The rectified-and-renormalized Fisher-Bingham observation model.
//!
//! An observation `x` on the nonnegative orthant of the sphere is the image
//! of a latent `z ~ FB(A, γ)` under `T(z) = z⁺/‖z⁺‖`. With `m` zero
//! coordinates the preimage of `x` is parameterized by `δ = ‖z⁺‖² ∈ (0, 1)`
//! and a direction `u` in the negative orthant of `S^{m-1}`:
//!
//! ```text
//! z(δ, u) = Pᵀ (√δ·x̃, √(1-δ)·u)
//! ```
//!
//! Under the uniform base measure `δ ~ Beta((p-m)/2, m/2)` independently of
//! a uniform `u`, and the posterior is the exponential tilt of that product
//! measure by `exp(-zᵀAz + γᵀz)`. Everything the E-step and the observed
//! likelihood need is an expectation under this tilt.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fb::{self, FbParams, FbSampler, UNIT_TOL};
use crate::quadrature::{self, GaussRule};
use crate::rng;
use crate::sphere;

/// Zero threshold for ingested data; synthetic data has exact zeros.
pub const DEFAULT_ZERO_TOL: f64 = 1e-12;
pub const ESS_FLOOR: f64 = 50.0;

/// Zero pattern of an observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDecomposition {
    /// `permutation[k]` is the original index placed at position `k`:
    /// positive coordinates first, then zeros, each in original order.
    pub permutation: Vec<usize>,
    pub m: usize,
    pub x_pos: Vec<f64>,
}

impl BlockDecomposition {
    pub fn p(&self) -> usize {
        self.permutation.len()
    }

    pub fn support(&self) -> &[usize] {
        &self.permutation[..self.p() - self.m]
    }

    pub fn zeros(&self) -> &[usize] {
        &self.permutation[self.p() - self.m..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrfbObservation {
    pub x: DVector<f64>,
    pub blocks: BlockDecomposition,
}

impl RrfbObservation {
    pub fn new(x: DVector<f64>, zero_tol: f64) -> Result<Self> {
        let blocks = decompose(&x, zero_tol)?;
        let mut x = x;
        for &j in blocks.zeros() {
            x[j] = 0.0;
        }
        Ok(Self { x, blocks })
    }

    pub fn p(&self) -> usize {
        self.x.len()
    }

    pub fn m(&self) -> usize {
        self.blocks.m
    }

    /// Hash of the coordinates; keys the frozen latent draws so identical
    /// observations always see identical draws.
    pub fn content_key(&self) -> u64 {
        rng::content_key(self.x.as_slice())
    }
}

/// `T(z) = z⁺/‖z⁺‖`.
pub fn rectify_renormalize(z: &DVector<f64>) -> Result<RrfbObservation> {
    let n = z.norm();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotUnit(n));
    }
    if z.iter().all(|v| *v >= 0.0) {
        // nothing to clamp; leave the point untouched so T is idempotent
        return RrfbObservation::new(z.map(|v| v.max(0.0)), 0.0);
    }
    let plus = z.map(|v| v.max(0.0));
    let pn = plus.norm();
    if pn == 0.0 {
        return Err(Error::InvalidInput("no positive coordinate to renormalize".into()));
    }
    RrfbObservation::new(plus / pn, 0.0)
}

/// Stable split of `x` into positive entries and (near-)zeros.
pub fn decompose(x: &DVector<f64>, zero_tol: f64) -> Result<BlockDecomposition> {
    if x.iter().any(|v| *v < 0.0 && *v < -zero_tol) || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("observation has negative or non-finite entries".into()));
    }
    let (pos, zer): (Vec<usize>, Vec<usize>) = (0..x.len()).partition(|&i| x[i] > zero_tol);
    if pos.is_empty() {
        return Err(Error::InvalidInput("observation has no positive entry".into()));
    }
    let x_pos: Vec<f64> = pos.iter().map(|&i| x[i]).collect();
    let norm = x_pos.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotUnit(norm));
    }
    let m = zer.len();
    let mut permutation = pos;
    permutation.extend(zer);
    Ok(BlockDecomposition { permutation, m, x_pos })
}

/// `z(δ, u) = Pᵀ(√δ·x̃, √(1-δ)·u)`.
pub fn latent_from_blocks(delta: f64, u: &[f64], blocks: &BlockDecomposition) -> Result<DVector<f64>> {
    if u.len() != blocks.m {
        return Err(Error::Dimension { expected: blocks.m, got: u.len() });
    }
    if blocks.m == 0 {
        return Err(Error::Precondition("latent block needs at least one zero".into()));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::InvalidInput(format!("δ = {delta} outside [0, 1]")));
    }
    let mut z = DVector::zeros(blocks.p());
    let (a, b) = (delta.sqrt(), (1.0 - delta).sqrt());
    for (k, &i) in blocks.support().iter().enumerate() {
        z[i] = a * blocks.x_pos[k];
    }
    for (k, &i) in blocks.zeros().iter().enumerate() {
        z[i] = b * u[k];
    }
    Ok(z)
}

/// Log of the unnormalized posterior density of `(δ, u)`:
/// `((p-m)/2 - 1)·log δ + (m/2 - 1)·log(1-δ) - zᵀAz + γᵀz`.
pub fn log_posterior_weight(delta: f64, u: &[f64], obs: &RrfbObservation, params: &FbParams) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidInput(format!("δ = {delta} outside (0, 1)")));
    }
    let z = latent_from_blocks(delta, u, &obs.blocks)?;
    let p = obs.p() as f64;
    let m = obs.m() as f64;
    let kernel = ((p - m) / 2.0 - 1.0) * delta.ln() + (m / 2.0 - 1.0) * (1.0 - delta).ln();
    Ok(kernel + fb::fb_log_density_unnorm(&z, params)?)
}

/// The tilt restricted to the preimage of one observation:
/// `-δa + √δ·g - 2√(δ(1-δ))·cᵀu - (1-δ)·uᵀBu + √(1-δ)·hᵀu`.
#[derive(Debug, Clone)]
struct ReducedTilt {
    a: f64,
    g: f64,
    c: Vec<f64>,
    b: Vec<f64>,
    h: Vec<f64>,
}

impl ReducedTilt {
    fn new(obs: &RrfbObservation, amat: &DMatrix<f64>, gamma: &DVector<f64>) -> Self {
        let bl = &obs.blocks;
        let (s, zs) = (bl.support(), bl.zeros());
        let xt = &bl.x_pos;
        let mut a = 0.0;
        for (i, &si) in s.iter().enumerate() {
            for (j, &sj) in s.iter().enumerate() {
                a += xt[i] * amat[(si, sj)] * xt[j];
            }
        }
        let g = s.iter().zip(xt).map(|(&si, x)| gamma[si] * x).sum();
        let c = zs.iter().map(|&zi| s.iter().zip(xt).map(|(&si, x)| amat[(zi, si)] * x).sum()).collect();
        let m = zs.len();
        let mut b = vec![0.0; m * m];
        for (i, &zi) in zs.iter().enumerate() {
            for (j, &zj) in zs.iter().enumerate() {
                b[i * m + j] = amat[(zi, zj)];
            }
        }
        let h = zs.iter().map(|&zi| gamma[zi]).collect();
        Self { a, g, c, b, h }
    }

    #[inline]
    fn eval(&self, delta: f64, u: &[f64]) -> f64 {
        let m = u.len();
        let (sd, sc) = (delta.sqrt(), (1.0 - delta).max(0.0).sqrt());
        let mut cu = 0.0;
        let mut hu = 0.0;
        let mut ubu = 0.0;
        for i in 0..m {
            cu += self.c[i] * u[i];
            hu += self.h[i] * u[i];
            let row = &self.b[i * m..(i + 1) * m];
            ubu += u[i] * row.iter().zip(u).map(|(bij, uj)| bij * uj).sum::<f64>();
        }
        -delta * self.a + sd * self.g - 2.0 * sd * sc * cu - (1.0 - delta) * ubu + sc * hu
    }
}

/// Scheme for the posterior expectations of one observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    /// no zeros: the latent direction is the observation itself
    Exact,
    /// one zero: Gauss-Jacobi with the given node count
    Quadrature(usize),
    /// self-normalized importance sampling with `K` draws
    Importance(usize),
}

/// Node and draw counts used when the scheme is chosen by the zero count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeSizes {
    pub quad_nodes: usize,
    pub is_draws: usize,
}

impl SchemeSizes {
    pub const ESTEP: Self = Self { quad_nodes: 50, is_draws: 5000 };
    pub const LIKELIHOOD: Self = Self { quad_nodes: 100, is_draws: 20000 };

    pub fn scheme_for(&self, m: usize) -> Scheme {
        match m {
            0 => Scheme::Exact,
            1 => Scheme::Quadrature(self.quad_nodes),
            _ => Scheme::Importance(self.is_draws),
        }
    }
}

impl Default for SchemeSizes {
    fn default() -> Self {
        Self::ESTEP
    }
}

/// `ν⁽¹⁾ = E[√(1-δ)u]`, `ν⁽²⁾ = E[√(δ(1-δ))u]`, `ν⁽³⁾ = E[(1-δ)uuᵀ]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuMoments {
    pub nu1: DVector<f64>,
    pub nu2: DVector<f64>,
    pub nu3: DMatrix<f64>,
}

/// Monte Carlo standard errors of an importance-sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentErrors {
    pub m1: DMatrix<f64>,
    pub m2: DVector<f64>,
    pub eta: [f64; 4],
    pub log_marginal: f64,
}

/// Posterior expectations of one observation: `M1 = E[zzᵀ]`, `M2 = E[z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMoments {
    pub m1: DMatrix<f64>,
    pub m2: DVector<f64>,
    /// `(E√δ, Eδ, E√(1-δ), E√(δ(1-δ)))`
    pub eta: [f64; 4],
    pub nu: Option<NuMoments>,
    pub ess: f64,
    /// `log E[exp(-zᵀAz + γᵀz)]` under the base measure of `(δ, u)`; for
    /// `m = 0` the tilt at `x`
    pub log_marginal: f64,
    pub errors: Option<MomentErrors>,
}

/// Latent proposal draws for an observation with `m ≥ 2` zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDraws {
    pub m: usize,
    pub delta: Vec<f64>,
    /// `K × m`, row-major
    pub u: Vec<f64>,
}

impl LatentDraws {
    pub fn generate<R: Rng + ?Sized>(p: usize, m: usize, k: usize, rng: &mut R) -> Self {
        let beta = Beta::new((p - m) as f64 / 2.0, m as f64 / 2.0).expect("valid beta shape");
        let mut delta = Vec::with_capacity(k);
        let mut u = Vec::with_capacity(k * m);
        for _ in 0..k {
            delta.push(beta.sample(rng));
            u.extend(sphere::sample_uniform_negative_orthant(m, rng).iter());
        }
        Self { m, delta, u }
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }
}

enum Source<'a> {
    Rule(&'a GaussRule),
    Draws(&'a LatentDraws),
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

fn exact_moments(obs: &RrfbObservation, amat: &DMatrix<f64>, gamma: &DVector<f64>) -> PosteriorMoments {
    let x = &obs.x;
    PosteriorMoments {
        m1: x * x.transpose(),
        m2: x.clone(),
        eta: [1.0, 1.0, 0.0, 0.0],
        nu: None,
        ess: f64::INFINITY,
        log_marginal: fb::tilt(x, amat, gamma),
        errors: None,
    }
}

fn assemble(obs: &RrfbObservation, eta: [f64; 4], nu: &NuMoments) -> (DMatrix<f64>, DVector<f64>) {
    let bl = &obs.blocks;
    let p = obs.p();
    let (s, zs, xt) = (bl.support(), bl.zeros(), &bl.x_pos);
    let mut m1 = DMatrix::zeros(p, p);
    let mut m2 = DVector::zeros(p);
    for (i, &si) in s.iter().enumerate() {
        m2[si] = eta[0] * xt[i];
        for (j, &sj) in s.iter().enumerate() {
            m1[(si, sj)] = eta[1] * xt[i] * xt[j];
        }
        for (j, &zj) in zs.iter().enumerate() {
            let v = xt[i] * nu.nu2[j];
            m1[(si, zj)] = v;
            m1[(zj, si)] = v;
        }
    }
    for (i, &zi) in zs.iter().enumerate() {
        m2[zi] = nu.nu1[i];
        for (j, &zj) in zs.iter().enumerate() {
            m1[(zi, zj)] = nu.nu3[(i, j)];
        }
    }
    (m1, m2)
}

fn latent_moments(obs: &RrfbObservation, tilt: &ReducedTilt, src: Source<'_>, with_errors: bool) -> Result<PosteriorMoments> {
    let m = obs.m();
    let (logw, deltas, us): (Vec<f64>, &[f64], Option<&[f64]>) = match &src {
        Source::Rule(r) => (
            r.nodes.iter().zip(&r.weights).map(|(d, w)| w.ln() + tilt.eval(*d, &[-1.0])).collect(),
            &r.nodes,
            None,
        ),
        Source::Draws(d) => (
            (0..d.len()).map(|k| tilt.eval(d.delta[k], &d.u[k * m..(k + 1) * m])).collect(),
            &d.delta,
            Some(&d.u),
        ),
    };
    let lse = log_sum_exp(&logw);
    if !lse.is_finite() {
        return Err(Error::Numerical("posterior weights are not finite".into()));
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - lse).exp()).collect();
    let sum_w2: f64 = w.iter().map(|v| v * v).sum();
    let (ess, log_marginal) = match &src {
        Source::Rule(_) => (f64::INFINITY, lse),
        Source::Draws(d) => (1.0 / sum_w2, lse - (d.len() as f64).ln()),
    };
    let u_at = |k: usize| -> &[f64] {
        match us {
            Some(u) => &u[k * m..(k + 1) * m],
            None => &[-1.0],
        }
    };
    let mut eta = [0.0; 4];
    let mut nu1 = DVector::zeros(m);
    let mut nu2 = DVector::zeros(m);
    let mut nu3 = DMatrix::zeros(m, m);
    for (k, &wk) in w.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        let d = deltas[k];
        let (sd, sc) = (d.sqrt(), (1.0 - d).max(0.0).sqrt());
        eta[0] += wk * sd;
        eta[1] += wk * d;
        eta[2] += wk * sc;
        eta[3] += wk * sd * sc;
        let u = u_at(k);
        for i in 0..m {
            nu1[i] += wk * sc * u[i];
            nu2[i] += wk * sd * sc * u[i];
            for j in 0..m {
                nu3[(i, j)] += wk * (1.0 - d) * u[i] * u[j];
            }
        }
    }
    let nu = NuMoments { nu1, nu2, nu3 };
    let (m1, m2) = assemble(obs, eta, &nu);
    let errors = if with_errors && us.is_some() {
        let p = obs.p();
        let mut v1 = DMatrix::zeros(p, p);
        let mut v2 = DVector::zeros(p);
        let mut ve = [0.0; 4];
        for (k, &wk) in w.iter().enumerate() {
            let d = deltas[k];
            let z = latent_from_blocks(d, u_at(k), &obs.blocks)?;
            let w2 = wk * wk;
            for i in 0..p {
                v2[i] += w2 * (z[i] - m2[i]).powi(2);
                for j in 0..p {
                    v1[(i, j)] += w2 * (z[i] * z[j] - m1[(i, j)]).powi(2);
                }
            }
            let (sd, sc) = (d.sqrt(), (1.0 - d).max(0.0).sqrt());
            for (e, (f, mean)) in ve.iter_mut().zip([sd, d, sc, sd * sc].iter().zip(&eta)) {
                *e += w2 * (f - mean).powi(2);
            }
        }
        let k = w.len() as f64;
        Some(MomentErrors {
            m1: v1.map(f64::sqrt),
            m2: v2.map(f64::sqrt),
            eta: ve.map(f64::sqrt),
            log_marginal: ((k * sum_w2 - 1.0).max(0.0) / k).sqrt(),
        })
    } else {
        None
    };
    Ok(PosteriorMoments { m1, m2, eta, nu: Some(nu), ess, log_marginal, errors })
}

/// Posterior moments of one observation under `params`.
///
/// Importance sampling draws fresh proposals from `rng` and reports Monte
/// Carlo standard errors; it fails with [`Error::Degenerate`] when the
/// effective sample size falls below [`ESS_FLOOR`].
pub fn estep_moments<R: Rng + ?Sized>(obs: &RrfbObservation, params: &FbParams, scheme: Scheme, rng: &mut R) -> Result<PosteriorMoments> {
    let amat = params.a();
    let gamma = params.gamma();
    let m = obs.m();
    match scheme {
        Scheme::Exact if m == 0 => Ok(exact_moments(obs, &amat, &gamma)),
        Scheme::Quadrature(n) if m == 1 => {
            let rule = quadrature::single_zero_rule(n, obs.p());
            latent_moments(obs, &ReducedTilt::new(obs, &amat, &gamma), Source::Rule(&rule), false)
        }
        Scheme::Importance(k) if m >= 1 => {
            let draws = LatentDraws::generate(obs.p(), m, k, rng);
            let mom = latent_moments(obs, &ReducedTilt::new(obs, &amat, &gamma), Source::Draws(&draws), true)?;
            if mom.ess < ESS_FLOOR {
                return Err(Error::Degenerate { ess: mom.ess, floor: ESS_FLOOR });
            }
            Ok(mom)
        }
        s => Err(Error::Precondition(format!("scheme {s:?} not usable with m = {m}"))),
    }
}

/// Parameter-dependent quantities shared by all observations.
#[derive(Debug, Clone)]
pub struct ParamCache {
    pub params: FbParams,
    pub a: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub log_c: f64,
}

impl ParamCache {
    pub fn new(params: &FbParams) -> Result<Self> {
        let log_c = fb::log_norm_const(&params.lambda, &params.gamma_tilde)?.log_value;
        Ok(Self { params: params.clone(), a: params.a(), gamma: params.gamma(), log_c })
    }
}

/// Outcome of evaluating a likelihood context at one parameter value.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub moments: Vec<PosteriorMoments>,
    /// per-observation `log f(x | θ)`
    pub loglik: Vec<f64>,
    /// observations whose proposal was doubled because of low ESS
    pub ess_warnings: Vec<usize>,
    pub min_ess: f64,
}

impl Evaluation {
    pub fn total_loglik(&self) -> f64 {
        self.loglik.iter().sum()
    }
}

/// Observations together with latent proposal draws that stay fixed across
/// parameter values, so the approximate likelihood is a smooth deterministic
/// function of the parameters. Draws depend only on the observation's
/// coordinates, the seed and the salt.
#[derive(Debug, Clone)]
pub struct LikelihoodContext {
    pub obs: Arc<Vec<RrfbObservation>>,
    pub seed: u64,
    pub salt: u64,
    pub sizes: SchemeSizes,
    draws: Vec<Option<Arc<LatentDraws>>>,
}

/// Upper limit on cached draw storage, in `f64`s.
const DRAW_CACHE_LIMIT: usize = 1 << 24;

impl LikelihoodContext {
    pub fn new(obs: Vec<RrfbObservation>, seed: u64, salt: u64, sizes: SchemeSizes) -> Self {
        Self::shared(Arc::new(obs), seed, salt, sizes)
    }

    pub fn shared(obs: Arc<Vec<RrfbObservation>>, seed: u64, salt: u64, sizes: SchemeSizes) -> Self {
        let mut budget = DRAW_CACHE_LIMIT;
        let mut ctx = Self { obs, seed, salt, sizes, draws: Vec::new() };
        let mut draws = Vec::with_capacity(ctx.obs.len());
        for o in ctx.obs.iter() {
            let need = sizes.is_draws * (o.m() + 1);
            if o.m() >= 2 && need <= budget {
                budget -= need;
                draws.push(Some(Arc::new(ctx.make_draws(o, sizes.is_draws))));
            } else {
                draws.push(None);
            }
        }
        ctx.draws = draws;
        ctx
    }

    /// Same observations with an independent set of draws.
    pub fn with_salt(&self, salt: u64) -> Self {
        Self::shared(self.obs.clone(), self.seed, salt, self.sizes)
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn p(&self) -> usize {
        self.obs.first().map_or(0, |o| o.p())
    }

    fn make_draws(&self, o: &RrfbObservation, k: usize) -> LatentDraws {
        let mut r = rng::stream(self.seed, "latent", o.content_key() ^ rng::splitmix(self.salt));
        LatentDraws::generate(o.p(), o.m(), k, &mut r)
    }

    /// Moments and log-likelihood of observation `i`; the flag reports an
    /// ESS-triggered doubling of the proposal.
    pub fn observation(&self, i: usize, pc: &ParamCache) -> Result<(PosteriorMoments, f64, bool)> {
        let o = &self.obs[i];
        let tilt_needed = o.m() >= 1;
        let (mom, warned) = if !tilt_needed {
            (exact_moments(o, &pc.a, &pc.gamma), false)
        } else if o.m() == 1 {
            let rule = quadrature::single_zero_rule(self.sizes.quad_nodes, o.p());
            (latent_moments(o, &ReducedTilt::new(o, &pc.a, &pc.gamma), Source::Rule(&rule), false)?, false)
        } else {
            let tilt = ReducedTilt::new(o, &pc.a, &pc.gamma);
            let owned;
            let d = match &self.draws[i] {
                Some(d) => d.as_ref(),
                None => {
                    owned = self.make_draws(o, self.sizes.is_draws);
                    &owned
                }
            };
            let mom = latent_moments(o, &tilt, Source::Draws(d), false)?;
            if mom.ess < ESS_FLOOR {
                // the first K of the doubled set coincide with the frozen draws
                let doubled = self.make_draws(o, 2 * self.sizes.is_draws);
                (latent_moments(o, &tilt, Source::Draws(&doubled), false)?, true)
            } else {
                (mom, false)
            }
        };
        let ll = mom.log_marginal - pc.log_c;
        if !ll.is_finite() {
            return Err(Error::Numerical(format!("non-finite log-likelihood at observation {i}")));
        }
        Ok((mom, ll, warned))
    }

    /// Evaluate every observation; parallel over observations, with results
    /// collected in input order.
    pub fn evaluate(&self, pc: &ParamCache) -> Result<Evaluation> {
        let results: Vec<Result<(PosteriorMoments, f64, bool)>> =
            (0..self.obs.len()).into_par_iter().map(|i| self.observation(i, pc)).collect();
        let mut moments = Vec::with_capacity(results.len());
        let mut loglik = Vec::with_capacity(results.len());
        let mut ess_warnings = Vec::new();
        let mut min_ess = f64::INFINITY;
        for (i, r) in results.into_iter().enumerate() {
            let (mom, ll, warned) = r?;
            if warned {
                ess_warnings.push(i);
            }
            min_ess = min_ess.min(mom.ess);
            moments.push(mom);
            loglik.push(ll);
        }
        Ok(Evaluation { moments, loglik, ess_warnings, min_ess })
    }

    pub fn loglik(&self, params: &FbParams) -> Result<f64> {
        let pc = ParamCache::new(params)?;
        let ll: Vec<Result<f64>> = (0..self.obs.len()).into_par_iter().map(|i| self.observation(i, &pc).map(|r| r.1)).collect();
        ll.into_iter().sum()
    }
}

/// Approximate `log f(x | θ)` of a single observation; latent draws come
/// from a stream keyed by `frozen_seed` and the observation's coordinates.
pub fn observed_loglik(obs: &RrfbObservation, params: &FbParams, sizes: SchemeSizes, frozen_seed: u64) -> Result<f64> {
    let ctx = LikelihoodContext::new(vec![obs.clone()], frozen_seed, 0, sizes);
    let pc = ParamCache::new(params)?;
    ctx.observation(0, &pc).map(|r| r.1)
}

/// One RRFB draw; the measure-zero all-nonpositive event is redrawn.
pub fn rrfb_sample<R: Rng + ?Sized>(params: &FbParams, rng: &mut R) -> Result<RrfbObservation> {
    rrfb_sample_with(&FbSampler::new(params), rng)
}

pub fn rrfb_sample_with<R: Rng + ?Sized>(sampler: &FbSampler, rng: &mut R) -> Result<RrfbObservation> {
    loop {
        let (z, _) = sampler.sample(rng)?;
        if z.iter().any(|v| *v > 0.0) {
            return rectify_renormalize(&z);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::sphere::OrthogonalMatrix;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4, PI};

    fn case1() -> FbParams {
        let q = OrthogonalMatrix::givens(&[(1, 2), (2, 3)], 0.35, 3).unwrap();
        let gt = (q.matrix().transpose() * DVector::from_vec(vec![1.0, 2.0, 4.0])).iter().copied().collect();
        FbParams::new(q, vec![0.0, 2.0, 6.0], gt).unwrap()
    }

    fn obs(v: &[f64]) -> RrfbObservation {
        RrfbObservation::new(DVector::from_column_slice(v), 0.0).unwrap()
    }

    #[test]
    fn rectify_examples() {
        let x = rectify_renormalize(&DVector::from_vec(vec![0.6, -0.8])).unwrap();
        assert_eq!(x.x.as_slice(), &[1.0, 0.0]);
        let s = 1.0 / 3f64.sqrt();
        let x = rectify_renormalize(&DVector::from_vec(vec![s, s, -s])).unwrap();
        assert!((x.x[0] - FRAC_1_SQRT_2).abs() < 1e-15 && x.x[2] == 0.0);
        let pos = DVector::from_vec(vec![0.6, 0.8, 0.0]);
        assert_eq!(rectify_renormalize(&pos).unwrap().x, pos);
        assert!(rectify_renormalize(&DVector::from_vec(vec![-0.6, -0.8])).is_err());
    }

    #[test]
    fn decompose_examples() {
        let b = decompose(&DVector::from_vec(vec![0.6, 0.8, 0.0]), 0.0).unwrap();
        assert_eq!((b.permutation.clone(), b.m, b.x_pos.clone()), (vec![0, 1, 2], 1, vec![0.6, 0.8]));
        let b = decompose(&DVector::from_vec(vec![0.0, 1.0, 0.0]), 0.0).unwrap();
        assert_eq!((b.permutation, b.m, b.x_pos), (vec![1, 0, 2], 2, vec![1.0]));
        let b = decompose(&DVector::from_vec(vec![0.6, 0.8]), 0.0).unwrap();
        assert_eq!(b.m, 0);
        assert!(decompose(&DVector::zeros(3), 0.0).is_err());
    }

    #[test]
    fn latent_examples() {
        let o = obs(&[0.6, 0.8, 0.0]);
        let z = latent_from_blocks(1.0, &[-1.0], &o.blocks).unwrap();
        assert_eq!(z, o.x);
        let z = latent_from_blocks(0.0, &[-1.0], &o.blocks).unwrap();
        assert_eq!(z.as_slice(), &[0.0, 0.0, -1.0]);
        let z = latent_from_blocks(0.5, &[-1.0], &o.blocks).unwrap();
        for (a, b) in z.iter().zip([0.42426, 0.56569, -0.70711]) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!((z.norm() - 1.0).abs() < 1e-10);
        assert!(latent_from_blocks(0.5, &[-1.0, 0.0], &o.blocks).is_err());
    }

    #[test]
    fn posterior_weight_components() {
        let o = obs(&[0.6, 0.8, 0.0]);
        let uni = FbParams::uniform(3);
        for d in [0.1, 0.5, 0.9] {
            let w = log_posterior_weight(d, &[-1.0], &o, &uni).unwrap();
            assert!((w + 0.5 * (1.0 - d).ln()).abs() < 1e-14);
        }
        let params = case1();
        let w = log_posterior_weight(0.5, &[-1.0], &o, &params).unwrap();
        let z = DVector::from_vec(vec![0.6 * 0.5f64.sqrt(), 0.8 * 0.5f64.sqrt(), -0.5f64.sqrt()]);
        let want = -0.5 * 0.5f64.ln() + fb::tilt(&z, &params.a(), &params.gamma());
        assert!((w - want).abs() < 1e-12);
        let reduced = ReducedTilt::new(&o, &params.a(), &params.gamma()).eval(0.5, &[-1.0]);
        assert!((reduced - fb::tilt(&z, &params.a(), &params.gamma())).abs() < 1e-12);
        assert!(log_posterior_weight(0.0, &[-1.0], &o, &params).is_err());
    }

    #[test]
    fn reduced_tilt_matches_full_tilt_with_two_zeros() {
        let params = case1();
        let o = obs(&[0.0, 1.0, 0.0]);
        let t = ReducedTilt::new(&o, &params.a(), &params.gamma());
        let mut r = stream(5, "rt", 0);
        for _ in 0..20 {
            let d: f64 = r.random();
            let u = sphere::sample_uniform_negative_orthant(2, &mut r);
            let z = latent_from_blocks(d, u.as_slice(), &o.blocks).unwrap();
            assert!((t.eval(d, u.as_slice()) - fb::tilt(&z, &params.a(), &params.gamma())).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_moments_example() {
        let o = obs(&[0.6, 0.8]);
        let mut r = stream(0, "x", 0);
        let mom = estep_moments(&o, &FbParams::uniform(2), Scheme::Exact, &mut r).unwrap();
        let want = [0.36, 0.48, 0.48, 0.64];
        for (a, b) in mom.m1.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(mom.m2.as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn uniform_single_zero_eta() {
        let o = obs(&[0.6, 0.8, 0.0]);
        let mut r = stream(0, "x", 0);
        let mom = estep_moments(&o, &FbParams::uniform(3), Scheme::Quadrature(50), &mut r).unwrap();
        assert!((mom.eta[0] - FRAC_PI_4).abs() < 1e-6);
        // E√(1-δ) under Beta(1, 1/2) = B(1, 1)/B(1, 1/2) = 1/2; the integrand
        // is not smooth at δ = 1, so 50 nodes only give about 4e-5
        assert!((mom.m2[2] + 0.5).abs() < 1e-4);
        assert!((mom.m1.trace() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scheme_must_match_zero_count() {
        let mut r = stream(0, "x", 0);
        let uni = FbParams::uniform(3);
        assert!(estep_moments(&obs(&[0.6, 0.8, 0.0]), &uni, Scheme::Exact, &mut r).is_err());
        assert!(estep_moments(&obs(&[0.0, 1.0, 0.0]), &uni, Scheme::Quadrature(50), &mut r).is_err());
    }

    #[test]
    fn importance_runs_agree() {
        let params = case1();
        let o = obs(&[1.0, 0.0, 0.0]);
        let a = estep_moments(&o, &params, Scheme::Importance(200_000), &mut stream(1, "is", 0)).unwrap();
        let b = estep_moments(&o, &params, Scheme::Importance(200_000), &mut stream(2, "is", 0)).unwrap();
        let (ea, eb) = (a.errors.as_ref().unwrap(), b.errors.as_ref().unwrap());
        for i in 0..3 {
            let se = (ea.m2[i].powi(2) + eb.m2[i].powi(2)).sqrt();
            assert!((a.m2[i] - b.m2[i]).abs() < 4.0 * se + 1e-12);
            assert!(a.m2[i] <= 0.0 || i == 0);
            for j in 0..3 {
                let se = (ea.m1[(i, j)].powi(2) + eb.m1[(i, j)].powi(2)).sqrt();
                assert!((a.m1[(i, j)] - b.m1[(i, j)]).abs() < 4.0 * se + 1e-12);
            }
        }
        assert!((a.m1.trace() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadrature_matches_importance_for_single_zero() {
        let params = case1();
        let o = obs(&[0.6, 0.8, 0.0]);
        let q = estep_moments(&o, &params, Scheme::Quadrature(50), &mut stream(0, "q", 0)).unwrap();
        let is = estep_moments(&o, &params, Scheme::Importance(100_000), &mut stream(3, "is", 0)).unwrap();
        let e = is.errors.unwrap();
        for i in 0..3 {
            assert!((q.m2[i] - is.m2[i]).abs() < 3.0 * e.m2[i] + 1e-9);
        }
        assert!((q.log_marginal - is.log_marginal).abs() < 3.0 * e.log_marginal + 1e-9);
    }

    #[test]
    fn observed_loglik_uniform_single_zero() {
        let o = obs(&[0.6, 0.8, 0.0]);
        let ll = observed_loglik(&o, &FbParams::uniform(3), SchemeSizes::LIKELIHOOD, 0).unwrap();
        assert!((ll + (4.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn observed_loglik_without_zeros_is_fb_density() {
        let params = case1();
        let x = RrfbObservation::new(DVector::from_vec(vec![0.48, 0.6, 0.64]), 0.0).unwrap();
        let ll = observed_loglik(&x, &params, SchemeSizes::LIKELIHOOD, 0).unwrap();
        let want = fb::fb_log_density_unnorm(&x.x, &params).unwrap()
            - fb::log_norm_const(&params.lambda, &params.gamma_tilde).unwrap().log_value;
        assert_eq!(ll, want);
    }

    #[test]
    fn frozen_draws_follow_content_not_position() {
        let a = obs(&[1.0, 0.0, 0.0]);
        let b = obs(&[0.0, 0.0, 1.0]);
        let params = case1();
        let pc = ParamCache::new(&params).unwrap();
        let c1 = LikelihoodContext::new(vec![a.clone(), b.clone()], 4, 0, SchemeSizes::ESTEP);
        let c2 = LikelihoodContext::new(vec![b, a], 4, 0, SchemeSizes::ESTEP);
        assert_eq!(c1.observation(0, &pc).unwrap().1, c2.observation(1, &pc).unwrap().1);
    }

    #[test]
    fn rrfb_samples_live_on_the_orthant() {
        let params = case1();
        let mut r = stream(12, "s", 0);
        for _ in 0..100 {
            let o = rrfb_sample(&params, &mut r).unwrap();
            assert!(o.x.iter().all(|v| *v >= 0.0));
            assert!((o.x.norm() - 1.0).abs() < 1e-12);
            assert_eq!(rectify_renormalize(&o.x).unwrap(), o);
        }
    }
}
