//! Scenario registry and simulation experiments: zero proportions,
//! log-score recovery and two-sample power. Every random quantity is drawn
//! from a stream keyed by `(seed, tag, item)`, so results do not depend on
//! the worker count.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fb::{FbParams, FbSampler};
use crate::inference::{self, ScoreTestConfig, TwoSampleData};
use crate::mcem::{self, FitConfig};
use crate::rng::{splitmix, stream};
use crate::rrfb::{rrfb_sample_with, LikelihoodContext, ParamCache, RrfbObservation, SchemeSizes};
use crate::sphere::OrthogonalMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaSpec {
    /// `γ` in original coordinates
    Direct(Vec<f64>),
    /// `γ̃ = Qᵀγ`
    Rotated(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub p: usize,
    #[serde(rename = "case")]
    pub case_id: u8,
    pub lambda: Vec<f64>,
    pub gamma_spec: GammaSpec,
    /// one-based coordinate pairs
    pub givens_pairs: Vec<(usize, usize)>,
    pub theta: f64,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
}

const PAIRS_3: &[(usize, usize)] = &[(1, 2), (2, 3)];
const PAIRS_5: &[(usize, usize)] = &[(1, 2), (2, 3), (4, 5)];
const PAIRS_10: &[(usize, usize)] = &[(1, 2), (2, 3), (3, 4), (5, 6), (7, 8), (9, 10)];
const GAMMA_10: [f64; 10] = [7.0, 6.5, 6.0, 5.5, 5.0, 6.0, 7.5, 8.5, 9.0, 9.0];

impl ScenarioConfig {
    /// The nine built-in settings, indexed by `p ∈ {3, 5, 10}` and case 1-3.
    pub fn builtin(p: usize, case_id: u8) -> Result<Self> {
        use GammaSpec::*;
        let (lambda, gamma_spec, pairs): (Vec<f64>, GammaSpec, &[(usize, usize)]) = match (p, case_id) {
            (3, 1) => (vec![0.0, 2.0, 6.0], Direct(vec![1.0, 2.0, 4.0]), PAIRS_3),
            (3, 2) => (vec![0.0, 2.0, 6.0], Direct(vec![8.0, 2.0, 4.0]), PAIRS_3),
            (3, 3) => (vec![0.0, 1.5, 4.0], Rotated(vec![2.2, 2.0, 0.25]), PAIRS_3),
            (5, 1) => (vec![0.0, 2.0, 4.0, 6.0, 8.0], Direct(vec![7.0, 6.0, 5.0, 5.0, 6.0]), PAIRS_5),
            (5, 2) => (vec![0.0, 4.0, 4.5, 8.0, 12.0], Direct(vec![1.0, 2.0, 3.0, 4.0, 5.0]), PAIRS_5),
            (5, 3) => (vec![0.0, 1.0, 2.5, 4.5, 7.0], Rotated(vec![2.4, 2.0, 1.6, 0.35, 0.2]), PAIRS_5),
            (10, 1) => ((0..10).map(f64::from).collect(), Direct(GAMMA_10.to_vec()), PAIRS_10),
            (10, 2) => (vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 7.05, 7.10], Direct(GAMMA_10.to_vec()), PAIRS_10),
            (10, 3) => (
                vec![0.0, 0.6, 1.2, 2.0, 3.0, 4.2, 5.5, 6.8, 8.2, 10.0],
                Rotated(vec![2.8, 2.5, 2.2, 1.9, 1.3, 1.0, 0.7, 0.35, 0.2, 0.1]),
                PAIRS_10,
            ),
            _ => return Err(Error::InvalidInput(format!("no built-in scenario for p = {p}, case = {case_id}"))),
        };
        Ok(Self { p, case_id, lambda, gamma_spec, givens_pairs: pairs.to_vec(), theta: 0.35, n: 1000, replicates: 20, seed: 0 })
    }

    pub fn all_builtin() -> Vec<Self> {
        [3, 5, 10].iter().flat_map(|&p| (1..=3).map(move |c| Self::builtin(p, c).expect("registry entry"))).collect()
    }

    pub fn q(&self) -> Result<OrthogonalMatrix> {
        OrthogonalMatrix::givens(&self.givens_pairs, self.theta, self.p)
    }

    pub fn params(&self) -> Result<FbParams> {
        let q = self.q()?;
        let gt = match &self.gamma_spec {
            GammaSpec::Rotated(g) => g.clone(),
            GammaSpec::Direct(g) => {
                if g.len() != self.p {
                    return Err(Error::Dimension { expected: self.p, got: g.len() });
                }
                (q.matrix().transpose() * DVector::from_column_slice(g)).iter().copied().collect()
            }
        };
        FbParams::new(q, self.lambda.clone(), gt)
    }
}

/// `n` independent RRFB draws; draw `i` uses stream `(seed, tag, i)`.
pub fn simulate(params: &FbParams, n: usize, seed: u64, tag: &str) -> Result<Vec<RrfbObservation>> {
    let sampler = FbSampler::new(params);
    (0..n).into_par_iter().map(|i| rrfb_sample_with(&sampler, &mut stream(seed, tag, i as u64))).collect()
}

/// Fraction of exact zeros per coordinate over `n_samples` draws.
pub fn run_zero_table(scenario: &ScenarioConfig, n_samples: usize, seed: u64) -> Result<Vec<f64>> {
    let draws = simulate(&scenario.params()?, n_samples, seed, "zeros")?;
    let mut counts = vec![0usize; scenario.p];
    for o in &draws {
        for &j in o.blocks.zeros() {
            counts[j] += 1;
        }
    }
    Ok(counts.iter().map(|c| *c as f64 / n_samples.max(1) as f64).collect())
}

/// Symmetric perturbation grid for the power study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationGrid {
    pub d_values: Vec<f64>,
    pub perturbed: usize,
}

impl PerturbationGrid {
    /// 11 equally spaced points on `[-1.5, 1.5]`; the last 1/2/3
    /// coordinates are perturbed for `p = 3/5/10` (one more than a third of
    /// `p`, rounded down, otherwise).
    pub fn default_for(p: usize) -> Self {
        let d_values = (0..11).map(|k| -1.5 + 0.3 * k as f64).map(|d: f64| (d * 1e12).round() / 1e12).collect();
        Self { d_values, perturbed: Self::perturbed_for(p) }
    }

    pub fn perturbed_for(p: usize) -> usize {
        match p {
            3 => 1,
            5 => 2,
            10 => 3,
            _ => (p / 3).max(1),
        }
    }

    /// `ζ = (0, …, 0, d, …, d)`.
    pub fn zeta(&self, p: usize, d: f64) -> DVector<f64> {
        DVector::from_fn(p, |i, _| if i + self.perturbed >= p { d } else { 0.0 })
    }

    /// `(A, γ₀ − Qζ)`.
    pub fn shifted(&self, base: &FbParams, d: f64) -> FbParams {
        let g1 = base.gamma() - base.q.matrix() * self.zeta(base.p(), d);
        base.with_gamma(&g1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogScoreResult {
    pub replicate: usize,
    pub n: usize,
    pub b: usize,
    /// mean of `log f(X|θ₀) − log f(X|θ̂)` over the fresh draws
    pub delta: f64,
    pub se: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Per-observation log-likelihood differences with common random numbers:
/// the same draws `x` and the same frozen latent draws in both terms.
pub fn log_score_difference(x: &[RrfbObservation], truth: &FbParams, est: &FbParams, sizes: SchemeSizes, frozen_seed: u64) -> Result<(f64, f64)> {
    let ctx = LikelihoodContext::new(x.to_vec(), frozen_seed, 0, sizes);
    let l0 = ctx.evaluate(&ParamCache::new(truth)?)?.loglik;
    let l1 = ctx.evaluate(&ParamCache::new(est)?)?.loglik;
    let d: Vec<f64> = l0.iter().zip(&l1).map(|(a, b)| a - b).collect();
    let b = d.len() as f64;
    let mean = d.iter().sum::<f64>() / b;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1.0).max(1.0);
    Ok((mean, (var / b).sqrt()))
}

/// Fit `replicates` samples of size `n` and score each fit on `b` fresh
/// draws from the truth.
pub fn run_logscore(scenario: &ScenarioConfig, n: usize, replicates: usize, b: usize, seed: u64, fit: &FitConfig) -> Result<Vec<LogScoreResult>> {
    if b < 1000 {
        return Err(Error::Precondition(format!("B = {b} < 1000")));
    }
    let truth = scenario.params()?;
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let rs = splitmix(seed ^ splitmix(r as u64 + 1));
            let data = simulate(&truth, n, rs, "logscore-data")?;
            let config = FitConfig { seed: rs, ..fit.clone() };
            let res = mcem::fit(&data, &config)?;
            let fresh = simulate(&truth, b, rs, "logscore-fresh")?;
            let (delta, se) = log_score_difference(&fresh, &truth, &res.params, SchemeSizes::LIKELIHOOD, splitmix(rs))?;
            Ok(LogScoreResult { replicate: r, n, b, delta, se, converged: res.converged, iterations: res.iterations })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerMethod {
    RrfbScore,
    RrfbScorePermutation,
    PermanovaBrayCurtis,
    PermanovaHellinger,
}

impl PowerMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::RrfbScore => "rrfb-score",
            Self::RrfbScorePermutation => "rrfb-score-permutation",
            Self::PermanovaBrayCurtis => "permanova-bray-curtis",
            Self::PermanovaHellinger => "permanova-hellinger",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerConfig {
    pub grid: PerturbationGrid,
    /// observations per group
    pub n: usize,
    pub replicates: usize,
    pub alpha: f64,
    pub permanova_permutations: usize,
    pub score: ScoreTestConfig,
    pub seed: u64,
}

/// p-values of every method for one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerReplicate {
    pub d: f64,
    pub replicate: usize,
    pub p_values: Vec<(PowerMethod, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub method: PowerMethod,
    pub d: f64,
    pub rejections: usize,
    pub replicates: usize,
    pub power: f64,
}

/// One replicate at shift `d`: a sample from `θ₀` and one from the shifted
/// parameters, tested by every method.
pub fn power_replicate(base: &FbParams, config: &PowerConfig, d: f64, replicate: usize) -> Result<PowerReplicate> {
    let key = splitmix(config.seed ^ splitmix(d.to_bits()) ^ splitmix(replicate as u64 + 1).rotate_left(17));
    let g0 = simulate(base, config.n, key, "power-group0")?;
    let g1 = simulate(&config.grid.shifted(base, d), config.n, key, "power-group1")?;
    let data = TwoSampleData::new(g0, g1)?;
    let mut score = config.score.clone();
    score.fit.seed = splitmix(key);
    let mut rng = stream(key, "power-tests", 0);
    let st = inference::score_test(&data, &score, &mut rng)?;
    let mut p_values = vec![(PowerMethod::RrfbScore, st.p_asymptotic)];
    if let Some(pp) = st.p_permutation {
        p_values.push((PowerMethod::RrfbScorePermutation, pp));
    }
    let pooled = data.pooled();
    let labels: Vec<usize> = (0..pooled.len()).map(|i| usize::from(i >= config.n)).collect();
    let bc = inference::permanova(&inference::bray_curtis_matrix(&pooled), &labels, config.permanova_permutations, &mut rng)?;
    let he = inference::permanova(&inference::sqrt_euclidean_distance_matrix(&pooled), &labels, config.permanova_permutations, &mut rng)?;
    p_values.push((PowerMethod::PermanovaBrayCurtis, bc.p_value));
    p_values.push((PowerMethod::PermanovaHellinger, he.p_value));
    Ok(PowerReplicate { d, replicate, p_values })
}

/// Rejection rates per method and `d`. Replicates run in parallel.
pub fn run_power(scenario: &ScenarioConfig, config: &PowerConfig) -> Result<(Vec<PowerRow>, Vec<PowerReplicate>)> {
    if !config.grid.d_values.contains(&0.0) {
        return Err(Error::Precondition("d grid must contain 0".into()));
    }
    let base = scenario.params()?;
    let jobs: Vec<(f64, usize)> = config.grid.d_values.iter().flat_map(|&d| (0..config.replicates).map(move |r| (d, r))).collect();
    let reps: Vec<PowerReplicate> = jobs.par_iter().map(|&(d, r)| power_replicate(&base, config, d, r)).collect::<Result<_>>()?;
    Ok((summarize_power(&reps, config.alpha), reps))
}

pub fn summarize_power(reps: &[PowerReplicate], alpha: f64) -> Vec<PowerRow> {
    let mut rows: Vec<PowerRow> = Vec::new();
    for rep in reps {
        for &(m, pv) in &rep.p_values {
            let row = match rows.iter_mut().find(|r| r.method == m && r.d == rep.d) {
                Some(r) => r,
                None => {
                    rows.push(PowerRow { method: m, d: rep.d, rejections: 0, replicates: 0, power: 0.0 });
                    rows.last_mut().expect("just pushed")
                }
            };
            row.replicates += 1;
            row.rejections += usize::from(pv < alpha);
        }
    }
    for r in &mut rows {
        r.power = r.rejections as f64 / r.replicates as f64;
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Simplex,
    Sphere,
}

/// Validated compositions with their group labels.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub mode: InputMode,
    pub ids: Vec<String>,
    pub groups: Vec<String>,
    pub observations: Vec<RrfbObservation>,
}

impl Ingested {
    /// Split into two samples by label, in order of first appearance.
    pub fn two_sample(&self, paired: bool) -> Result<TwoSampleData> {
        let mut labels: Vec<&str> = Vec::new();
        for g in &self.groups {
            if !labels.contains(&g.as_str()) {
                labels.push(g);
            }
        }
        if labels.len() != 2 {
            return Err(Error::Validation(format!("expected exactly two groups, found {}", labels.len())));
        }
        let pick = |l: &str| -> Vec<RrfbObservation> { self.observations.iter().zip(&self.groups).filter(|(_, g)| *g == l).map(|(o, _)| o.clone()).collect() };
        let (a, b) = (pick(labels[0]), pick(labels[1]));
        if paired {
            if a.len() != b.len() {
                return Err(Error::Validation("paired design needs equal group sizes".into()));
            }
            TwoSampleData::paired(a, b)
        } else {
            TwoSampleData::new(a, b)
        }
    }

    /// Integer labels in order of first appearance.
    pub fn label_indices(&self) -> Vec<usize> {
        let mut seen: Vec<&str> = Vec::new();
        self.groups
            .iter()
            .map(|g| match seen.iter().position(|s| *s == g) {
                Some(k) => k,
                None => {
                    seen.push(g);
                    seen.len() - 1
                }
            })
            .collect()
    }
}

const CONSTRAINT_TOL: f64 = 1e-6;

/// Read a composition table. The header is `mode=simplex|sphere,group,…`
/// followed by one name per component; each row is an identifier, a group
/// label and the components. Simplex rows are square-rooted.
pub fn ingest_compositions(path: &Path, zero_tol: f64) -> Result<Ingested> {
    ingest_reader(std::fs::File::open(path)?, zero_tol)
}

pub fn ingest_reader<R: Read>(reader: R, zero_tol: f64) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let mode = match header.get(0) {
        Some("mode=simplex") => InputMode::Simplex,
        Some("mode=sphere") => InputMode::Sphere,
        other => return Err(Error::Validation(format!("header must start with mode=simplex or mode=sphere, found {other:?}"))),
    };
    if header.get(1) != Some("group") {
        return Err(Error::Validation("second header column must be `group`".into()));
    }
    let p = header.len() - 2;
    if p < 2 {
        return Err(Error::Validation("need at least two components".into()));
    }
    let (mut ids, mut groups, mut observations) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        if rec.len() != p + 2 {
            return Err(Error::Validation(format!("row {row}: expected {} fields, found {}", p + 2, rec.len())));
        }
        let vals: Vec<f64> = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|_| Error::Validation(format!("row {row}: cannot parse `{s}`"))))
            .collect::<Result<_>>()?;
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(format!("row {row}: entries must be finite and nonnegative")));
        }
        let total = match mode {
            InputMode::Simplex => vals.iter().sum::<f64>(),
            InputMode::Sphere => vals.iter().map(|v| v * v).sum::<f64>().sqrt(),
        };
        if (total - 1.0).abs() > CONSTRAINT_TOL {
            return Err(Error::Validation(format!("row {row}: constraint violated (total {total})")));
        }
        let x = match mode {
            InputMode::Simplex => DVector::from_iterator(p, vals.iter().map(|v| (v / total).sqrt())),
            InputMode::Sphere => DVector::from_iterator(p, vals.iter().map(|v| v / total)),
        };
        let x = &x / x.norm();
        let x = x.map(|v| if v <= zero_tol { 0.0 } else { v });
        let x = &x / x.norm();
        observations.push(RrfbObservation::new(x, zero_tol).map_err(|e| Error::Validation(format!("row {row}: {e}")))?);
        ids.push(rec[0].to_string());
        groups.push(rec[1].to_string());
    }
    if observations.is_empty() {
        return Err(Error::Validation("no data rows".into()));
    }
    Ok(Ingested { mode, ids, groups, observations })
}

/// Write observations in sphere mode, round-trippable through
/// [`ingest_reader`].
pub fn write_observations<W: Write>(w: W, obs: &[RrfbObservation], groups: &[String]) -> Result<()> {
    let p = obs.first().map_or(0, |o| o.p());
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["mode=sphere".to_string(), "group".to_string()];
    header.extend((1..=p).map(|j| format!("x{j}")));
    wtr.write_record(&header)?;
    for (i, (o, g)) in obs.iter().zip(groups).enumerate() {
        let mut rec = vec![format!("s{i}"), g.clone()];
        rec.extend(o.x.iter().map(|v| format!("{v:e}")));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
