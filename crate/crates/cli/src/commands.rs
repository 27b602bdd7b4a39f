use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rrfb_core::inference::{self, ScoreTestConfig};
use rrfb_core::mcem::{self, FitConfig};
use rrfb_core::rng::stream;
use rrfb_core::sim::{self, PerturbationGrid, PowerConfig, ScenarioConfig};
use rrfb_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::Manifest;

#[derive(Debug, Parser)]
#[command(name = "rrfb", version, about = "Rectified-and-renormalized Fisher-Bingham models for compositions with zeros")]
pub struct Cli {
    /// master seed; every random stream is derived from it
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// worker threads (results do not depend on this)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// output directory; primary output goes to stdout when absent
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON file with `fit` and/or `scenario` overrides
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// full-scale replicate, draw and permutation counts
    #[arg(long, global = true)]
    pub paper_scale: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw samples from a built-in scenario
    Simulate(SimulateArgs),
    /// Fit the model to a composition table
    Fit(FitArgs),
    /// Two-sample test on a composition table with two groups
    Test(TestArgs),
    /// Per-coordinate zero proportions
    Zeros(ZerosArgs),
    /// Log-score recovery study
    Logscore(LogscoreArgs),
    /// Power study of the score test against PERMANOVA
    Power(PowerArgs),
    /// Re-run the command recorded in a manifest
    Replay(ReplayArgs),
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct ScenarioArgs {
    #[arg(long, default_value_t = 3)]
    pub p: usize,
    #[arg(long = "case", default_value_t = 1)]
    pub case_id: u8,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// also emit a second group of size n with γ₁ = γ₀ − Qζ(d)
    #[arg(long, allow_negative_numbers = true)]
    pub shift: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// fit only rows with this group label
    #[arg(long)]
    pub group: Option<String>,
    #[arg(long, default_value_t = 1e-12)]
    pub zero_tol: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMethod {
    Score,
    Permanova,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    BrayCurtis,
    Hellinger,
}

#[derive(Debug, Args, Serialize)]
pub struct TestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = TestMethod::Score)]
    pub method: TestMethod,
    #[arg(long, value_enum, default_value_t = Distance::BrayCurtis)]
    pub distance: Distance,
    /// permutations (default 499, 999 with --paper-scale)
    #[arg(long)]
    pub perms: Option<usize>,
    /// rows of the two groups are matched in file order
    #[arg(long)]
    pub paired: bool,
    #[arg(long, default_value_t = 1e-12)]
    pub zero_tol: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct ZerosArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 10_000)]
    pub n_samples: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct LogscoreArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// sample sizes (repeatable)
    #[arg(long = "n", num_args = 1.., default_values_t = [100, 200, 500, 1000])]
    pub n: Vec<usize>,
    /// default 20, 100 with --paper-scale
    #[arg(long)]
    pub replicates: Option<usize>,
    /// fresh draws per replicate; default 2000, 10000 with --paper-scale
    #[arg(long)]
    pub b: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct PowerArgs {
    #[arg(long, default_value_t = 3)]
    pub p: usize,
    #[arg(long = "case", default_value_t = 3)]
    pub case_id: u8,
    /// observations per group
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// shifts; default 11 points on [-1.5, 1.5]
    #[arg(long, num_args = 1.., allow_negative_numbers = true, value_delimiter = ',')]
    pub d: Vec<f64>,
    /// default 20, 500 with --paper-scale
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// PERMANOVA permutations; default 499, 999 with --paper-scale
    #[arg(long)]
    pub perms: Option<usize>,
    /// permutations for the score test (0 = asymptotic only)
    #[arg(long, default_value_t = 0)]
    pub score_perms: usize,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// Contents of `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fit: FitConfig,
    pub scenario: Option<ScenarioConfig>,
}

struct Scale {
    replicates: usize,
    b: usize,
    perms: usize,
    power_replicates: usize,
}

impl Scale {
    fn new(paper: bool) -> Self {
        if paper {
            Self { replicates: 100, b: 10_000, perms: 999, power_replicates: 500 }
        } else {
            Self { replicates: 20, b: 2000, perms: 499, power_replicates: 20 }
        }
    }
}

/// Result of a command before it is written anywhere.
pub struct Outcome {
    pub files: Vec<(String, String)>,
    pub config: serde_json::Value,
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::Csv(_) | Error::Dimension { .. } | Error::NotUnit(_) => 3,
        Error::Numerical(_) | Error::Degenerate { .. } => 4,
        Error::InvalidInput(_) | Error::Precondition(_) | Error::Index(_) => 2,
        Error::Io(_) | Error::Json(_) => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    run_with_argv(cli, argv)
}

fn run_with_argv(cli: Cli, argv: Vec<String>) -> Result<()> {
    if let Command::Replay(r) = &cli.command {
        let m = Manifest::read(&r.manifest)?;
        let mut args = m.argv.clone();
        if let Some(out) = &cli.out {
            strip_flag(&mut args, "--out");
            args.push("--out".into());
            args.push(out.display().to_string());
        }
        let replayed = Cli::try_parse_from(&args).map_err(|e| Error::InvalidInput(e.to_string()))?;
        if matches!(replayed.command, Command::Replay(_)) {
            return Err(Error::InvalidInput("manifest records a replay".into()));
        }
        return run_with_argv(replayed, args);
    }
    let outcome = match cli.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build().map_err(|e| Error::InvalidInput(e.to_string()))?;
            pool.install(|| execute(&cli))?
        }
        None => execute(&cli)?,
    };
    match &cli.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            for (name, content) in &outcome.files {
                std::fs::write(dir.join(name), content)?;
            }
            let names = outcome.files.iter().map(|f| f.0.clone()).collect();
            Manifest::new(command_name(&cli.command), argv, outcome.config, cli.seed, cli.threads, names).write(dir)?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            if let Some((_, content)) = outcome.files.first() {
                stdout.write_all(content.as_bytes())?;
            }
        }
    }
    Ok(())
}

fn strip_flag(args: &mut Vec<String>, flag: &str) {
    let mut i = 0;
    while i < args.len() {
        if args[i] == flag {
            args.drain(i..(i + 2).min(args.len()));
        } else if args[i].starts_with(&format!("{flag}=")) {
            args.remove(i);
        } else {
            i += 1;
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate(_) => "simulate",
        Command::Fit(_) => "fit",
        Command::Test(_) => "test",
        Command::Zeros(_) => "zeros",
        Command::Logscore(_) => "logscore",
        Command::Power(_) => "power",
        Command::Replay(_) => "replay",
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("config {}: {e}", p.display())))
        }
        None => Ok(RunConfig::default()),
    }
}

fn scenario(args: &ScenarioArgs, cfg: &RunConfig) -> Result<ScenarioConfig> {
    match &cfg.scenario {
        Some(s) => {
            s.params()?;
            Ok(s.clone())
        }
        None => ScenarioConfig::builtin(args.p, args.case_id),
    }
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    let cfg = load_config(cli.config.as_deref())?;
    let scale = Scale::new(cli.paper_scale);
    let seed = cli.seed;
    match &cli.command {
        Command::Simulate(a) => {
            let sc = scenario(&a.scenario, &cfg)?;
            let base = sc.params()?;
            let mut obs = sim::simulate(&base, a.n, seed, "simulate")?;
            let mut groups = vec!["0".to_string(); a.n];
            if let Some(d) = a.shift {
                let grid = PerturbationGrid::default_for(sc.p);
                obs.extend(sim::simulate(&grid.shifted(&base, d), a.n, seed, "simulate-shifted")?);
                groups.extend(vec!["1".to_string(); a.n]);
            }
            let mut buf = Vec::new();
            sim::write_observations(&mut buf, &obs, &groups)?;
            let text = String::from_utf8(buf).expect("csv output is utf-8");
            Ok(Outcome { files: vec![("samples.csv".into(), text)], config: json!({ "scenario": sc, "n": a.n, "shift": a.shift }) })
        }
        Command::Fit(a) => {
            let ing = sim::ingest_compositions(&a.input, a.zero_tol)?;
            let data: Vec<_> = match &a.group {
                Some(g) => ing.observations.iter().zip(&ing.groups).filter(|(_, l)| *l == g).map(|(o, _)| o.clone()).collect(),
                None => ing.observations.clone(),
            };
            if data.is_empty() {
                return Err(Error::Validation("no observations selected".into()));
            }
            let fit_cfg = FitConfig { seed, ..cfg.fit.clone() };
            let res = mcem::fit(&data, &fit_cfg)?;
            let text = serde_json::to_string_pretty(&res.to_json())? + "\n";
            Ok(Outcome { files: vec![("fit.json".into(), text)], config: json!({ "fit": fit_cfg, "args": a }) })
        }
        Command::Test(a) => {
            let ing = sim::ingest_compositions(&a.input, a.zero_tol)?;
            let perms = a.perms.unwrap_or(scale.perms);
            let mut rng = stream(seed, "test", 0);
            let text = match a.method {
                TestMethod::Score => {
                    let data = ing.two_sample(a.paired)?;
                    let config = ScoreTestConfig { fit: FitConfig { seed, ..cfg.fit.clone() }, n_permutations: perms, ..Default::default() };
                    let res = inference::score_test(&data, &config, &mut rng)?;
                    serde_json::to_string_pretty(&res)?
                }
                TestMethod::Permanova => {
                    if a.paired {
                        return Err(Error::InvalidInput("paired PERMANOVA is not supported".into()));
                    }
                    let labels = ing.label_indices();
                    let dm = match a.distance {
                        Distance::BrayCurtis => inference::bray_curtis_matrix(&ing.observations),
                        Distance::Hellinger => inference::sqrt_euclidean_distance_matrix(&ing.observations),
                    };
                    let res = inference::permanova(&dm, &labels, perms, &mut rng)?;
                    serde_json::to_string_pretty(&json!({
                        "pseudo_F": res.pseudo_f,
                        "p_permutation": res.p_value,
                        "n_permutations": res.n_permutations,
                        "distance": a.distance,
                    }))?
                }
            };
            Ok(Outcome { files: vec![("test.json".into(), text + "\n")], config: json!({ "fit": cfg.fit, "args": a, "perms": perms }) })
        }
        Command::Zeros(a) => {
            let sc = scenario(&a.scenario, &cfg)?;
            let z = sim::run_zero_table(&sc, a.n_samples, seed)?;
            let mut text = String::from("p,case,coordinate,proportion\n");
            for (j, v) in z.iter().enumerate() {
                writeln!(text, "{},{},{},{}", sc.p, sc.case_id, j + 1, v).expect("string write");
            }
            Ok(Outcome { files: vec![("zeros.csv".into(), text)], config: json!({ "scenario": sc, "n_samples": a.n_samples }) })
        }
        Command::Logscore(a) => {
            let sc = scenario(&a.scenario, &cfg)?;
            let reps = a.replicates.unwrap_or(scale.replicates);
            let b = a.b.unwrap_or(scale.b);
            let mut text = String::from("p,case,n,replicate,B,delta,se,converged,iterations\n");
            let mut summary = Vec::new();
            for &n in &a.n {
                let res = sim::run_logscore(&sc, n, reps, b, seed ^ n as u64, &cfg.fit)?;
                for r in &res {
                    writeln!(text, "{},{},{},{},{},{},{},{},{}", sc.p, sc.case_id, n, r.replicate, r.b, fmt(r.delta), fmt(r.se), r.converged, r.iterations).expect("string write");
                }
                let m = res.iter().map(|r| r.delta).sum::<f64>() / res.len() as f64;
                let sd = (res.iter().map(|r| (r.delta - m).powi(2)).sum::<f64>() / (res.len() as f64 - 1.0).max(1.0)).sqrt();
                summary.push(json!({ "n": n, "mean_delta": m, "se": sd / (res.len() as f64).sqrt(), "replicates": reps, "B": b }));
            }
            let summary = serde_json::to_string_pretty(&summary)? + "\n";
            Ok(Outcome {
                files: vec![("logscore.csv".into(), text), ("logscore_summary.json".into(), summary)],
                config: json!({ "scenario": sc, "fit": cfg.fit, "n": a.n, "replicates": reps, "B": b }),
            })
        }
        Command::Power(a) => {
            let sc = scenario(&ScenarioArgs { p: a.p, case_id: a.case_id }, &cfg)?;
            let mut grid = PerturbationGrid::default_for(sc.p);
            if !a.d.is_empty() {
                grid.d_values = a.d.clone();
            }
            let config = PowerConfig {
                grid,
                n: a.n,
                replicates: a.replicates.unwrap_or(scale.power_replicates),
                alpha: a.alpha,
                permanova_permutations: a.perms.unwrap_or(scale.perms),
                score: ScoreTestConfig { fit: cfg.fit.clone(), n_permutations: a.score_perms, ..Default::default() },
                seed,
            };
            let (rows, reps) = sim::run_power(&sc, &config)?;
            let mut text = String::from("method,d,rejections,replicates,power\n");
            for r in &rows {
                writeln!(text, "{},{},{},{},{}", r.method.name(), r.d, r.rejections, r.replicates, r.power).expect("string write");
            }
            let mut detail = String::from("d,replicate,method,p_value\n");
            for r in &reps {
                for (m, pv) in &r.p_values {
                    writeln!(detail, "{},{},{},{}", r.d, r.replicate, m.name(), fmt(*pv)).expect("string write");
                }
            }
            Ok(Outcome {
                files: vec![("power.csv".into(), text), ("power_replicates.csv".into(), detail)],
                config: json!({ "scenario": sc, "power": config }),
            })
        }
        Command::Replay(_) => unreachable!("handled by run"),
    }
}
