//! Experiment configuration, artifacts on disk and the subcommands of the
//! `epiwane` binary.
//!
//! Configurations are strict JSON: unknown fields are rejected and every
//! error names the offending field path. Each artifact records the
//! configuration fingerprint (SHA-256 of the canonical configuration
//! without `seed` and `output_dir`) and the seed, as a leading
//! `# epiwane fingerprint=<hex> seed=<u64>` line in CSV files and as
//! top-level fields in JSON files.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fclt::{estimate_driver_covariance, sample_paths, Driver, DriverSampler, FluctuationOperator};
use crate::flln::{solve_flln, Scheme, SolverSettings};
use crate::grid::TimeGrid;
use crate::profiles::{DurationLaw, InitialLaw, Model, PiecewiseParams, ProfileError, ProfileLaw, Segment};
use crate::simulator::{simulate_population, InitialAssignment, SimSettings};
use crate::verify::{
    compare_marginals, default_probes, run_ensemble, run_verify, EnsembleSettings, ProbeMarginals, Quantity,
    VerifyError, VerifyPlan,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config error at `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("{path}: malformed artifact: {reason}")]
    Artifact { path: PathBuf, reason: String },
    #[error("{path}: fingerprint/seed {found} does not match the configuration ({expected})")]
    FingerprintMismatch { path: PathBuf, expected: String, found: String },
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("thread pool: {0}")]
    Threads(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn config_err(field: impl Into<String>, reason: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum DurationConfig {
    Exponential { rate: f64 },
    Deterministic { value: f64 },
    Gamma { shape: f64, scale: f64 },
}

impl From<DurationConfig> for DurationLaw {
    fn from(d: DurationConfig) -> Self {
        match d {
            DurationConfig::Exponential { rate } => DurationLaw::Exponential { rate },
            DurationConfig::Deterministic { value } => DurationLaw::Deterministic { value },
            DurationConfig::Gamma { shape, scale } => DurationLaw::Gamma { shape, scale },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub value: f64,
    pub duration: DurationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileConfig {
    /// `λ(t) = λ 1{t < η}`, `γ(t) = 1{t ≥ η}`.
    SisIndicator { lambda_base: f64, duration: DurationConfig },
    /// `λ(t) = λ 1{t < η}`, `γ(t) = 1{t ≥ η}(1 - e^{-θ(t-η)})`.
    SisGradual {
        lambda_base: f64,
        duration: DurationConfig,
        waning_rate: f64,
    },
    PiecewiseConstant {
        infectivity: Vec<SegmentConfig>,
        susceptibility: Vec<SegmentConfig>,
        final_susceptibility: f64,
    },
}

impl ProfileConfig {
    fn build(&self) -> Result<ProfileLaw, ProfileError> {
        match self {
            ProfileConfig::SisIndicator { lambda_base, duration } => {
                ProfileLaw::sis_indicator(*lambda_base, (*duration).into())
            }
            ProfileConfig::SisGradual {
                lambda_base,
                duration,
                waning_rate,
            } => ProfileLaw::sis_gradual(*lambda_base, (*duration).into(), *waning_rate),
            ProfileConfig::PiecewiseConstant {
                infectivity,
                susceptibility,
                final_susceptibility,
            } => {
                let seg = |s: &SegmentConfig| Segment {
                    value: s.value,
                    duration: s.duration.into(),
                };
                ProfileLaw::piecewise(PiecewiseParams {
                    infectivity: infectivity.iter().map(seg).collect(),
                    susceptibility: susceptibility.iter().map(seg).collect(),
                    final_susceptibility: *final_susceptibility,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub p_infected: f64,
    /// Law of the initially infected individuals' profiles; defaults to the
    /// fresh-infection law.
    #[serde(default)]
    pub profile: Option<ProfileConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FcltConfig {
    /// Population size of the comparison ensemble.
    pub n: usize,
    pub replicates: usize,
    /// Auxiliary agents for the driver covariance.
    pub agents: usize,
    /// Sampled fluctuation paths.
    pub paths: usize,
    pub dt: f64,
    /// Defaults to the experiment horizon.
    pub horizon: Option<f64>,
    /// Defaults to `{T/4, T/2, 3T/4, T}`.
    pub probes: Option<Vec<f64>>,
    pub corollary_literal: bool,
    /// Relative tolerance of the variance comparison.
    pub tol: f64,
}

impl Default for FcltConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            replicates: 500,
            agents: 20_000,
            paths: 2000,
            dt: 0.1,
            horizon: None,
            probes: None,
            corollary_literal: false,
            tol: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Probe time of the rate fit; defaults to `min(5, T)`.
    pub rate_time: Option<f64>,
    pub coupling_n: usize,
    pub coupling_replicates: usize,
    pub quarantine_replicates: usize,
    pub exactness_replicates: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            rate_time: None,
            coupling_n: 1000,
            coupling_replicates: 50,
            quarantine_replicates: 100,
            exactness_replicates: 100_000,
        }
    }
}

fn default_dt() -> f64 {
    0.01
}
fn default_tol() -> f64 {
    1e-10
}
fn default_max_iter() -> usize {
    200
}
fn default_sizes() -> Vec<usize> {
    vec![100, 400, 1600, 6400]
}
fn default_replicates() -> usize {
    200
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: ProfileConfig,
    pub initial: InitialConfig,
    pub horizon: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub scheme: Scheme,
    /// `simulate` uses the first size; `ensemble` and the rate fit use all.
    #[serde(default = "default_sizes")]
    pub population_sizes: Vec<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub assignment: InitialAssignment,
    #[serde(default)]
    pub fclt: FcltConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

/// Parse and validate a configuration file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        config_err(if field == "." { "<root>".to_string() } else { field }, e.into_inner().to_string())
    })?;
    cfg.model()?;
    cfg.grid()?;
    cfg.fclt_grid()?;
    Ok(cfg)
}

fn positive(field: &str, v: f64) -> Result<(), HarnessError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(config_err(field, format!("must be positive and finite, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn model(&self) -> Result<Model, HarnessError> {
        let prefixed = |prefix: &str| {
            let prefix = prefix.to_string();
            move |e: ProfileError| match e {
                ProfileError::InvalidParameter { field, reason } => config_err(format!("{prefix}.{field}"), reason),
            }
        };
        let law = self.profile.build().map_err(prefixed("profile"))?;
        let init_law = match &self.initial.profile {
            Some(p) => p.build().map_err(prefixed("initial.profile"))?,
            None => law.clone(),
        };
        let init = InitialLaw::new(self.initial.p_infected, init_law).map_err(prefixed("initial"))?;
        Ok(Model::new(law, init))
    }

    pub fn solver(&self) -> SolverSettings {
        SolverSettings {
            tol: self.tol,
            max_iter: self.max_iter,
            scheme: self.scheme,
        }
    }

    fn check_step(&self, field: &str, dt: f64) -> Result<(), HarnessError> {
        positive(field, dt)?;
        let lambda_star = self.model()?.lambda_star();
        if dt * lambda_star >= 0.5 {
            return Err(config_err(
                field,
                format!("dt * lambda_star = {} must be below 0.5", dt * lambda_star),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid, HarnessError> {
        positive("horizon", self.horizon)?;
        self.check_step("dt", self.dt)?;
        positive("tol", self.tol)?;
        if self.population_sizes.is_empty() || self.population_sizes.contains(&0) {
            return Err(config_err("population_sizes", "need at least one positive size"));
        }
        if self.replicates == 0 {
            return Err(config_err("replicates", "must be positive"));
        }
        TimeGrid::new(self.horizon, self.dt).map_err(|e| config_err("dt", e.to_string()))
    }

    pub fn fclt_grid(&self) -> Result<TimeGrid, HarnessError> {
        self.check_step("fclt.dt", self.fclt.dt)?;
        let horizon = self.fclt.horizon.unwrap_or(self.horizon);
        positive("fclt.horizon", horizon)?;
        if self.fclt.n == 0 || self.fclt.replicates < 2 || self.fclt.paths < 2 {
            return Err(config_err("fclt", "need n > 0, replicates ≥ 2 and paths ≥ 2"));
        }
        let grid = TimeGrid::new(horizon, self.fclt.dt).map_err(|e| config_err("fclt.dt", e.to_string()))?;
        for (k, &t) in self.fclt.probes.iter().flatten().enumerate() {
            if grid.index_of(t).is_none() {
                return Err(config_err(format!("fclt.probes[{k}]"), format!("{t} is not on the fluctuation grid")));
            }
        }
        Ok(grid)
    }

    pub fn probes(&self) -> Result<Vec<f64>, HarnessError> {
        let grid = self.fclt_grid()?;
        Ok(self.fclt.probes.clone().unwrap_or_else(|| default_probes(&grid)))
    }

    pub fn verify_plan(&self) -> Result<VerifyPlan, HarnessError> {
        let mut plan = VerifyPlan::reference(self.model()?, self.seed);
        let fclt_grid = self.fclt_grid()?;
        plan.solver = self.solver();
        plan.dt = self.dt;
        plan.assignment = self.assignment;
        plan.rate_sizes = self.population_sizes.clone();
        plan.rate_replicates = self.replicates;
        plan.rate_time = self.verify.rate_time.unwrap_or(self.horizon.min(5.0));
        plan.fclt_n = self.fclt.n;
        plan.fclt_replicates = self.fclt.replicates;
        plan.fclt_agents = self.fclt.agents;
        plan.fclt_paths = self.fclt.paths;
        plan.fclt_dt = self.fclt.dt;
        plan.fclt_horizon = fclt_grid.horizon();
        plan.fclt_tol = self.fclt.tol;
        plan.probes = self.probes()?;
        plan.corollary_literal = self.fclt.corollary_literal;
        plan.coupling_n = self.verify.coupling_n;
        plan.coupling_replicates = self.verify.coupling_replicates;
        plan.quarantine_replicates = self.verify.quarantine_replicates;
        plan.exactness_replicates = self.verify.exactness_replicates;
        Ok(plan)
    }

    /// Hex SHA-256 of the canonical JSON form without `seed` and
    /// `output_dir`.
    pub fn fingerprint(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("seed");
            map.remove("output_dir");
        }
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Simulate,
    Flln,
    Fclt,
    Ensemble,
    Verify,
    Compare,
}

/// Artifacts written by a subcommand and whether its checks passed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunStatus {
    pub pass: bool,
    pub artifacts: Vec<PathBuf>,
    /// Human-readable lines for the terminal.
    pub lines: Vec<String>,
}

fn stamp(cfg: &ExperimentConfig) -> String {
    format!("fingerprint={} seed={}", cfg.fingerprint(), cfg.seed)
}

struct Csv {
    path: PathBuf,
    writer: csv::Writer<Vec<u8>>,
}

impl Csv {
    fn new(dir: &Path, name: &str, cfg: &ExperimentConfig, header: &[&str]) -> Self {
        let mut buf = format!("# epiwane {}\n", stamp(cfg)).into_bytes();
        buf.reserve(1 << 16);
        let mut writer = csv::Writer::from_writer(buf);
        writer.write_record(header).expect("in-memory write");
        Self {
            path: dir.join(name),
            writer,
        }
    }

    fn row(&mut self, values: &[String]) {
        self.writer.write_record(values).expect("in-memory write");
    }

    fn nums(&mut self, values: &[f64]) {
        let v: Vec<String> = values.iter().map(|x| x.to_string()).collect();
        self.row(&v);
    }

    fn finish(self, out: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
        let bytes = self
            .writer
            .into_inner()
            .map_err(|e| HarnessError::Artifact {
                path: self.path.clone(),
                reason: e.to_string(),
            })?;
        fs::write(&self.path, bytes).map_err(io_err(&self.path))?;
        out.push(self.path);
        Ok(())
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, cfg: &ExperimentConfig, body: &T, out: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    #[derive(Serialize)]
    struct Stamped<'a, T> {
        fingerprint: String,
        seed: u64,
        #[serde(flatten)]
        body: &'a T,
    }
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(&Stamped {
        fingerprint: cfg.fingerprint(),
        seed: cfg.seed,
        body,
    })
    .expect("report serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    out.push(path);
    Ok(())
}

/// Read a stamped CSV, check its stamp against `cfg`, and return its
/// header and numeric rows.
fn read_csv(path: &Path, cfg: &ExperimentConfig) -> Result<(Vec<String>, Vec<Vec<f64>>), HarnessError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut first = String::new();
    BufReader::new(&file).read_line(&mut first).map_err(io_err(path))?;
    let found = first
        .trim_end()
        .strip_prefix("# epiwane ")
        .ok_or_else(|| HarnessError::Artifact {
            path: path.to_path_buf(),
            reason: "missing fingerprint line".into(),
        })?;
    let expected = stamp(cfg);
    if found != expected {
        return Err(HarnessError::FingerprintMismatch {
            path: path.to_path_buf(),
            expected,
            found: found.to_string(),
        });
    }
    let bad = |reason: String| HarnessError::Artifact {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| bad(format!("{f:?}: {e}"))))
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

const MARGINAL_HEADER: [&str; 6] = ["sample", "t", "shat", "fhat", "uhat", "ihat"];

fn write_marginals(mut csv: Csv, m: &ProbeMarginals, out: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    for r in 0..m.samples() {
        for (p, &t) in m.probes.iter().enumerate() {
            let v = &m.values[p];
            csv.nums(&[
                r as f64,
                t,
                v[Quantity::S as usize][r],
                v[Quantity::F as usize][r],
                v[Quantity::U as usize][r],
                v[Quantity::I as usize][r],
            ]);
        }
    }
    csv.finish(out)
}

fn read_marginals(path: &Path, cfg: &ExperimentConfig, probes: &[f64]) -> Result<ProbeMarginals, HarnessError> {
    let (header, rows) = read_csv(path, cfg)?;
    if header != MARGINAL_HEADER {
        return Err(HarnessError::Artifact {
            path: path.to_path_buf(),
            reason: format!("unexpected header {header:?}"),
        });
    }
    let mut values: Vec<[Vec<f64>; 4]> = vec![Default::default(); probes.len()];
    for row in rows {
        let p = probes
            .iter()
            .position(|&t| t == row[1])
            .ok_or_else(|| HarnessError::Artifact {
                path: path.to_path_buf(),
                reason: format!("time {} is not a configured probe", row[1]),
            })?;
        values[p][Quantity::S as usize].push(row[2]);
        values[p][Quantity::F as usize].push(row[3]);
        values[p][Quantity::U as usize].push(row[4]);
        values[p][Quantity::I as usize].push(row[5]);
    }
    Ok(ProbeMarginals {
        probes: probes.to_vec(),
        values,
    })
}

/// Options from the command line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Worker threads; `None` uses all logical cores.
    pub threads: Option<usize>,
}

/// Run a subcommand on a dedicated thread pool.
pub fn execute(cmd: Subcommand, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunStatus, HarnessError> {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.unwrap_or(0))
        .build()
        .map_err(|e| HarnessError::Threads(e.to_string()))?;
    pool.install(|| run_subcommand(cmd, &cfg))
}

/// Run one subcommand on the current thread pool, writing artifacts under
/// `cfg.output_dir`.
pub fn run_subcommand(cmd: Subcommand, cfg: &ExperimentConfig) -> Result<RunStatus, HarnessError> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let model = cfg.model()?;
    let mut artifacts = Vec::new();
    let mut lines = Vec::new();
    let mut pass = true;
    match cmd {
        Subcommand::Simulate => {
            let grid = cfg.grid()?;
            let n = cfg.population_sizes[0];
            let mut s = SimSettings::new(n, grid, cfg.seed);
            s.assignment = cfg.assignment;
            let tr = simulate_population(&model, &s).map_err(VerifyError::from)?;
            let mut csv = Csv::new(&dir, "trajectory.csv", cfg, &["t", "fbar", "sbar", "I", "U"]);
            for g in 0..grid.len() {
                csv.row(&[
                    grid.time(g).to_string(),
                    tr.fbar[g].to_string(),
                    tr.sbar[g].to_string(),
                    tr.infected[g].to_string(),
                    tr.uninfected[g].to_string(),
                ]);
            }
            csv.finish(&mut artifacts)?;
            let mut csv = Csv::new(&dir, "events.csv", cfg, &["t", "k", "i"]);
            for e in &tr.events {
                csv.row(&[e.t.to_string(), e.k.to_string(), e.i.to_string()]);
            }
            csv.finish(&mut artifacts)?;
            lines.push(format!("simulated N = {n}: {} infections", tr.events.len()));
        }
        Subcommand::Flln => {
            let grid = cfg.grid()?;
            let sol = solve_flln(&model, &grid, &cfg.solver()).map_err(VerifyError::from)?;
            let mut csv = Csv::new(&dir, "flln.csv", cfg, &["t", "sbar", "fbar", "ubar", "ibar"]);
            for g in 0..grid.len() {
                csv.nums(&[grid.time(g), sol.sbar[g], sol.fbar[g], sol.ubar[g], sol.ibar[g]]);
            }
            csv.finish(&mut artifacts)?;
            write_json(&dir, "flln_report.json", cfg, &sol.report, &mut artifacts)?;
            lines.push(format!(
                "Ī({}) = {:.6}, residual {:.2e}, conservation defect {:.2e}",
                grid.horizon(),
                sol.ibar[grid.len() - 1],
                sol.report.residual,
                sol.report.conservation_defect
            ));
        }
        Subcommand::Fclt => {
            let plan = cfg.verify_plan()?;
            let grid = cfg.fclt_grid()?;
            let limit = plan.limit_on(&grid)?;
            let cov = estimate_driver_covariance(&model, &limit, cfg.fclt.agents, stream_seed_for(cfg, 30))
                .map_err(VerifyError::from)?;
            let sampler = DriverSampler::new(&cov).map_err(VerifyError::from)?;
            let op = FluctuationOperator::new(&model, &limit, cfg.fclt.corollary_literal);
            let paths = sample_paths(&op, &sampler, stream_seed_for(cfg, 31), cfg.fclt.paths).map_err(VerifyError::from)?;
            let mut csv = Csv::new(
                &dir,
                "covariance_diag.csv",
                cfg,
                &["t", "jhat", "jhat_se", "mhat", "mhat_se", "jhat1", "jhat1_se", "mhat1", "mhat1_se"],
            );
            for g in 0..grid.len() {
                let mut row = vec![grid.time(g)];
                for c in Driver::ALL {
                    row.push(cov.get(c, g, c, g));
                    row.push(cov.stderr(c, g, c, g));
                }
                csv.nums(&row);
            }
            csv.finish(&mut artifacts)?;
            let header = ["t", "shat", "fhat", "uhat", "ihat"];
            let mut csv = Csv::new(&dir, "fclt_path.csv", cfg, &header);
            let p0 = &paths[0];
            for g in 0..grid.len() {
                csv.nums(&[grid.time(g), p0.shat[g], p0.fhat[g], p0.uhat[g], p0.ihat[g]]);
            }
            csv.finish(&mut artifacts)?;
            let mut csv = Csv::new(&dir, "fclt_variance.csv", cfg, &header);
            let k = paths.len() as f64;
            for g in 0..grid.len() {
                let mut row = vec![grid.time(g)];
                for q in [Quantity::S, Quantity::F, Quantity::U, Quantity::I] {
                    let v: Vec<f64> = paths.iter().map(|p| q.of_path(p)[g]).collect();
                    let mean = v.iter().sum::<f64>() / k;
                    row.push(v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0));
                }
                csv.nums(&row);
            }
            csv.finish(&mut artifacts)?;
            let marg = ProbeMarginals::from_paths(&paths, &cfg.probes()?)?;
            write_marginals(Csv::new(&dir, "fclt_marginals.csv", cfg, &MARGINAL_HEADER), &marg, &mut artifacts)?;
            lines.push(format!(
                "driver covariance from {} agents (jitter {:.1e}); {} paths solved",
                cfg.fclt.agents,
                sampler.jitter(),
                paths.len()
            ));
        }
        Subcommand::Ensemble => {
            let plan = cfg.verify_plan()?;
            let grid = cfg.fclt_grid()?;
            let limit = plan.limit_on(&grid)?;
            let probes = cfg.probes()?;
            for (k, &n) in cfg.population_sizes.iter().enumerate() {
                let settings = EnsembleSettings {
                    n,
                    replicates: cfg.replicates,
                    grid,
                    seed: crate::simulator::stream_seed(cfg.seed, k as u64, -6),
                    assignment: cfg.assignment,
                    fingerprint: cfg.fingerprint(),
                };
                let ens = run_ensemble(&model, &settings, &limit)?;
                let mut header = vec!["t".to_string()];
                for q in ["fbar", "sbar", "I", "U"] {
                    header.push(format!("{q}_mean"));
                    header.push(format!("{q}_var"));
                }
                for q in Quantity::ALL {
                    header.push(format!("{}_var", q.name()));
                }
                let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
                let mut csv = Csv::new(&dir, &format!("ensemble_n{n}.csv"), cfg, &header_refs);
                let var_str = |v: &Option<[Vec<f64>; 4]>, q: usize, g: usize| {
                    v.as_ref().map_or(String::new(), |v| v[q][g].to_string())
                };
                for g in 0..grid.len() {
                    let mut row = vec![grid.time(g).to_string()];
                    for q in 0..4 {
                        row.push(ens.mean[q][g].to_string());
                        row.push(var_str(&ens.variance, q, g));
                    }
                    for q in 0..4 {
                        row.push(var_str(&ens.hat_variance, q, g));
                    }
                    csv.row(&row);
                }
                csv.finish(&mut artifacts)?;
                let marg = ProbeMarginals::from_ensemble(&ens, &probes)?;
                write_marginals(
                    Csv::new(&dir, &format!("ensemble_marginals_n{n}.csv"), cfg, &MARGINAL_HEADER),
                    &marg,
                    &mut artifacts,
                )?;
                lines.push(format!("ensemble N = {n}, M = {}", cfg.replicates));
            }
        }
        Subcommand::Verify => {
            let outcome = run_verify(&cfg.verify_plan()?)?;
            for r in &outcome.results {
                lines.push(r.line());
            }
            pass = outcome.pass();
            write_json(&dir, "report.json", cfg, &outcome, &mut artifacts)?;
        }
        Subcommand::Compare => {
            let probes = cfg.probes()?;
            let model_m = read_marginals(&dir.join("fclt_marginals.csv"), cfg, &probes)?;
            let mut reports = Vec::new();
            for &n in &cfg.population_sizes {
                let emp = read_marginals(&dir.join(format!("ensemble_marginals_n{n}.csv")), cfg, &probes)?;
                let report = compare_marginals(&emp, &model_m, cfg.fclt.tol)?;
                let failed = report.metrics.iter().filter(|m| !m.pass).count();
                lines.push(format!(
                    "N = {n}: {}/{} metrics pass",
                    report.metrics.len() - failed,
                    report.metrics.len()
                ));
                pass &= report.pass();
                reports.push(serde_json::json!({ "n": n, "report": report }));
            }
            write_json(&dir, "compare_report.json", cfg, &serde_json::json!({ "comparisons": reports }), &mut artifacts)?;
        }
    }
    Ok(RunStatus { pass, artifacts, lines })
}

fn stream_seed_for(cfg: &ExperimentConfig, id: u64) -> u64 {
    crate::simulator::stream_seed(cfg.seed, id, -7)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "profile": {"family": "sis_indicator", "lambda_base": 2.0, "duration": {"law": "exponential", "rate": 1.0}},
        "initial": {"p_infected": 0.1},
        "horizon": 10.0
    }"#;

    #[test]
    fn defaults_are_filled() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        assert_eq!(cfg.dt, 0.01);
        assert_eq!(cfg.tol, 1e-10);
        assert_eq!(cfg.fclt, FcltConfig::default());
        assert_eq!(cfg.assignment, InitialAssignment::Deterministic);
    }

    #[test]
    fn errors_name_the_field() {
        let bad = MINIMAL.replace("\"lambda_base\": 2.0", "\"lambda_base\": -2.0");
        match parse_config_str(&bad) {
            Err(HarnessError::Config { field, .. }) => assert_eq!(field, "profile.lambda_base"),
            other => panic!("{other:?}"),
        }
        let bad = MINIMAL.replace("\"horizon\"", "\"extra\": 1, \"horizon\"");
        assert!(matches!(parse_config_str(&bad), Err(HarnessError::Config { .. })));
        let bad = MINIMAL.replace("\"rate\": 1.0", "\"rate\": 1.0, \"mean\": 2");
        match parse_config_str(&bad) {
            Err(HarnessError::Config { field, reason }) => {
                assert!(field.starts_with("profile"), "{field}");
                assert!(reason.contains("mean"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
        let bad = MINIMAL.replace("\"p_infected\": 0.1", "\"p_infected\": \"x\"");
        match parse_config_str(&bad) {
            Err(HarnessError::Config { field, .. }) => assert_eq!(field, "initial.p_infected"),
            other => panic!("{other:?}"),
        }
        let bad = MINIMAL.replace("\"horizon\": 10.0", "\"horizon\": 10.0, \"dt\": 0.3");
        match parse_config_str(&bad) {
            Err(HarnessError::Config { field, .. }) => assert_eq!(field, "dt"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip_and_fingerprint() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let again = parse_config_str(&text).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.fingerprint(), again.fingerprint());
        let mut reseeded = cfg.clone();
        reseeded.seed = 99;
        reseeded.output_dir = "elsewhere".into();
        assert_eq!(cfg.fingerprint(), reseeded.fingerprint());
        let mut changed = cfg.clone();
        changed.horizon = 5.0;
        assert_ne!(cfg.fingerprint(), changed.fingerprint());
    }
}
