//! Command-line driver: `simulate`, `estimate`, `transfer`, `select` and
//! `eval`.
//!
//! Every subcommand accepts the same flag set. `--config FILE` reads flat
//! `key = value` lines whose keys are flag names without the dashes; the
//! file is applied first so that explicit flags win.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    d_metric, generate_scenario, run_experiment, ExperimentConfig, Method, MethodSettings,
    ScenarioKind, ScenarioSpec,
};
use crate::io::{load_matrix, read_json, write_dense_csv, write_json};
use crate::mixed_score::{full_pipeline, DcmmEstimate, Diagnostics, PipelineOptions};
use crate::model::{build_probability_matrix, DcmmParams};
use crate::spectral::OrthonormalBasis;
use crate::transfer::{
    cross_validate_tau, non_oracle_tdcmm, oracle_tdcmm, select_sources, CvResult, SourceSet,
    TraceStep,
};

const DEFAULT_REPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Oracle,
    NonOracle,
}

/// Flags shared by every subcommand; unset values take per-command
/// defaults.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunConfig {
    /// Target network: dense CSV or `i j` edge list (.txt/.edges/.el).
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Glob matching the source network files, taken in sorted order.
    #[arg(long)]
    pub sources: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of communities of the target (required by estimate and
    /// transfer; scenarios default to 4).
    #[arg(long)]
    pub k: Option<usize>,
    /// Dimension of the shared subspace (scenarios default to 2).
    #[arg(long)]
    pub k_shared: Option<usize>,
    /// Rank extracted from each source (defaults to --k).
    #[arg(long)]
    pub k_source: Option<usize>,
    /// Transfer mode (default non-oracle).
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Selection threshold; sources need alignment at least k-shared − tau.
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    /// Comma-separated thresholds to choose from by held-out likelihood.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub cv_tau: Option<Vec<f64>>,
    /// Sketches averaged in the first stage (default 10).
    #[arg(long)]
    pub sketch_l: Option<usize>,
    /// First-stage sketch width (default the smallest valid for --power-q).
    #[arg(long)]
    pub sketch_p: Option<usize>,
    /// Second-stage sketch width (default max(2 k-shared, k-shared + 7)).
    #[arg(long)]
    pub sketch_pprime: Option<usize>,
    /// Power iterations per sketch (default ⌈ln d⌉).
    #[arg(long)]
    pub power_q: Option<usize>,
    /// Estimate the shared subspace on two halves of the sources.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub split: Option<bool>,
    /// Selection rounds before giving up on a fixed point (default 10).
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Master seed (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replicates per `eval` cell (default 200).
    #[arg(long)]
    pub reps: Option<usize>,
    /// Scenario family; `eval` accepts a comma list.
    #[arg(long, value_delimiter = ',')]
    pub scenario: Option<Vec<ScenarioKind>>,
    /// Node count; `eval` accepts a comma list.
    #[arg(long, value_delimiter = ',')]
    pub d: Option<Vec<usize>>,
    /// Networks including the target; `eval` accepts a comma list.
    #[arg(long, value_delimiter = ',')]
    pub m: Option<Vec<usize>>,
    /// Source perturbation scale (default 0.05 for s1/s3, 0.3 for s2).
    #[arg(long)]
    pub noise: Option<f64>,
    /// Private over weak shared connectivity eigenvalue, at most 10 (default 8).
    #[arg(long)]
    pub gap_ratio: Option<f64>,
    /// Share of informative sources in s3 (default 0.5).
    #[arg(long)]
    pub frac_informative: Option<f64>,
    /// Methods run by `eval`: dcmm, oracle, oracle-all, non-oracle.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// Planted truth (truth.json or a probability matrix) for scoring.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Floor applied to non-positive degree radicands instead of failing.
    #[arg(long)]
    pub radicand_floor: Option<f64>,
    /// Only run source selection; no estimate is written.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub select_only: Option<bool>,
    /// Flat key = value file applied before the flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Write the resolved configuration to this file and exit.
    #[arg(long)]
    #[serde(skip)]
    pub dump_config: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(
    name = "dcmm-transfer",
    version,
    about = "Mixed-membership network estimation with source transfer"
)]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a target and sources from a scenario and write them with the truth.
    Simulate(RunConfig),
    /// Target-only estimation.
    Estimate(RunConfig),
    /// Estimation with a shared subspace learned from the sources.
    Transfer(RunConfig),
    /// Source selection only (transfer --mode non-oracle --select-only).
    Select(RunConfig),
    /// Monte-Carlo comparison of methods over a scenario grid.
    Eval(RunConfig),
}

impl Command {
    fn config_mut(&mut self) -> &mut RunConfig {
        match self {
            Command::Simulate(c)
            | Command::Estimate(c)
            | Command::Transfer(c)
            | Command::Select(c)
            | Command::Eval(c) => c,
        }
    }
}

#[derive(Debug, Parser)]
#[command(no_binary_name = true, args_override_self = true)]
struct ConfigFile {
    #[command(flatten)]
    cfg: RunConfig,
}

fn kv_value(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Array(items) => items.iter().map(kv_value).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// `--key=value` arguments from a flat config text.
fn config_args(text: &str, origin: &Path) -> Result<Vec<String>> {
    let mut args = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: n + 1,
            msg: format!("expected 'key = value', found '{content}'"),
        })?;
        args.push(format!("--{}={}", key.trim(), value.trim()));
    }
    Ok(args)
}

impl RunConfig {
    /// Set fields as sorted `key = value` lines.
    pub fn to_kv(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        let mut out = String::new();
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map.iter().filter(|(_, v)| !v.is_null()) {
                out.push_str(&format!("{k} = {}\n", kv_value(v)));
            }
        }
        out
    }

    pub fn from_kv(text: &str, origin: &Path) -> Result<Self> {
        let args = config_args(text, origin)?;
        ConfigFile::try_parse_from(args)
            .map(|c| c.cfg)
            .map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: 0,
                msg: e.to_string().trim().to_string(),
            })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_kv(&text, path)
    }

    /// Every referenced input file must exist.
    pub fn check_inputs(&self) -> Result<()> {
        for path in [&self.target, &self.truth].into_iter().flatten() {
            if !path.exists() {
                return Err(Error::Io {
                    path: path.clone(),
                    source: std::io::ErrorKind::NotFound.into(),
                });
            }
        }
        Ok(())
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn require<T: Clone>(value: &Option<T>, flag: &str) -> Result<T> {
        value
            .clone()
            .ok_or_else(|| Error::InvalidConfig(format!("--{flag} is required")))
    }

    fn single<T: Copy>(list: &Option<Vec<T>>, flag: &str, default: T) -> Result<T> {
        match list.as_deref() {
            None => Ok(default),
            Some([v]) => Ok(*v),
            Some(_) => Err(Error::InvalidConfig(format!(
                "--{flag} takes a single value here"
            ))),
        }
    }

    fn settings(&self) -> MethodSettings {
        let defaults = MethodSettings::default();
        MethodSettings {
            tau: self.tau,
            sketch_l: self.sketch_l,
            sketch_p: self.sketch_p,
            sketch_p_prime: self.sketch_pprime,
            power_q: self.power_q,
            split_sources: self.split.unwrap_or(false),
            max_iters: self.max_iters.unwrap_or(defaults.max_iters),
        }
    }

    fn scenario_spec(&self, kind: ScenarioKind, d: usize, m: usize) -> ScenarioSpec {
        let mut spec = ScenarioSpec::new(kind, d, m, self.seed());
        if let Some(k) = self.k {
            spec.k_target = k;
            spec.k_source = k;
        }
        if let Some(k) = self.k_shared {
            spec.k_shared = k;
        }
        if let Some(k) = self.k_source {
            spec.k_source = k;
        }
        if let Some(v) = self.noise {
            spec.noise = v;
        }
        if let Some(v) = self.gap_ratio {
            spec.gap_ratio = v;
        }
        if let Some(v) = self.frac_informative {
            spec.frac_informative = v;
        }
        spec
    }

    fn pipeline(&self, k: usize) -> PipelineOptions {
        PipelineOptions {
            radicand_floor: self.radicand_floor,
            ..PipelineOptions::new(k, self.seed())
        }
    }
}

/// Planted parameters and ground truth written by `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: ScenarioSpec,
    pub theta: Vec<f64>,
    /// Row-major memberships.
    pub pi: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    /// Planted shared directions, one row per node.
    pub shared: Vec<Vec<f64>>,
    pub informative: Vec<usize>,
    pub sources: Vec<String>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let ncols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), ncols, |i, j| {
        rows[i].get(j).copied().unwrap_or(f64::NAN)
    })
}

impl Truth {
    pub fn params(&self) -> Result<DcmmParams> {
        DcmmParams::new(
            DVector::from_vec(self.theta.clone()),
            from_rows(&self.pi),
            from_rows(&self.p),
        )
    }

    pub fn probability_matrix(&self) -> Result<DMatrix<f64>> {
        Ok(build_probability_matrix(&self.params()?)?.into_inner())
    }
}

fn load_truth(path: &Path, d: usize) -> Result<DMatrix<f64>> {
    let h = if path.extension().is_some_and(|e| e == "json") {
        read_json::<Truth>(path)?.probability_matrix()?
    } else {
        load_matrix(path, Some(d))?
    };
    if h.nrows() != d {
        return Err(Error::DimensionMismatch {
            expected: format!("{d}-node truth"),
            found: h.nrows().to_string(),
        });
    }
    Ok(h)
}

#[derive(Debug, Serialize)]
struct EstimateReport {
    d: usize,
    k: usize,
    eigenvalues: Vec<f64>,
    diagnostics: Diagnostics,
    error_h: Option<f64>,
}

fn write_estimate(dir: &Path, est: &DcmmEstimate, truth: Option<&DMatrix<f64>>) -> Result<()> {
    let params = &est.params;
    write_dense_csv(
        &dir.join("theta.csv"),
        &DMatrix::from_column_slice(params.theta.len(), 1, params.theta.as_slice()),
    )?;
    write_dense_csv(&dir.join("pi.csv"), &params.pi)?;
    write_dense_csv(&dir.join("p.csv"), &params.p_mat)?;
    write_dense_csv(&dir.join("h_hat.csv"), &est.h_hat)?;
    let report = EstimateReport {
        d: params.nodes(),
        k: params.communities(),
        eigenvalues: est.eigen.values.iter().copied().collect(),
        diagnostics: est.diagnostics.clone(),
        error_h: truth.map(|h| d_metric(&est.h_hat, h)).transpose()?,
    };
    write_json(&dir.join("diagnostics.json"), &report)
}

fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let kind = RunConfig::single(&cfg.scenario, "scenario", ScenarioKind::S1)?;
    let d = RunConfig::single(&cfg.d, "d", 50)?;
    let m = RunConfig::single(&cfg.m, "m", 20)?;
    let spec = cfg.scenario_spec(kind, d, m);
    let scenario = generate_scenario(&spec)?;
    let dir = cfg.out_dir();
    write_dense_csv(&dir.join("target.csv"), &scenario.target)?;
    let mut names = Vec::with_capacity(scenario.sources.len());
    for (i, x) in scenario.sources.iter().enumerate() {
        let name = format!("source_{i:03}.csv");
        write_dense_csv(&dir.join(&name), x)?;
        names.push(name);
    }
    write_dense_csv(&dir.join("h_true.csv"), &scenario.h)?;
    let truth = Truth {
        spec,
        theta: scenario.params.theta.iter().copied().collect(),
        pi: rows(&scenario.params.pi),
        p: rows(&scenario.params.p_mat),
        shared: rows(scenario.shared.matrix()),
        informative: scenario.informative.indices.clone(),
        sources: names,
    };
    write_json(&dir.join("truth.json"), &truth)
}

fn load_target(cfg: &RunConfig) -> Result<DMatrix<f64>> {
    let path = RunConfig::require(&cfg.target, "target")?;
    load_matrix(&path, None)
}

fn cmd_estimate(cfg: &RunConfig) -> Result<()> {
    let x = load_target(cfg)?;
    let k = RunConfig::require(&cfg.k, "k")?;
    let truth = cfg
        .truth
        .as_deref()
        .map(|p| load_truth(p, x.nrows()))
        .transpose()?;
    let est = full_pipeline(&x, None, &cfg.pipeline(k))?;
    write_estimate(&cfg.out_dir(), &est, truth.as_ref())
}

fn source_paths(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let Some(pattern) = cfg.sources.as_deref() else {
        return Ok(Vec::new());
    };
    let entries = glob::glob(pattern)
        .map_err(|e| Error::InvalidConfig(format!("bad --sources pattern: {e}")))?;
    let mut paths = entries
        .map(|e| {
            e.map_err(|e| Error::Io {
                path: e.path().to_path_buf(),
                source: std::io::Error::other(e.to_string()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    paths.sort();
    Ok(paths)
}

#[derive(Debug, Serialize)]
struct SelectionTrace {
    mode: Mode,
    tau: f64,
    sources: Vec<String>,
    selected: SourceSet,
    trace: Vec<TraceStep>,
    cross_validation: Option<CvResult>,
}

fn basis_csv(path: &Path, basis: &OrthonormalBasis) -> Result<()> {
    write_dense_csv(path, basis.matrix())
}

fn cmd_transfer(cfg: &RunConfig, select_only: bool) -> Result<()> {
    let x = load_target(cfg)?;
    let d = x.nrows();
    let k = RunConfig::require(&cfg.k, "k")?;
    let k_shared = RunConfig::require(&cfg.k_shared, "k-shared")?;
    let mode = cfg.mode.unwrap_or(Mode::NonOracle);
    let truth = cfg.truth.as_deref().map(|p| load_truth(p, d)).transpose()?;
    let paths = source_paths(cfg)?;
    let sources = paths
        .iter()
        .map(|p| load_matrix(p, Some(d)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&DMatrix<f64>> = sources.iter().collect();
    if mode == Mode::Oracle && refs.is_empty() {
        return Err(Error::InvalidConfig(
            "--mode oracle needs at least one file matching --sources".into(),
        ));
    }
    let k_source = cfg.k_source.unwrap_or(k);
    let mut tcfg = cfg
        .settings()
        .transfer_config(d, k, k_shared, k_source, cfg.seed());
    let pipeline = cfg.pipeline(k);
    let dir = cfg.out_dir();

    let cv = match (&cfg.cv_tau, mode) {
        (Some(grid), Mode::NonOracle) if !refs.is_empty() => {
            Some(cross_validate_tau(&x, &refs, &tcfg, grid, &pipeline)?)
        }
        _ => None,
    };
    if let Some(cv) = &cv {
        tcfg.tau = cv.tau;
    }
    let names: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    let trace_file = |selected: SourceSet, trace: Vec<TraceStep>| SelectionTrace {
        mode,
        tau: tcfg.tau,
        sources: names.clone(),
        selected,
        trace,
        cross_validation: cv.clone(),
    };

    if select_only {
        let sel = select_sources(&x, &refs, &tcfg, None)?;
        basis_csv(&dir.join("shared.csv"), &sel.shared)?;
        return write_json(
            &dir.join("selection_trace.json"),
            &trace_file(sel.set, sel.trace),
        );
    }

    let (basis, set, trace) = match mode {
        Mode::Oracle => (
            oracle_tdcmm(&x, &refs, &tcfg)?,
            SourceSet::all(refs.len()),
            Vec::new(),
        ),
        Mode::NonOracle => {
            let (basis, sel) = non_oracle_tdcmm(&x, &refs, &tcfg)?;
            (basis, sel.set, sel.trace)
        }
    };
    let est = if set.is_empty() {
        full_pipeline(&x, None, &pipeline)?
    } else {
        full_pipeline(&x, Some(&basis.combined), &pipeline)?
    };
    write_estimate(&dir, &est, truth.as_ref())?;
    basis_csv(&dir.join("shared.csv"), &basis.shared)?;
    basis_csv(&dir.join("private.csv"), &basis.private)?;
    write_json(&dir.join("selection_trace.json"), &trace_file(set, trace))
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let kinds = cfg
        .scenario
        .clone()
        .unwrap_or_else(|| vec![ScenarioKind::S1]);
    let ds = cfg.d.clone().unwrap_or_else(|| vec![50]);
    let ms = cfg.m.clone().unwrap_or_else(|| vec![20]);
    let mut cells = Vec::new();
    for &kind in &kinds {
        for &d in &ds {
            for &m in &ms {
                cells.push(cfg.scenario_spec(kind, d, m));
            }
        }
    }
    let exp = ExperimentConfig {
        cells,
        methods: cfg.methods.clone().unwrap_or_else(|| Method::ALL.to_vec()),
        reps: cfg.reps.unwrap_or(DEFAULT_REPS),
        seed: cfg.seed(),
        settings: cfg.settings(),
    };
    let report = run_experiment(&exp)?;
    let dir = cfg.out_dir();
    report.write_rows(&dir.join("report.csv"))?;
    report.write_summary(&dir.join("summary.json"))?;
    report.write_timings(&dir.join("timings.csv"))
}

/// Merge the `--config` file underneath the command-line flags.
fn resolve(args: &[OsString], parsed: Cli) -> std::result::Result<Cli, ExitFailure> {
    let mut cli = parsed;
    let Some(path) = cli.command.config_mut().config.clone() else {
        return Ok(cli);
    };
    let text = std::fs::read_to_string(&path).map_err(|source| {
        ExitFailure::Run(Error::Io {
            path: path.clone(),
            source,
        })
    })?;
    let file_args = config_args(&text, &path).map_err(ExitFailure::Run)?;
    let mut merged: Vec<OsString> = args[..2].to_vec();
    merged.extend(file_args.into_iter().map(OsString::from));
    merged.extend(args[2..].iter().cloned());
    cli = Cli::try_parse_from(merged).map_err(ExitFailure::Usage)?;
    Ok(cli)
}

enum ExitFailure {
    Usage(clap::Error),
    Run(Error),
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Simulate(c) => cmd_simulate(c),
        Command::Estimate(c) => cmd_estimate(c),
        Command::Transfer(c) => cmd_transfer(c, c.select_only.unwrap_or(false)),
        Command::Select(c) => cmd_transfer(
            &RunConfig {
                mode: Some(Mode::NonOracle),
                ..c.clone()
            },
            true,
        ),
        Command::Eval(c) => cmd_eval(c),
    }
}

fn run(command: &mut Command) -> Result<()> {
    let cfg = command.config_mut();
    if let Some(path) = cfg.dump_config.take() {
        let text = cfg.to_kv();
        return std::fs::write(&path, text).map_err(|source| Error::Io { path, source });
    }
    cfg.check_inputs()?;
    let threads = cfg.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| execute(command))
}

/// Parse `args` (including the program name), run and return the exit
/// code: 0 on success, 1 for estimation failures, 2 for usage or I/O.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let parsed = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut cli = match resolve(&args, parsed) {
        Ok(c) => c,
        Err(ExitFailure::Usage(e)) => {
            let _ = e.print();
            return 2;
        }
        Err(ExitFailure::Run(e)) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match run(&mut cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                2
            } else {
                1
            }
        }
    }
}
