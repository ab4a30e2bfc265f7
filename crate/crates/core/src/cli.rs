//! Batch front end: one run per config file, five commands, CSV outputs.
//!
//! Every output starts with a `#` provenance line (tool version, command,
//! seed and the SHA-256 of the effective configuration) followed by a
//! header row. Nothing depends on the clock or the environment, so equal
//! configs and seeds give byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::bound_report;
use crate::error::{Error, Result};
use crate::io::{read_point, read_topology, toml_error, write_point};
use crate::model::{check_feasibility, ControlPoint, SystemTopology, VideoCatalog};
use crate::optimizer::baselines::{initial_point, solve, solve_multistart, Baseline};
use crate::optimizer::OptimizerSettings;
use crate::simulator::{empirical_sdtp, run_sim, write_segments_csv, write_trace_csv, SimConfig};
use crate::workload::{generate_catalog, read_catalog_csv, sweep, write_catalog_csv, Scenario, WorkloadSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GenWorkload,
    EvalBound,
    Simulate,
    Optimize,
    Compare,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenWorkload => "gen-workload",
            Command::EvalBound => "eval-bound",
            Command::Simulate => "simulate",
            Command::Optimize => "optimize",
            Command::Compare => "compare",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stallbound", version, about = "Stall-duration tail bounds for cache-assisted video delivery")]
pub struct Args {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated, strictly increasing thresholds in seconds.
    #[arg(long, value_delimiter = ',')]
    pub sigma_grid: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub command: Option<Command>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    /// Arrival horizon (s).
    pub horizon: f64,
    /// Discarded prefix (s); a fifth of the horizon when absent.
    pub warmup: Option<f64>,
    /// Also write the per-segment trace.
    #[serde(default)]
    pub segments: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            horizon: 1.0e6,
            warmup: None,
            segments: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub epsilon: f64,
    pub gamma0: f64,
    pub gamma_decay: f64,
    pub constant_step: bool,
    pub max_outer: usize,
    pub max_inner: usize,
    pub prox_weight: f64,
    pub finite_difference: bool,
    /// Strategy run by `optimize`.
    pub strategy: String,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let s = OptimizerSettings::default();
        Self {
            epsilon: s.epsilon,
            gamma0: s.gamma0,
            gamma_decay: s.gamma_decay,
            constant_step: s.constant_step,
            max_outer: s.max_outer,
            max_inner: s.max_inner,
            prox_weight: s.prox_weight,
            finite_difference: s.finite_difference,
            strategy: Baseline::Opt.name().into(),
        }
    }
}

impl OptimizerSection {
    pub fn settings(&self) -> Result<OptimizerSettings> {
        let s = OptimizerSettings {
            epsilon: self.epsilon,
            gamma0: self.gamma0,
            gamma_decay: self.gamma_decay,
            constant_step: self.constant_step,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            prox_weight: self.prox_weight,
            finite_difference: self.finite_difference,
            frozen: Default::default(),
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub scenario: Scenario,
    pub factors: Vec<f64>,
}

/// One run. Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<Command>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub sigma_grid: Vec<f64>,
    pub topology: Option<PathBuf>,
    /// Catalog CSV; generated from `workload` when absent.
    pub catalog: Option<PathBuf>,
    /// Control-point document; the uniform start when absent.
    pub point: Option<PathBuf>,
    pub workload: Option<WorkloadSpec>,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    pub sweep: Option<SweepSection>,
    /// Set by [`RunConfig::resolve`] from the document as written plus the
    /// content-affecting flags, so it does not depend on where the run
    /// happens or where it writes.
    #[serde(skip)]
    pub config_hash: String,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| toml_error(&e, text, file))
    }

    /// Applies command-line overrides and resolves paths against `base`.
    pub fn resolve(mut self, args: &Args, base: &Path) -> Result<Self> {
        if let Some(c) = args.command {
            self.command = Some(c);
        }
        if let Some(s) = args.seed {
            self.seed = s;
        }
        if let Some(g) = &args.sigma_grid {
            self.sigma_grid = g.clone();
        }
        self.config_hash = self.hash();
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &args.out {
            Some(o) => self.out = o.clone(),
            None => join(&mut self.out),
        }
        for p in [&mut self.topology, &mut self.catalog, &mut self.point].into_iter().flatten() {
            join(p);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.command.is_none() {
            return Err(Error::Config("no command given (config `command` or --command)".into()));
        }
        if self.sigma_grid.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("sigma grid entries must be finite and >= 0".into()));
        }
        if self.sigma_grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("sigma grid must be strictly increasing".into()));
        }
        for (what, p) in [("topology", &self.topology), ("catalog", &self.catalog), ("point", &self.point)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::Config(format!("{what} file {} does not exist", p.display())));
                }
            }
        }
        if !(self.simulate.horizon > 0.0) || self.simulate.warmup.is_some_and(|w| !(w >= 0.0 && w < self.simulate.horizon)) {
            return Err(Error::Config("simulate needs horizon > 0 and 0 <= warmup < horizon".into()));
        }
        if let Some(s) = &self.sweep {
            if s.factors.is_empty() {
                return Err(Error::Config("sweep needs at least one factor".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the serialized config, output directory excluded.
    pub fn hash(&self) -> String {
        let text = toml::to_string(&RunConfig { out: default_out(), ..self.clone() }).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn command(&self) -> Command {
        self.command.expect("validated")
    }

    pub fn provenance(&self) -> String {
        format!("stallbound {} command={} seed={} config_sha256={}", env!("CARGO_PKG_VERSION"), self.command().name(), self.seed, self.config_hash)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn load_topology(cfg: &RunConfig) -> Result<SystemTopology> {
    let path = cfg.topology.as_ref().ok_or_else(|| Error::Config("this command needs `topology`".into()))?;
    read_topology(&read_text(path)?, &path.display().to_string())
}

fn load_catalog(cfg: &RunConfig) -> Result<VideoCatalog> {
    match (&cfg.catalog, &cfg.workload) {
        (Some(path), _) => {
            let f = fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            let cat = read_catalog_csv(BufReader::new(f), &path.display().to_string())?;
            cat.validate()?;
            Ok(cat)
        }
        (None, Some(spec)) => generate_catalog(&WorkloadSpec { seed: cfg.seed, ..spec.clone() }),
        (None, None) => Err(Error::Config("this command needs `catalog` or a `workload` section".into())),
    }
}

fn load_point(cfg: &RunConfig, topology: &SystemTopology, catalog: &VideoCatalog) -> Result<ControlPoint> {
    let point = match &cfg.point {
        Some(path) => {
            let f = fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            read_point(BufReader::new(f), &path.display().to_string())?
        }
        None => initial_point(Baseline::Opt, topology, catalog)?,
    };
    let report = check_feasibility(topology, catalog, &point)?;
    if let Some(v) = report.describe_violation() {
        return Err(Error::InfeasibleInstance(v));
    }
    Ok(point)
}

fn sigma_grid(cfg: &RunConfig, catalog: &VideoCatalog) -> Vec<f64> {
    if cfg.sigma_grid.is_empty() {
        vec![catalog.sigma]
    } else {
        cfg.sigma_grid.clone()
    }
}

/// Shortest round-trip decimal form.
fn num(x: f64) -> String {
    format!("{x:?}")
}

struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        body(&mut buf)?;
        let path = self.dir.join(name);
        fs::write(&path, buf).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.written.push(path);
        Ok(())
    }
}

fn provenance_line(buf: &mut Vec<u8>, cfg: &RunConfig) {
    buf.extend_from_slice(format!("# {}\n", cfg.provenance()).as_bytes());
}

fn csv_rows(buf: &mut Vec<u8>, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(buf);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}

pub fn cmd_gen_workload(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let spec = cfg.workload.as_ref().ok_or_else(|| Error::Config("gen-workload needs a `workload` section".into()))?;
    let catalog = generate_catalog(&WorkloadSpec { seed: cfg.seed, ..spec.clone() })?;
    let mut out = Outputs::new(&cfg.out)?;
    out.write("catalog.csv", |b| write_catalog_csv(&catalog, b, &cfg.provenance()))?;
    Ok(out.written)
}

pub fn cmd_eval_bound(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let topology = load_topology(cfg)?;
    let catalog = load_catalog(cfg)?;
    let point = load_point(cfg, &topology, &catalog)?;
    let grid = sigma_grid(cfg, &catalog);
    let reports = grid.iter().map(|&s| bound_report(s, &topology, &catalog, &point)).collect::<Result<Vec<_>>>()?;
    let header: Vec<String> = ["file_id", "sigma", "raw_bound", "clipped_bound", "delta1", "delta2", "delta3", "delta4", "feasible"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for i in 0..catalog.r() {
        for rep in &reports {
            let row = &rep.rows[i];
            let mut cells = vec![i.to_string(), num(rep.sigma), num(row.raw), num(row.clipped)];
            cells.extend(row.deltas.iter().map(|&d| num(d)));
            cells.push((rep.feasible && row.raw.is_finite()).to_string());
            rows.push(cells);
        }
    }
    let mut out = Outputs::new(&cfg.out)?;
    out.write("bound.csv", |b| {
        provenance_line(b, cfg);
        csv_rows(b, &header, &rows)
    })?;
    Ok(out.written)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let topology = load_topology(cfg)?;
    let catalog = load_catalog(cfg)?;
    let point = load_point(cfg, &topology, &catalog)?;
    let grid = sigma_grid(cfg, &catalog);
    let r = catalog.r();
    let mut sc = SimConfig::new(topology, catalog, point, cfg.simulate.horizon, cfg.seed);
    if let Some(w) = cfg.simulate.warmup {
        sc.warmup = w;
    }
    let trace = run_sim(&sc)?;
    let emp = empirical_sdtp(&trace, r, &grid);
    let mut out = Outputs::new(&cfg.out)?;
    out.write("trace.csv", |b| {
        provenance_line(b, cfg);
        write_trace_csv(&trace, b)
    })?;
    if cfg.simulate.segments {
        out.write("segments.csv", |b| {
            provenance_line(b, cfg);
            write_segments_csv(&trace, b)
        })?;
    }
    let header: Vec<String> = ["file_id", "sigma", "p_hat", "stderr", "n"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = emp.points.iter().map(|p| vec![p.file.to_string(), num(p.sigma), num(p.p_hat), num(p.stderr), p.n.to_string()]).collect();
    out.write("empirical.csv", |b| {
        provenance_line(b, cfg);
        csv_rows(b, &header, &rows)
    })?;
    Ok(out.written)
}

pub fn cmd_optimize(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let topology = load_topology(cfg)?;
    let catalog = load_catalog(cfg)?;
    let settings = cfg.optimizer.settings()?;
    let which = Baseline::parse(&cfg.optimizer.strategy)?;
    let (point, _, trace) = match &cfg.point {
        Some(_) => {
            let start = load_point(cfg, &topology, &catalog)?;
            crate::optimizer::baselines::solve_from(which, &start, &topology, &catalog, &settings)?
        }
        None => solve(which, &topology, &catalog, &settings)?,
    };
    let mut out = Outputs::new(&cfg.out)?;
    out.write("point.txt", |b| write_point(&point, b, &cfg.provenance()))?;
    out.write("optimization_trace.csv", |b| {
        provenance_line(b, cfg);
        trace.write_csv(b)
    })?;
    Ok(out.written)
}

/// Endpoints and objectives of every strategy on one instance. The full
/// optimizer is restarted from the best of its own endpoint and the
/// restricted strategies' endpoints.
pub fn compare_strategies(topology: &SystemTopology, catalog: &VideoCatalog, settings: &OptimizerSettings) -> Result<Vec<(Baseline, ControlPoint, f64)>> {
    let mut rows = Baseline::ALL
        .par_iter()
        .map(|&which| solve(which, topology, catalog, settings).map(|(p, f, _)| (which, p, f)))
        .collect::<Result<Vec<_>>>()?;
    let candidates: Vec<ControlPoint> = rows.iter().map(|(_, p, _)| p.clone()).collect();
    let (p, f, _) = solve_multistart(&candidates, topology, catalog, settings)?;
    rows[0] = (Baseline::Opt, p, f);
    Ok(rows)
}

pub fn cmd_compare(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let topology = load_topology(cfg)?;
    let catalog = load_catalog(cfg)?;
    let settings = cfg.optimizer.settings()?;
    let grid = sigma_grid(cfg, &catalog);
    let instances = match &cfg.sweep {
        Some(s) => sweep(s.scenario, &topology, &catalog, &s.factors)?,
        None => sweep(Scenario::ArrivalScale, &topology, &catalog, &[1.0])?,
    };
    let mut header: Vec<String> = ["factor", "strategy", "objective"].map(String::from).to_vec();
    header.extend(grid.iter().map(|s| format!("sdtp_sigma_{}", num(*s))));
    let mut rows = Vec::new();
    for inst in &instances {
        let wsum: f64 = inst.catalog.weight.iter().sum();
        for (which, point, f) in compare_strategies(&inst.topology, &inst.catalog, &settings)? {
            let mut cells = vec![num(inst.factor), which.name().to_string(), num(f)];
            for &s in &grid {
                let rep = bound_report(s, &inst.topology, &inst.catalog, &point)?;
                cells.push(num(rep.objective / wsum));
            }
            rows.push(cells);
        }
    }
    let mut out = Outputs::new(&cfg.out)?;
    out.write("compare.csv", |b| {
        provenance_line(b, cfg);
        csv_rows(b, &header, &rows)
    })?;
    Ok(out.written)
}

/// Runs the configured command and returns the files written.
pub fn run(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    match cfg.command() {
        Command::GenWorkload => cmd_gen_workload(cfg),
        Command::EvalBound => cmd_eval_bound(cfg),
        Command::Simulate => cmd_simulate(cfg),
        Command::Optimize => cmd_optimize(cfg),
        Command::Compare => cmd_compare(cfg),
    }
}

/// Loads, resolves and runs the config named by `args`.
pub fn run_args(args: &Args) -> Result<Vec<PathBuf>> {
    let text = read_text(&args.config)?;
    let cfg = RunConfig::parse(&text, &args.config.display().to_string())?;
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    run(&cfg.resolve(args, &base)?)
}

/// The one-line error format: `error kind=<kind> message=<text>`.
pub fn error_line(e: &Error) -> String {
    format!("error kind={} message={}", e.kind(), e.to_string().replace(['\n', '\r'], " "))
}

/// Process entry point; returns the exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage message={first}");
            return 2;
        }
    };
    match run_args(&args) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}
