//! The `qparisi` command-line driver.
//!
//! Settings resolve as flags > `QPARISI_*` environment variables > the
//! `--config` file (`key=value` per line, `#` comments) > built-in defaults.
//! Keys in the file are the long flag names (`m-slices` or `m_slices`).
//!
//! Each run writes its table to `--out` (stdout if absent) and a manifest
//! with the resolved settings, timestamps and version to
//! `<out>.manifest.json` (stderr if writing to stdout). CSV floats carry 17
//! significant digits; JSON uses the shortest representation that parses
//! back to the same double.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use crate::error::{invalid, Error, Result};
use crate::interp::{concentration_scan, InterpModel, InterpPoint, TiltParams, MAX_INNER_POINTS};
use crate::quantum::{quenched_free_energy, superadditivity_gap, DisorderSample, ModelParams};
use crate::rsb::{
    elog_zeta0, hopf_lax_sup, optimize_rsb, parisi_functional, pspin_covariance_check, stationarity_residual, MixtureFunction,
    OptimizeOptions, QuadratureSpec, RsbParams, SelfOverlapKernel, SingleSiteModel,
};
use crate::stochastics::{with_workers, RngStream};
use crate::trotter::{convergence_table, corrected_identity_check};

pub const ENV_PREFIX: &str = "QPARISI_";

#[derive(Debug, Parser)]
#[command(name = "qparisi", version, about = "Quantum Parisi formula: exact small-size checks and variational solvers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Quenched free energy by exact diagonalization over a (beta, b) grid.
    Ed,
    /// Empirical p-spin energy covariance against the exact finite-N value.
    Pspin,
    /// Trotter path sums against the exact spectrum as M grows.
    TrotterCheck,
    /// Annealed self-overlap identity at finite M.
    SelfoverlapCheck,
    /// Parisi functional at given (m, q, y).
    ParisiEval,
    /// Minimize the Parisi functional over (m, q).
    ParisiOpt,
    /// Outer sup over the self-overlap kernel.
    Hopflax,
    /// Both sides of the interpolation identity.
    InterpGuerra,
    /// Replica-overlap tail probabilities across N (tilted pair sums with --lambda).
    InterpConcentration,
    /// Thermal and disorder variance of the self-overlap across N.
    InterpVariance,
    /// Superadditivity gap of the annealed partition function.
    Superadditivity,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ed => "ed",
            Command::Pspin => "pspin",
            Command::TrotterCheck => "trotter-check",
            Command::SelfoverlapCheck => "selfoverlap-check",
            Command::ParisiEval => "parisi-eval",
            Command::ParisiOpt => "parisi-opt",
            Command::Hopflax => "hopflax",
            Command::InterpGuerra => "interp-guerra",
            Command::InterpConcentration => "interp-concentration",
            Command::InterpVariance => "interp-variance",
            Command::Superadditivity => "superadditivity",
        }
    }
}

/// Raw option strings. `--beta`, `--b` and `--m-slices` take comma lists
/// where a command scans a grid.
#[derive(Debug, Clone, Default, Args)]
pub struct Opts {
    #[arg(long, global = true, env = "QPARISI_N")]
    pub n: Option<String>,
    #[arg(long = "m-slices", global = true, env = "QPARISI_M_SLICES")]
    pub m_slices: Option<String>,
    #[arg(long, global = true, env = "QPARISI_K")]
    pub k: Option<String>,
    #[arg(long, global = true, env = "QPARISI_P")]
    pub p: Option<String>,
    #[arg(long, global = true, env = "QPARISI_BETA", allow_hyphen_values = true)]
    pub beta: Option<String>,
    #[arg(long, global = true, env = "QPARISI_B", allow_hyphen_values = true)]
    pub b: Option<String>,
    #[arg(long, global = true, env = "QPARISI_C", allow_hyphen_values = true)]
    pub c: Option<String>,
    #[arg(long, global = true, env = "QPARISI_SAMPLES")]
    pub samples: Option<String>,
    #[arg(long = "inner-samples", global = true, env = "QPARISI_INNER_SAMPLES")]
    pub inner_samples: Option<String>,
    #[arg(long, global = true, env = "QPARISI_NODES")]
    pub nodes: Option<String>,
    #[arg(long, global = true, env = "QPARISI_SEED")]
    pub seed: Option<String>,
    #[arg(long, global = true, env = "QPARISI_BUDGET")]
    pub budget: Option<String>,
    #[arg(long, global = true, env = "QPARISI_OUT")]
    pub out: Option<String>,
    #[arg(long, global = true, env = "QPARISI_FORMAT")]
    pub format: Option<String>,
    #[arg(long, global = true, env = "QPARISI_WORKERS")]
    pub workers: Option<String>,
    #[arg(long = "m-seq", global = true, env = "QPARISI_M_SEQ")]
    pub m_seq: Option<String>,
    #[arg(long = "q-seq", global = true, env = "QPARISI_Q_SEQ")]
    pub q_seq: Option<String>,
    #[arg(long = "y-profile", global = true, env = "QPARISI_Y_PROFILE", allow_hyphen_values = true)]
    pub y_profile: Option<String>,
    #[arg(long, global = true, env = "QPARISI_S")]
    pub s: Option<String>,
    #[arg(long, global = true, env = "QPARISI_T")]
    pub t: Option<String>,
    #[arg(long, global = true, env = "QPARISI_U")]
    pub u: Option<String>,
    #[arg(long, global = true, env = "QPARISI_LAMBDA")]
    pub lambda: Option<String>,
    #[arg(long, global = true, env = "QPARISI_R")]
    pub r: Option<String>,
    #[arg(long = "n-list", global = true, env = "QPARISI_N_LIST")]
    pub n_list: Option<String>,
    /// `key=value` file read below flags and environment.
    #[arg(long, global = true, env = "QPARISI_CONFIG")]
    pub config: Option<PathBuf>,
}

const KEYS: [&str; 24] = [
    "n",
    "m-slices",
    "k",
    "p",
    "beta",
    "b",
    "c",
    "samples",
    "inner-samples",
    "nodes",
    "seed",
    "budget",
    "out",
    "format",
    "workers",
    "m-seq",
    "q-seq",
    "y-profile",
    "s",
    "t",
    "u",
    "lambda",
    "r",
    "n-list",
];

impl Opts {
    fn get(&self, key: &str) -> Option<&String> {
        match key {
            "n" => self.n.as_ref(),
            "m-slices" => self.m_slices.as_ref(),
            "k" => self.k.as_ref(),
            "p" => self.p.as_ref(),
            "beta" => self.beta.as_ref(),
            "b" => self.b.as_ref(),
            "c" => self.c.as_ref(),
            "samples" => self.samples.as_ref(),
            "inner-samples" => self.inner_samples.as_ref(),
            "nodes" => self.nodes.as_ref(),
            "seed" => self.seed.as_ref(),
            "budget" => self.budget.as_ref(),
            "out" => self.out.as_ref(),
            "format" => self.format.as_ref(),
            "workers" => self.workers.as_ref(),
            "m-seq" => self.m_seq.as_ref(),
            "q-seq" => self.q_seq.as_ref(),
            "y-profile" => self.y_profile.as_ref(),
            "s" => self.s.as_ref(),
            "t" => self.t.as_ref(),
            "u" => self.u.as_ref(),
            "lambda" => self.lambda.as_ref(),
            "r" => self.r.as_ref(),
            "n-list" => self.n_list.as_ref(),
            _ => None,
        }
    }
}

/// Parse a `key=value` config file.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| invalid(format!("config line {}: expected key=value", lineno + 1)))?;
        let key = key.trim().replace('_', "-");
        if !KEYS.contains(&key.as_str()) {
            return Err(invalid(format!("config line {}: unknown key {key:?}", lineno + 1)));
        }
        out.insert(key, value.trim().to_string());
    }
    Ok(out)
}

fn command_default(cmd: Command, key: &str) -> Option<&'static str> {
    use Command::*;
    Some(match (cmd, key) {
        (TrotterCheck, "m-slices") => "4,8,16",
        (TrotterCheck, "n-list") => "1,2,3",
        (TrotterCheck, "beta") => "0.5,1",
        (TrotterCheck, "b") => "0.5,1",
        (SelfoverlapCheck, "n") | (SelfoverlapCheck, "m-slices") => "2",
        (SelfoverlapCheck, "samples") => "10000",
        (InterpConcentration, "n-list") => "2,3,4",
        (InterpVariance, "n-list") => "2,3,4",
        (InterpGuerra, "n") | (InterpGuerra, "m-slices") => "2",
        (InterpConcentration, "m-slices") | (InterpVariance, "m-slices") => "2",
        (Pspin, "n") => "8",
        (Pspin, "samples") => "2000",
        (Superadditivity, "n") => "2",
        (_, "n") => "4",
        (_, "m-slices") => "4",
        (_, "k") => "1",
        (_, "p") => "2",
        (_, "beta") => "1",
        (_, "b") => "0.5",
        (_, "c") => "0",
        (_, "samples") => "200",
        (_, "seed") => "0",
        (_, "budget") => "3000",
        (_, "format") => "csv",
        (_, "s") => "0.5",
        (_, "t") => "1",
        (_, "u") => "0.5",
        (_, "r") => "1",
        _ => return None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

/// Where a resolved value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// Flag or environment variable.
    Cli,
    Config,
    Default,
}

impl Source {
    fn label(&self) -> &'static str {
        match self {
            Source::Cli => "cli",
            Source::Config => "config",
            Source::Default => "default",
        }
    }
}

/// Resolved settings as strings plus typed accessors.
#[derive(Debug, Clone)]
pub struct Settings {
    pub command: Command,
    values: BTreeMap<String, (String, Source)>,
}

fn parse_one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| invalid(format!("--{key}: cannot parse {v:?}")))
}

impl Settings {
    pub fn resolve(command: Command, opts: &Opts) -> Result<Self> {
        let file = match &opts.config {
            Some(path) => parse_config(&fs::read_to_string(path)?)?,
            None => BTreeMap::new(),
        };
        let mut values = BTreeMap::new();
        for key in KEYS {
            let v = if let Some(v) = opts.get(key) {
                Some((v.clone(), Source::Cli))
            } else if let Some(v) = file.get(key) {
                Some((v.clone(), Source::Config))
            } else {
                command_default(command, key).map(|v| (v.to_string(), Source::Default))
            };
            if let Some(v) = v {
                values.insert(key.to_string(), v);
            }
        }
        let s = Self { command, values };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        for beta in self.list::<f64>("beta")?.unwrap_or_default() {
            if !(beta > 0.0) || !beta.is_finite() {
                return Err(invalid(format!("--beta must be positive and finite, got {beta}")));
            }
        }
        for b in self.list::<f64>("b")?.unwrap_or_default() {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(invalid(format!("--b must be finite and >= 0, got {b}")));
            }
        }
        self.format()?;
        Ok(())
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key).ok_or_else(|| invalid(format!("--{key} is required for {}", self.command.name())))?;
        parse_one(key, v)
    }

    fn opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key).map(|v| parse_one(key, v)).transpose()
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.raw(key)
            .map(|v| v.split(',').filter(|x| !x.trim().is_empty()).map(|x| parse_one(key, x)).collect())
            .transpose()
    }

    /// A grid flag used as a scalar.
    fn scalar<T: std::str::FromStr + Copy>(&self, key: &str) -> Result<T> {
        let v: Vec<T> = self.list(key)?.unwrap_or_default();
        match v.as_slice() {
            [x] => Ok(*x),
            _ => Err(invalid(format!("--{key} takes a single value for {}", self.command.name()))),
        }
    }

    pub fn format(&self) -> Result<Format> {
        match self.raw("format").unwrap_or("csv") {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(invalid(format!("--format must be csv or json, got {other:?}"))),
        }
    }

    pub fn out(&self) -> Option<PathBuf> {
        self.raw("out").map(PathBuf::from)
    }

    pub fn workers(&self) -> Result<Option<usize>> {
        self.opt("workers")
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    /// Every resolved key with its value and source.
    pub fn echo(&self) -> Value {
        let mut m = Map::new();
        for (k, (v, src)) in &self.values {
            m.insert(k.clone(), json!({ "value": v, "source": src.label() }));
        }
        Value::Object(m)
    }

    fn params(&self) -> Result<ModelParams> {
        ModelParams::new(self.scalar("beta")?, self.scalar("b")?, self.get("c")?, self.get("n")?)
    }

    fn mix(&self) -> Result<MixtureFunction> {
        MixtureFunction::new(self.get("p")?)
    }

    fn rsb(&self) -> Result<RsbParams> {
        match (self.list::<f64>("m-seq")?, self.list::<f64>("q-seq")?) {
            (Some(m), Some(q)) => RsbParams::new(m, q),
            (None, None) => {
                let k: usize = self.get("k")?;
                if k == 0 {
                    return Err(invalid("--k must be at least 1"));
                }
                RsbParams::new((0..=k).map(|p| p as f64 / k as f64).collect(), vec![0.0; k + 1])
            }
            _ => Err(invalid("--m-seq and --q-seq must be given together")),
        }
    }

    fn kernel(&self) -> Result<SelfOverlapKernel> {
        let m: usize = self.scalar("m-slices")?;
        match self.list::<f64>("y-profile")? {
            Some(profile) => {
                if profile.len() != m {
                    return Err(invalid(format!("--y-profile needs {m} entries (one per distance), got {}", profile.len())));
                }
                SelfOverlapKernel::new(profile)
            }
            None => Ok(SelfOverlapKernel::zeros(m)),
        }
    }

    fn quad(&self, k: usize) -> Result<QuadratureSpec> {
        if let Some(s) = self.opt::<usize>("inner-samples")? {
            return Ok(QuadratureSpec::monte_carlo(s, self.seed()?));
        }
        if let Some(n) = self.opt::<usize>("nodes")? {
            return Ok(QuadratureSpec::gauss_hermite(n));
        }
        Ok(QuadratureSpec::default_for(k, self.seed()?))
    }

    /// Inner rule for an `n`-site interpolation: the largest GH tensor under
    /// the point cap, at most 8 nodes, unless set explicitly.
    fn interp_quad(&self, n: usize) -> Result<QuadratureSpec> {
        if self.raw("inner-samples").is_some() || self.raw("nodes").is_some() {
            return self.quad(1);
        }
        let mut nodes = 8usize;
        while nodes > 2 && (nodes as f64).powi(n as i32) > MAX_INNER_POINTS as f64 {
            nodes -= 1;
        }
        Ok(QuadratureSpec::gauss_hermite(nodes))
    }

    fn site(&self, kernel: SelfOverlapKernel) -> Result<SingleSiteModel> {
        SingleSiteModel::new(self.scalar("beta")?, self.scalar("b")?, self.get("c")?, kernel)
    }

    fn opt_options(&self) -> Result<OptimizeOptions> {
        Ok(OptimizeOptions {
            budget: self.get("budget")?,
            seed: self.seed()?,
            ..Default::default()
        })
    }
}

/// One output cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    F(f64),
    U(u64),
    S(String),
    B(bool),
    L(Vec<f64>),
    Missing,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::U(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::U(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::B(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::S(v.to_string())
    }
}

impl From<Vec<f64>> for Cell {
    fn from(v: Vec<f64>) -> Self {
        Cell::L(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Missing, Cell::F)
    }
}

pub type Row = Vec<(&'static str, Cell)>;

/// 17 significant digits.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn csv_cell(c: &Cell) -> String {
    match c {
        Cell::F(v) => format_float(*v),
        Cell::U(v) => v.to_string(),
        Cell::S(s) => s.clone(),
        Cell::B(b) => b.to_string(),
        Cell::L(v) => v.iter().map(|x| format_float(*x)).collect::<Vec<_>>().join(";"),
        Cell::Missing => String::new(),
    }
}

fn json_float(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

fn json_cell(c: &Cell) -> Value {
    match c {
        Cell::F(v) => json_float(*v),
        Cell::U(v) => json!(v),
        Cell::S(s) => json!(s),
        Cell::B(b) => json!(b),
        Cell::L(v) => Value::Array(v.iter().map(|x| json_float(*x)).collect()),
        Cell::Missing => Value::Null,
    }
}

pub fn render(rows: &[Row], format: Format) -> Result<String> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            if let Some(first) = rows.first() {
                w.write_record(first.iter().map(|(k, _)| *k)).map_err(csv_err)?;
            }
            for row in rows {
                w.write_record(row.iter().map(|(_, c)| csv_cell(c))).map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
        }
        Format::Json => {
            let arr: Vec<Value> = rows
                .iter()
                .map(|row| Value::Object(row.iter().map(|(k, c)| (k.to_string(), json_cell(c))).collect()))
                .collect();
            Ok(serde_json::to_string_pretty(&arr)? + "\n")
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Experiment record written next to every output.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub version: String,
    pub parameters: Value,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub rows: usize,
    pub output: Option<String>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Compute the rows for `settings.command`.
pub fn execute(settings: &Settings) -> Result<Vec<Row>> {
    let seed = settings.seed()?;
    let mut rows = Vec::new();
    match settings.command {
        Command::Ed => {
            let (n, c, samples) = (settings.get("n")?, settings.get("c")?, settings.get("samples")?);
            for beta in settings.list::<f64>("beta")?.unwrap_or_default() {
                for b in settings.list::<f64>("b")?.unwrap_or_default() {
                    let est = quenched_free_energy(&ModelParams::new(beta, b, c, n)?, samples, seed)?;
                    rows.push(vec![
                        ("n", n.into()),
                        ("beta", beta.into()),
                        ("b", b.into()),
                        ("c", c.into()),
                        ("free_energy", est.mean.into()),
                        ("stderr", est.stderr.into()),
                        ("n_samples", samples.into()),
                        ("seed", seed.into()),
                    ]);
                }
            }
        }
        Command::Pspin => {
            let samples = settings.get("samples")?;
            for r in pspin_covariance_check(settings.get("p")?, settings.get("n")?, samples, seed)? {
                rows.push(vec![
                    ("p", r.p.into()),
                    ("n", r.n.into()),
                    ("rho", r.rho.into()),
                    ("empirical", r.empirical.mean.into()),
                    ("stderr", r.empirical.stderr.into()),
                    ("xi", r.xi.into()),
                    ("exact", r.exact.into()),
                    ("correction", r.correction.into()),
                    ("n_samples", samples.into()),
                    ("seed", seed.into()),
                ]);
            }
        }
        Command::TrotterCheck => {
            let ms: Vec<usize> = settings.list("m-slices")?.unwrap_or_default();
            let c = settings.get("c")?;
            for n in settings.list::<usize>("n-list")?.unwrap_or_default() {
                for beta in settings.list::<f64>("beta")?.unwrap_or_default() {
                    for b in settings.list::<f64>("b")?.unwrap_or_default() {
                        let params = ModelParams::new(beta, b, c, n)?;
                        for r in convergence_table(&params, &ms, seed)? {
                            rows.push(vec![
                                ("n", r.n.into()),
                                ("m", r.m.into()),
                                ("beta", r.beta.into()),
                                ("b", r.b.into()),
                                ("c", r.c.into()),
                                ("seed", r.seed.into()),
                                ("log_z_trotter", r.log_z_trotter.into()),
                                ("log_z_exact", r.log_z_exact.into()),
                                ("abs_error", r.abs_error.into()),
                                ("note", if b == 0.0 { "classical: slices locked" } else { "" }.into()),
                            ]);
                        }
                    }
                }
            }
        }
        Command::SelfoverlapCheck => {
            let params = settings.params()?;
            let m: usize = settings.scalar("m-slices")?;
            let samples = settings.get("samples")?;
            let g = DisorderSample::gaussian(2, params.n_spins, &RngStream::new(seed).child(0))?;
            let r = corrected_identity_check(&params, &g, m, samples, seed, 1.0)?;
            rows.push(vec![
                ("n", params.n_spins.into()),
                ("m", m.into()),
                ("beta", params.beta.into()),
                ("b", params.b.into()),
                ("c", params.c.into()),
                ("lhs", r.lhs.mean.into()),
                ("lhs_stderr", r.lhs.stderr.into()),
                ("rhs", r.rhs.into()),
                ("log_scale", r.log_scale.into()),
                ("gap_in_stderr", r.gap.into()),
                ("n_samples", samples.into()),
                ("seed", seed.into()),
            ]);
        }
        Command::ParisiEval => {
            let rsb = settings.rsb()?;
            let kernel = settings.kernel()?;
            let site = settings.site(kernel.clone())?;
            let mix = settings.mix()?;
            let quad = settings.quad(rsb.k())?;
            let value = parisi_functional(&rsb, &mix, &site, &quad)?;
            let e0 = elog_zeta0(&rsb, &mix, &site, &quad)?;
            rows.push(rsb_row(settings, &rsb, &kernel, value, seed, vec![("elog_zeta0", e0.into())])?);
        }
        Command::ParisiOpt => {
            let k: usize = settings.get("k")?;
            let kernel = settings.kernel()?;
            let site = settings.site(kernel.clone())?;
            let mix = settings.mix()?;
            let quad = settings.quad(k)?;
            let opt = optimize_rsb(k, &mix, &site, &quad, &settings.opt_options()?)?;
            let st = stationarity_residual(&opt.params, &mix, &site, &quad)?;
            let extra = vec![
                ("stationarity", st.max_interior().into()),
                ("evaluations", opt.evaluations.into()),
                ("converged", opt.converged.into()),
            ];
            rows.push(rsb_row(settings, &opt.params, &kernel, opt.value, seed, extra)?);
        }
        Command::Hopflax => {
            let k: usize = settings.get("k")?;
            let (beta, b, c): (f64, f64, f64) = (settings.scalar("beta")?, settings.scalar("b")?, settings.get("c")?);
            let m: usize = settings.scalar("m-slices")?;
            let chi = hopf_lax_sup(k, &settings.mix()?, beta, b, c, m, &settings.quad(k)?, &settings.opt_options()?)?;
            rows.push(vec![
                ("k", k.into()),
                ("p", settings.get::<usize>("p")?.into()),
                ("m_slices", m.into()),
                ("beta", beta.into()),
                ("b", b.into()),
                ("c", c.into()),
                ("value", chi.value.into()),
                ("maximizer", chi.maximizer.profile().to_vec().into()),
                ("evaluations", chi.evaluations.into()),
                ("converged", chi.converged.into()),
                ("seed", seed.into()),
            ]);
        }
        Command::InterpGuerra => {
            let params = settings.params()?;
            let rsb = settings.rsb()?;
            let model = InterpModel::new(params, rsb.clone(), settings.kernel()?, settings.interp_quad(params.n_spins)?)?;
            let t: f64 = settings.get("t")?;
            let samples = settings.get("samples")?;
            let rep = model.guerra_identity_residual(t, samples, seed, 8)?;
            rows.push(vec![
                ("t", t.into()),
                ("n", params.n_spins.into()),
                ("m", model.m_slices().into()),
                ("k", rsb.k().into()),
                ("beta", params.beta.into()),
                ("b", params.b.into()),
                ("lhs", rep.lhs.mean.into()),
                ("lhs_stderr", rep.lhs.stderr.into()),
                ("parisi", rep.parisi.into()),
                ("remainder", rep.remainder.mean.into()),
                ("self_overlap_term", rep.self_overlap_term.mean.into()),
                ("rhs", rep.rhs.mean.into()),
                ("gap", rep.gap.mean.into()),
                ("gap_stderr", rep.gap.stderr.into()),
                ("gap_in_stderr", rep.gap_in_stderr.into()),
                ("n_samples", samples.into()),
                ("seed", seed.into()),
            ]);
        }
        Command::InterpConcentration => {
            let rsb = settings.rsb()?;
            let kernel = settings.kernel()?;
            let (s, u, r): (f64, f64, usize) = (settings.get("s")?, settings.get("u")?, settings.get("r")?);
            let (beta, b, c): (f64, f64, f64) = (settings.scalar("beta")?, settings.scalar("b")?, settings.get("c")?);
            let samples: usize = settings.get("samples")?;
            let sizes: Vec<usize> = settings.list("n-list")?.unwrap_or_default();
            let head = |n: usize, lambda: f64| -> Row {
                vec![
                    ("s", s.into()),
                    ("t", 1.0.into()),
                    ("n", n.into()),
                    ("m", kernel.m_slices().into()),
                    ("k", rsb.k().into()),
                    ("r", r.into()),
                    ("u", u.into()),
                    ("lambda", lambda.into()),
                ]
            };
            match settings.opt::<f64>("lambda")? {
                None => {
                    let quad = settings.interp_quad(sizes.iter().copied().max().unwrap_or(1))?;
                    let scan = concentration_scan(beta, b, c, &rsb, &kernel, &quad, u, r, s, &sizes, samples, seed)?;
                    for row in &scan.rows {
                        let mut out = head(row.n, 0.0);
                        out.extend([
                            ("estimate", row.probability.mean.into()),
                            ("stderr", row.probability.stderr.into()),
                            ("zero_event", row.zero_event.into()),
                            ("slope", scan.slope.into()),
                            ("n_samples", samples.into()),
                            ("seed", seed.into()),
                        ]);
                        rows.push(out);
                    }
                }
                Some(lambda) => {
                    let tilt = TiltParams::new(r, u, lambda)?;
                    for &n in &sizes {
                        let params = ModelParams::new(beta, b, c, n)?;
                        let model = InterpModel::new(params, rsb.clone(), kernel.clone(), settings.interp_quad(n)?)?;
                        let tp = model.tilted_partitions(s, &tilt, samples, seed)?;
                        let phi = model.phi_estimate(&InterpPoint::new(s, 1.0)?, samples, seed)?;
                        let mut out = head(n, lambda);
                        out.extend([
                            ("omega", tp.omega.map(|o| o.mean).unwrap_or(f64::NEG_INFINITY).into()),
                            ("omega_stderr", tp.omega.map(|o| o.stderr).into()),
                            ("zero_event_samples", tp.zero_event_samples.into()),
                            ("log_v", tp.log_v.mean.into()),
                            ("log_v_stderr", tp.log_v.stderr.into()),
                            ("two_phi", (2.0 * phi.mean).into()),
                            ("two_phi_stderr", (2.0 * phi.stderr).into()),
                            ("n_samples", samples.into()),
                            ("seed", seed.into()),
                        ]);
                        rows.push(out);
                    }
                }
            }
        }
        Command::InterpVariance => {
            let rsb = settings.rsb()?;
            let kernel = settings.kernel()?;
            let t: f64 = settings.get("t")?;
            let samples: usize = settings.get("samples")?;
            for n in settings.list::<usize>("n-list")?.unwrap_or_default() {
                let params = ModelParams::new(settings.scalar("beta")?, settings.scalar("b")?, settings.get("c")?, n)?;
                let model = InterpModel::new(params, rsb.clone(), kernel.clone(), settings.interp_quad(n)?)?;
                let d = model.selfoverlap_variance_diag(t, samples, seed)?;
                rows.push(vec![
                    ("t", t.into()),
                    ("n", n.into()),
                    ("m", d.m.into()),
                    ("beta", params.beta.into()),
                    ("b", params.b.into()),
                    ("intra", d.intra.mean.into()),
                    ("intra_stderr", d.intra.stderr.into()),
                    ("inter", d.inter.into()),
                    ("total", d.total.into()),
                    ("n_samples", samples.into()),
                    ("seed", seed.into()),
                ]);
            }
        }
        Command::Superadditivity => {
            let n: usize = settings.get("n")?;
            let m: usize = settings.scalar("m-slices")?;
            let (b, c): (f64, f64) = (settings.scalar("b")?, settings.get("c")?);
            let samples: usize = settings.get("samples")?;
            let inner = settings.opt::<usize>("inner-samples")?.unwrap_or(2000);
            for beta in settings.list::<f64>("beta")?.unwrap_or_default() {
                let est = superadditivity_gap(n, m, beta, b, c, samples, inner, seed)?;
                rows.push(vec![
                    ("l", n.into()),
                    ("m_spins", m.into()),
                    ("beta", beta.into()),
                    ("b", b.into()),
                    ("c", c.into()),
                    ("gap", est.mean.into()),
                    ("stderr", est.stderr.into()),
                    ("n_samples", samples.into()),
                    ("inner_samples", inner.into()),
                    ("seed", seed.into()),
                ]);
            }
        }
    }
    Ok(rows)
}

fn rsb_row(settings: &Settings, rsb: &RsbParams, kernel: &SelfOverlapKernel, value: f64, seed: u64, extra: Row) -> Result<Row> {
    let mut row: Row = vec![
        ("k", rsb.k().into()),
        ("p", settings.get::<usize>("p")?.into()),
        ("m_slices", kernel.m_slices().into()),
        ("beta", settings.scalar::<f64>("beta")?.into()),
        ("b", settings.scalar::<f64>("b")?.into()),
        ("c", settings.get::<f64>("c")?.into()),
        ("value", value.into()),
        ("m_seq", rsb.m().to_vec().into()),
        ("q_seq", rsb.q()[..=rsb.k()].to_vec().into()),
        ("y_profile", kernel.profile().to_vec().into()),
    ];
    row.extend(extra);
    row.push(("seed", seed.into()));
    Ok(row)
}

/// Run one parsed invocation: compute, write output and manifest.
pub fn run(cli: &Cli) -> Result<()> {
    let settings = Settings::resolve(cli.command, &cli.opts)?;
    let started = unix_now();
    let rows = with_workers(settings.workers()?, || execute(&settings))??;
    let finished = unix_now();
    let body = render(&rows, settings.format()?)?;
    let out = settings.out();
    let manifest = ExperimentManifest {
        command: settings.command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        parameters: settings.echo(),
        started_unix: started,
        finished_unix: finished,
        rows: rows.len(),
        output: out.as_ref().map(|p| p.display().to_string()),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)? + "\n";
    match out {
        Some(path) => {
            fs::write(&path, body)?;
            fs::write(manifest_path(&path), manifest_json)?;
        }
        None => {
            std::io::stdout().write_all(body.as_bytes())?;
            std::io::stderr().write_all(manifest_json.as_bytes())?;
        }
    }
    Ok(())
}

/// Exit status for an error: 2 for bad input, 3 for estimator failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter(_) | Error::DimensionMismatch { .. } | Error::SizeCap { .. } | Error::ClassicalLimit => 2,
        Error::Estimator(_) => 3,
        _ => 1,
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("qparisi {}: {e}", cli.command.name());
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(cmd: Command, opts: Opts) -> Result<Settings> {
        Settings::resolve(cmd, &opts)
    }

    #[test]
    fn config_parsing() {
        let c = parse_config("# comment\nbeta = 0.7\nm_slices=3\n\n").unwrap();
        assert_eq!(c["beta"], "0.7");
        assert_eq!(c["m-slices"], "3");
        assert!(parse_config("bogus=1").is_err());
        assert!(parse_config("beta").is_err());
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "beta=0.7\nb=0.2\n").unwrap();
        let opts = Opts {
            beta: Some("1.5".into()),
            config: Some(path),
            ..Default::default()
        };
        let s = settings(Command::Ed, opts).unwrap();
        assert_eq!(s.scalar::<f64>("beta").unwrap(), 1.5);
        assert_eq!(s.scalar::<f64>("b").unwrap(), 0.2);
        assert_eq!(s.get::<usize>("n").unwrap(), 4);
        let echo = s.echo();
        assert_eq!(echo["beta"]["source"], "cli");
        assert_eq!(echo["b"]["source"], "config");
        assert_eq!(echo["n"]["source"], "default");
    }

    #[test]
    fn rejects_bad_values() {
        let bad = |opts: Opts| settings(Command::Ed, opts).is_err();
        assert!(bad(Opts {
            beta: Some("0".into()),
            ..Default::default()
        }));
        assert!(bad(Opts {
            beta: Some("1,-2".into()),
            ..Default::default()
        }));
        assert!(bad(Opts {
            format: Some("xml".into()),
            ..Default::default()
        }));
        let s = settings(
            Command::ParisiEval,
            Opts {
                m_seq: Some("0,1".into()),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(s.rsb().is_err());
    }

    #[test]
    fn floats_round_trip_through_csv() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            let s = format_float(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
        let rows = vec![vec![("x", Cell::F(0.1)), ("l", Cell::L(vec![1.0, 2.0])), ("z", Cell::Missing)]];
        let csv = render(&rows, Format::Csv).unwrap();
        assert_eq!(csv, "x,l,z\n1.0000000000000001e-1,1.0000000000000000e0;2.0000000000000000e0,\n");
        let js: Value = serde_json::from_str(&render(&rows, Format::Json).unwrap()).unwrap();
        assert_eq!(js[0]["x"].as_f64().unwrap(), 0.1);
        assert!(js[0]["z"].is_null());
    }

    #[test]
    fn default_rsb_is_evenly_spaced() {
        let s = settings(
            Command::ParisiEval,
            Opts {
                k: Some("2".into()),
                ..Default::default()
            },
        )
        .unwrap();
        let rsb = s.rsb().unwrap();
        assert_eq!(rsb.m(), &[0.0, 0.5, 1.0]);
        assert_eq!(&rsb.q()[..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn interp_quad_respects_point_cap() {
        let s = settings(Command::InterpGuerra, Opts::default()).unwrap();
        assert_eq!(s.interp_quad(2).unwrap().nodes, 8);
        let q5 = s.interp_quad(5).unwrap().nodes;
        assert!((q5 as f64).powi(5) <= MAX_INNER_POINTS as f64 && ((q5 + 1) as f64).powi(5) > MAX_INNER_POINTS as f64);
    }
}
