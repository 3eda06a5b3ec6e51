//! Budget-matched comparison of the learned optimizer against the baselines
//! over paired random starts, with timing and box statistics.

pub mod fixture;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::Checkpoint;
use crate::baselines::{powell, random_search, tpe, BaselineBudget, TpeConfig};
use crate::error::{Error, Result};
use crate::objective::{Metered, Objective};
use crate::rng;
use crate::search_space::TuningVector;
use crate::surrogate::SurrogateObjective;
use crate::trainer;

use fixture::{FixtureId, FixtureObjective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    L2o,
    PowellDefault,
    PowellBudget,
    Tpe,
    Random,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::L2o,
        Method::PowellDefault,
        Method::PowellBudget,
        Method::Tpe,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::L2o => "l2o",
            Method::PowellDefault => "powell_default",
            Method::PowellBudget => "powell_budget",
            Method::Tpe => "tpe",
            Method::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Evaluation budget of each method for deployment episodes of length `t`.
pub fn budget_match(t: usize) -> Result<BTreeMap<Method, BaselineBudget>> {
    if t == 0 {
        return Err(Error::Config("episode length must be at least 1".into()));
    }
    Ok(Method::ALL
        .into_iter()
        .map(|m| {
            let b = match m {
                Method::PowellDefault => BaselineBudget::powell_default(),
                _ => BaselineBudget::evaluations(t + 1),
            };
            (m, b)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveSpec {
    /// A surrogate JSON file.
    Surrogate(PathBuf),
    Fixture(FixtureId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub objective: ObjectiveSpec,
    pub methods: Vec<Method>,
    pub n_inits: usize,
    /// Deployment episode length `T`.
    pub episode_length: usize,
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
    /// TPE settings; the seed is replaced per init.
    pub tpe: TpeConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            objective: ObjectiveSpec::Fixture(FixtureId::Bump4x16),
            methods: Method::ALL.to_vec(),
            n_inits: 16,
            episode_length: 50,
            checkpoint: None,
            seed: fixture::FIXTURE_SEED,
            tpe: TpeConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn check(&self) -> Result<()> {
        if self.n_inits == 0 {
            return Err(Error::Config("n_inits must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.episode_length == 0 {
            return Err(Error::Config("episode length must be at least 1".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::Config("methods listed twice".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl BoxStats {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Quantile `q` of sorted values, interpolating linearly at position `(n-1) q`.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::Config("box statistics of an empty list".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("value {v} in box statistics")));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(BoxStats {
        min: s[0],
        q1: quantile(&s, 0.25),
        median: quantile(&s, 0.5),
        q3: quantile(&s, 0.75),
        max: s[s.len() - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    /// Best objective value per init, in init order.
    pub raw: Vec<f64>,
    #[serde(rename = "box")]
    pub box_stats: BoxStats,
    pub mean_seconds: f64,
    /// Evaluations used per init.
    pub evals: Vec<usize>,
    /// Optimize wall-clock seconds per init.
    pub seconds: Vec<f64>,
}

impl MethodReport {
    pub fn new(raw: Vec<f64>, evals: Vec<usize>, seconds: Vec<f64>) -> Result<Self> {
        if raw.len() != evals.len() || raw.len() != seconds.len() {
            return Err(Error::Config("per-init columns differ in length".into()));
        }
        let box_stats = box_stats(&raw)?;
        let mean_seconds = seconds.iter().sum::<f64>() / seconds.len() as f64;
        Ok(MethodReport {
            raw,
            box_stats,
            mean_seconds,
            evals,
            seconds,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub methods: BTreeMap<Method, MethodReport>,
    pub config: BenchmarkConfig,
}

impl BenchmarkReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.get(&m)
    }

    /// The report with every timing field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for m in r.methods.values_mut() {
            m.seconds.iter_mut().for_each(|s| *s = 0.0);
            m.mean_seconds = 0.0;
        }
        r
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::io(format!("reading {}", path.display()), e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// The shared start point of init `i`.
pub fn initial_point(space: &crate::SearchSpace, seed: u64, init: usize) -> TuningVector {
    space.sample_uniform(&mut rng::child(seed, &[INIT_TAG, init as u64]))
}

const INIT_TAG: u64 = 10;
const METHOD_TAG: u64 = 11;

#[derive(Debug, Clone, Copy)]
struct Cell {
    best_f: f64,
    evals: usize,
    seconds: f64,
}

fn run_cell<O: Objective + ?Sized>(
    obj: &O,
    checkpoint: Option<&Checkpoint>,
    config: &BenchmarkConfig,
    budgets: &BTreeMap<Method, BaselineBudget>,
    method: Method,
    init: usize,
) -> Result<Cell> {
    let x0 = initial_point(obj.space(), config.seed, init);
    let stream = rng::derive_seed(config.seed, &[METHOD_TAG, method as u64, init as u64]);
    let metered = Metered::new(obj);
    let budget = &budgets[&method];
    let start = Instant::now();
    let best_f = match method {
        Method::L2o => {
            let ckpt = checkpoint.ok_or_else(|| Error::Config("l2o requested without a checkpoint".into()))?;
            trainer::tune(ckpt, &metered, config.episode_length, &x0, &mut rng::seeded(stream))?.1
        }
        Method::PowellDefault | Method::PowellBudget => powell(&metered, &x0, budget)?.best_f,
        Method::Tpe => {
            let cfg = TpeConfig {
                seed: stream,
                n_startup: config.tpe.n_startup.min(budget.max_evaluations),
                ..config.tpe.clone()
            };
            tpe(&metered, budget, &cfg, Some(&x0))?.best_f
        }
        Method::Random => random_search(&metered, budget, &mut rng::seeded(stream), Some(&x0))?.best_f,
    };
    let seconds = start.elapsed().as_secs_f64();
    Ok(Cell {
        best_f,
        evals: metered.evaluations() as usize,
        seconds,
    })
}

/// Runs every (method, init) cell against an already loaded objective. Cells
/// run in parallel on the current rayon pool; the result is independent of
/// the pool size apart from timings.
pub fn run_benchmark_on<O: Objective + ?Sized>(
    obj: &O,
    checkpoint: Option<&Checkpoint>,
    config: &BenchmarkConfig,
) -> Result<BenchmarkReport> {
    config.check()?;
    if config.methods.contains(&Method::L2o) {
        match checkpoint {
            Some(c) => c.check(obj.space())?,
            None => return Err(Error::Config("l2o requested without a checkpoint".into())),
        }
    }
    let budgets = budget_match(config.episode_length)?;
    let cells: Vec<(Method, usize)> = config
        .methods
        .iter()
        .flat_map(|&m| (0..config.n_inits).map(move |i| (m, i)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(m, i)| run_cell(obj, checkpoint, config, &budgets, m, i))
        .collect::<Result<Vec<_>>>()?;
    let mut methods = BTreeMap::new();
    for (k, &m) in config.methods.iter().enumerate() {
        let chunk = &results[k * config.n_inits..(k + 1) * config.n_inits];
        let report = MethodReport::new(
            chunk.iter().map(|c| c.best_f).collect(),
            chunk.iter().map(|c| c.evals).collect(),
            chunk.iter().map(|c| c.seconds).collect(),
        )?;
        methods.insert(m, report);
    }
    Ok(BenchmarkReport {
        methods,
        config: config.clone(),
    })
}

/// Loads the objective and checkpoint named by `config`, then benchmarks.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    config.check()?;
    let checkpoint = match (&config.checkpoint, config.methods.contains(&Method::L2o)) {
        (Some(p), true) => Some(Checkpoint::load(p)?),
        (None, true) => return Err(Error::Config("l2o requested without a checkpoint path".into())),
        _ => None,
    };
    match &config.objective {
        ObjectiveSpec::Surrogate(p) => run_benchmark_on(&SurrogateObjective::load(p)?, checkpoint.as_ref(), config),
        ObjectiveSpec::Fixture(id) => {
            let obj: FixtureObjective = id.build(config.seed)?;
            run_benchmark_on(&obj, checkpoint.as_ref(), config)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

const SUMMARY_ROWS: [&str; 5] = ["min", "q1", "median", "q3", "max"];

/// Writes the report. The CSV holds one row per (method, init) followed by a
/// summary block of five rows per method (`init` = min, q1, median, q3, max),
/// whose `evals` is the largest per-init count and `seconds` the mean time.
pub fn emit_report(report: &BenchmarkReport, format: ReportFormat, path: &Path) -> Result<()> {
    match format {
        ReportFormat::Json => trainer::write_json(report, path),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(["method", "init", "best_f", "evals", "seconds"])?;
            for (m, r) in &report.methods {
                for (i, ((f, e), s)) in r.raw.iter().zip(&r.evals).zip(&r.seconds).enumerate() {
                    w.write_record([m.name(), &i.to_string(), &f.to_string(), &e.to_string(), &s.to_string()])?;
                }
            }
            for (m, r) in &report.methods {
                let b = r.box_stats;
                let max_evals = r.evals.iter().max().copied().unwrap_or(0).to_string();
                let mean = r.mean_seconds.to_string();
                for (label, v) in SUMMARY_ROWS.iter().zip([b.min, b.q1, b.median, b.q3, b.max]) {
                    w.write_record([m.name(), label, &v.to_string(), &max_evals, &mean])?;
                }
            }
            w.flush()
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CsvRow {
    pub method: String,
    pub init: String,
    pub best_f: f64,
    pub evals: usize,
    pub seconds: f64,
}

/// Reads a report CSV back into per-method raw `best_f` columns (summary rows
/// are skipped).
pub fn read_report_csv(path: &Path) -> Result<BTreeMap<Method, Vec<f64>>> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut out: BTreeMap<Method, Vec<(usize, f64)>> = BTreeMap::new();
    for row in rd.deserialize::<CsvRow>() {
        let row = row?;
        let method = Method::parse(&row.method)?;
        if let Ok(i) = row.init.parse::<usize>() {
            out.entry(method).or_default().push((i, row.best_f));
        } else if !SUMMARY_ROWS.contains(&row.init.as_str()) {
            return Err(Error::SchemaMismatch(format!("unexpected init label `{}`", row.init)));
        }
    }
    Ok(out
        .into_iter()
        .map(|(m, mut v)| {
            v.sort_by_key(|p| p.0);
            (m, v.into_iter().map(|p| p.1).collect())
        })
        .collect())
}
