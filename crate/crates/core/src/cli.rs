//! The `l2o-tune` command line: generate data, train surrogates, train the
//! agent, tune, benchmark and report. Every command writes into `--out` and
//! merges what it produced into `<out>/manifest.json`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::Checkpoint;
use crate::bench::fixture::FixtureId;
use crate::bench::{self, BenchmarkConfig, BenchmarkReport, Method, ObjectiveSpec, ReportFormat};
use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::rng;
use crate::search_space::{SearchSpace, TuningVector};
use crate::surrogate::{
    self, Aggregation, DeviceDataset, DeviceProfile, FamilyConfig, FitConfig, ProfileSet, SurrogateObjective,
};
use crate::trainer::{self, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "l2o-tune",
    version,
    about = "Learned tuning-knob optimizer and benchmark harness"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Search space JSON. Artifacts built for another space are rejected.
    #[arg(long, global = true)]
    pub space: Option<PathBuf>,
    /// Command configuration JSON; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic per-device measurement CSVs.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Use the space and device family of a built-in fixture.
        #[arg(long)]
        fixture: Option<String>,
        /// Rows per device.
        #[arg(long)]
        rows: Option<usize>,
    },
    /// Fit one MLP per device dataset and aggregate them.
    TrainSurrogate {
        #[command(flatten)]
        common: Common,
        /// Directory of device CSVs [default: <out>/data].
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        aggregation: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the LSTM policy with REINFORCE on a surrogate.
    TrainAgent {
        #[command(flatten)]
        common: Common,
        /// Surrogate JSON [default: <out>/surrogate.json].
        #[arg(long)]
        surrogate: Option<PathBuf>,
        #[arg(long)]
        updates: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Run one rollout of a trained policy and print the best point.
    Tune {
        #[command(flatten)]
        common: Common,
        /// Checkpoint JSON [default: <out>/checkpoint.json].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Surrogate JSON [default: <out>/surrogate.json].
        #[arg(long)]
        surrogate: Option<PathBuf>,
        /// Start point as comma-separated knob values [default: sampled].
        #[arg(long)]
        x0: Option<String>,
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
    /// Compare the policy against Powell, TPE and random search.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        surrogate: Option<PathBuf>,
        #[arg(long)]
        fixture: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated subset of l2o,powell_default,powell_budget,tpe,random.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        inits: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Convert a benchmark report to CSV and print its summary.
    Report {
        #[command(flatten)]
        common: Common,
        /// Report JSON [default: <out>/report.json].
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Files and settings produced by a pipeline run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub space: Option<PathBuf>,
    pub space_hash: Option<String>,
    #[serde(default)]
    pub profiles: Option<PathBuf>,
    #[serde(default)]
    pub datasets: Vec<PathBuf>,
    pub surrogate: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_last: Option<PathBuf>,
    pub learning_curve: Option<PathBuf>,
    pub report_json: Option<PathBuf>,
    pub report_csv: Option<PathBuf>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub config_hashes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn path(out: &Path) -> PathBuf {
        out.join("manifest.json")
    }

    pub fn load_or_default(out: &Path) -> Result<Self> {
        let p = Self::path(out);
        if p.exists() {
            read_json(&p)
        } else {
            Ok(Self::default())
        }
    }

    fn files(&self) -> impl Iterator<Item = &PathBuf> {
        [
            &self.space,
            &self.profiles,
            &self.surrogate,
            &self.checkpoint,
            &self.checkpoint_last,
            &self.learning_curve,
            &self.report_json,
            &self.report_csv,
        ]
        .into_iter()
        .flatten()
        .chain(&self.datasets)
    }

    /// Writes the manifest after checking that every file it names exists.
    pub fn save(&self, out: &Path) -> Result<()> {
        if let Some(missing) = self.files().find(|p| !p.exists()) {
            return Err(Error::MissingArtifact(missing.clone()));
        }
        trainer::write_json(self, &Self::path(out))
    }

    fn record_space(&mut self, space: &SearchSpace, path: PathBuf) -> Result<()> {
        let hash = space.hash();
        if let Some(h) = &self.space_hash {
            if *h != hash {
                return Err(Error::SchemaMismatch(format!(
                    "output directory holds artifacts for space {h}"
                )));
            }
        }
        self.space_hash = Some(hash);
        self.space = Some(path);
        Ok(())
    }
}

/// `gen-data` configuration: explicit devices, or a random family drawn from
/// the seed when `devices` is absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub devices: Option<Vec<DeviceProfile>>,
    pub family: FamilyConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub aggregation: Aggregation,
    pub fit: FitConfig,
}

/// Hex SHA-256 of the JSON form of a config.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(format!("reading {}", path.display()), e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// The `--space` file if given, otherwise the space recorded in the manifest.
fn resolve_space(common: &Common, manifest: &RunManifest) -> Result<Option<SearchSpace>> {
    match (&common.space, &manifest.space) {
        (Some(p), _) | (None, Some(p)) => SearchSpace::from_json_file(p).map(Some),
        (None, None) => Ok(None),
    }
}

fn expect_space(expected: Option<&SearchSpace>, actual: &SearchSpace, what: &str) -> Result<()> {
    match expected {
        Some(s) if s.hash() != actual.hash() => Err(Error::SchemaMismatch(format!(
            "{what} was built for space {}, expected {}",
            actual.hash(),
            s.hash()
        ))),
        _ => Ok(()),
    }
}

fn parse_point(space: &SearchSpace, s: &str) -> Result<TuningVector> {
    let values = s
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("`{v}` is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    let x = TuningVector(values);
    space.validate(&x)?;
    Ok(x)
}

fn cmd_gen_data(common: &Common, fixture: Option<&str>, rows: Option<usize>) -> Result<()> {
    let mut cfg: GenDataConfig = load_config(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(bench::fixture::FIXTURE_SEED);
    let space = match (fixture, &common.space) {
        (Some(f), None) => FixtureId::parse(f)?.space(),
        (None, Some(p)) => SearchSpace::from_json_file(p)?,
        (Some(_), Some(_)) => return Err(Error::Config("give either --fixture or --space".into())),
        (None, None) => return Err(Error::Config("gen-data needs --space or --fixture".into())),
    };
    if let Some(n) = rows {
        cfg.family.n_rows = n;
        if let Some(devs) = &mut cfg.devices {
            devs.iter_mut().for_each(|d| d.n_rows = n);
        }
    }
    let profiles = match (&cfg.devices, fixture) {
        (Some(devs), _) => ProfileSet { devices: devs.clone() },
        (None, Some(f)) if rows.is_none() && common.config.is_none() => FixtureId::parse(f)?.profiles(seed)?,
        (None, _) => ProfileSet::random_family(&space, &cfg.family, &mut rng::child(seed, &[0]))?,
    };
    for d in &profiles.devices {
        d.check(&space)?;
    }
    let mut ids: Vec<&str> = profiles.devices.iter().map(|d| d.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != profiles.devices.len() {
        return Err(Error::Config("device ids must be unique".into()));
    }

    let data_dir = common.out.join("data");
    create_dir(&data_dir)?;
    let datasets = surrogate::gen_datasets(&space, &profiles, rng::derive_seed(seed, &[1]))?;
    let mut manifest = RunManifest::load_or_default(&common.out)?;
    let space_path = common.out.join("space.json");
    trainer::write_json(&space, &space_path)?;
    manifest.record_space(&space, space_path)?;
    let profiles_path = common.out.join("profiles.json");
    trainer::write_json(&profiles, &profiles_path)?;
    manifest.profiles = Some(profiles_path);
    manifest.datasets.clear();
    for d in &datasets {
        let p = data_dir.join(format!("{}.csv", d.device_id));
        d.write_csv(&space, &p)?;
        manifest.datasets.push(p);
    }
    manifest.seeds.insert("gen-data".into(), seed);
    manifest.config_hashes.insert("gen-data".into(), config_hash(&cfg)?);
    manifest.save(&common.out)?;
    println!("wrote {} device datasets to {}", datasets.len(), data_dir.display());
    Ok(())
}

fn cmd_train_surrogate(
    common: &Common,
    data: Option<&Path>,
    aggregation: Option<&str>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut cfg: SurrogateConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.fit.seed = s;
    }
    if let Some(e) = epochs {
        cfg.fit.epochs = e;
    }
    if let Some(a) = aggregation {
        cfg.aggregation = serde_json::from_value(serde_json::Value::String(a.into()))
            .map_err(|_| Error::Config(format!("unknown aggregation `{a}`")))?;
    }
    let mut manifest = RunManifest::load_or_default(&common.out)?;
    let space = resolve_space(common, &manifest)?
        .ok_or_else(|| Error::Config("train-surrogate needs --space (or a manifest from gen-data)".into()))?;
    let dir = data.map_or_else(|| common.out.join("data"), Path::to_path_buf);
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(dir.clone()),
            _ => Error::io(format!("listing {}", dir.display()), e),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingArtifact(dir.join("*.csv")));
    }
    let datasets = files
        .iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            DeviceDataset::read_csv(&space, p, id)
        })
        .collect::<Result<Vec<_>>>()?;
    let (obj, reports) = surrogate::train_surrogate(&space, &datasets, cfg.aggregation, &cfg.fit)?;
    create_dir(&common.out)?;
    let path = common.out.join("surrogate.json");
    obj.save(&path)?;
    if manifest.space.is_none() || common.space.is_some() {
        let space_path = common.out.join("space.json");
        trainer::write_json(&space, &space_path)?;
        manifest.record_space(&space, space_path)?;
    }
    manifest.surrogate = Some(path.clone());
    manifest.seeds.insert("train-surrogate".into(), cfg.fit.seed);
    manifest
        .config_hashes
        .insert("train-surrogate".into(), config_hash(&cfg)?);
    manifest.save(&common.out)?;
    for (d, r) in datasets.iter().zip(&reports) {
        println!("{}: training rmse {:.5}", d.device_id, r.final_rmse);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn load_surrogate(
    common: &Common,
    manifest: &RunManifest,
    flag: Option<&Path>,
) -> Result<(SurrogateObjective, PathBuf)> {
    let path = flag
        .map(Path::to_path_buf)
        .or_else(|| manifest.surrogate.clone())
        .unwrap_or_else(|| common.out.join("surrogate.json"));
    let obj = SurrogateObjective::load(&path)?;
    expect_space(resolve_space(common, manifest)?.as_ref(), obj.space(), "surrogate")?;
    Ok((obj, path))
}

fn cmd_train_agent(
    common: &Common,
    surrogate: Option<&Path>,
    updates: Option<usize>,
    steps: Option<usize>,
    batch: Option<usize>,
) -> Result<()> {
    let mut cfg: TrainConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(u) = updates {
        cfg.total_updates = u;
    }
    if let Some(t) = steps {
        cfg.episode_length = t;
    }
    if let Some(b) = batch {
        cfg.batch_size = b;
    }
    let mut manifest = RunManifest::load_or_default(&common.out)?;
    let (obj, _) = load_surrogate(common, &manifest, surrogate)?;
    let every = (cfg.total_updates / 20).max(1);
    let outcome = trainer::train_with_progress(obj.space(), &obj, &cfg, |p| {
        if p.update % every == 0 || p.update + 1 == cfg.total_updates {
            log::info!(
                "update {}: mean best-f {:.5}, mean return {:.5}",
                p.update,
                p.mean_best_f,
                p.mean_return
            );
        }
    })?;
    create_dir(&common.out)?;
    let best = common.out.join("checkpoint.json");
    let last = common.out.join("checkpoint_last.json");
    let curve = common.out.join("curve.csv");
    outcome.best.save(&best)?;
    outcome.last.save(&last)?;
    outcome.curve.write_csv(&curve)?;
    manifest.checkpoint = Some(best.clone());
    manifest.checkpoint_last = Some(last);
    manifest.learning_curve = Some(curve);
    manifest.seeds.insert("train-agent".into(), cfg.seed);
    manifest.config_hashes.insert("train-agent".into(), config_hash(&cfg)?);
    manifest.save(&common.out)?;
    if let (Some(first), Some(tail)) = (
        outcome.curve.window_mean_best_f(0.1, false),
        outcome.curve.window_mean_best_f(0.1, true),
    ) {
        println!("mean best-f: first 10% {first:.5}, last 10% {tail:.5}");
    }
    println!("wrote {}", best.display());
    Ok(())
}

fn cmd_tune(
    common: &Common,
    checkpoint: Option<&Path>,
    surrogate: Option<&Path>,
    x0: Option<&str>,
    steps: usize,
) -> Result<()> {
    let manifest = RunManifest::load_or_default(&common.out)?;
    let (obj, _) = load_surrogate(common, &manifest, surrogate)?;
    let ckpt_path = checkpoint
        .map(Path::to_path_buf)
        .or_else(|| manifest.checkpoint.clone())
        .unwrap_or_else(|| common.out.join("checkpoint.json"));
    let ckpt = Checkpoint::load(&ckpt_path)?;
    ckpt.check(obj.space())?;
    if steps == 0 {
        return Err(Error::Config("--steps must be at least 1".into()));
    }
    let seed = common.seed.unwrap_or(0);
    let mut r = rng::child(seed, &[0]);
    let start = match x0 {
        Some(s) => parse_point(obj.space(), s)?,
        None => obj.space().sample_uniform(&mut r),
    };
    let (x, f, _) = trainer::tune(&ckpt, &obj, steps, &start, &mut r)?;
    println!("x* = {x}");
    println!("f(x*) = {f}");
    Ok(())
}

struct BenchFlags<'a> {
    surrogate: Option<&'a Path>,
    fixture: Option<&'a str>,
    checkpoint: Option<&'a Path>,
    methods: Option<&'a str>,
    inits: Option<usize>,
    steps: Option<usize>,
}

fn cmd_bench(common: &Common, flags: BenchFlags<'_>) -> Result<()> {
    let mut cfg: BenchmarkConfig = load_config(common.config.as_deref())?;
    let mut manifest = RunManifest::load_or_default(&common.out)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = flags.inits {
        cfg.n_inits = n;
    }
    if let Some(t) = flags.steps {
        cfg.episode_length = t;
    }
    if let Some(m) = flags.methods {
        cfg.methods = m.split(',').map(|s| Method::parse(s.trim())).collect::<Result<_>>()?;
    }
    match (flags.surrogate, flags.fixture) {
        (Some(_), Some(_)) => return Err(Error::Config("give either --surrogate or --fixture".into())),
        (Some(p), None) => cfg.objective = ObjectiveSpec::Surrogate(p.to_path_buf()),
        (None, Some(f)) => cfg.objective = ObjectiveSpec::Fixture(FixtureId::parse(f)?),
        (None, None) if common.config.is_none() => {
            if let Some(p) = &manifest.surrogate {
                cfg.objective = ObjectiveSpec::Surrogate(p.clone());
            }
        }
        (None, None) => {}
    }
    if let Some(c) = flags.checkpoint {
        cfg.checkpoint = Some(c.to_path_buf());
    } else if cfg.checkpoint.is_none() && cfg.methods.contains(&Method::L2o) {
        cfg.checkpoint = manifest.checkpoint.clone();
    }
    cfg.check()?;
    let expected = resolve_space(common, &manifest)?;
    if let (Some(s), ObjectiveSpec::Surrogate(p)) = (&expected, &cfg.objective) {
        expect_space(Some(s), SurrogateObjective::load(p)?.space(), "surrogate")?;
    }
    let report = bench::run_benchmark(&cfg)?;
    create_dir(&common.out)?;
    let path = common.out.join("report.json");
    bench::emit_report(&report, ReportFormat::Json, &path)?;
    manifest.report_json = Some(path.clone());
    manifest.seeds.insert("bench".into(), cfg.seed);
    manifest.config_hashes.insert("bench".into(), config_hash(&cfg)?);
    manifest.save(&common.out)?;
    print_summary(&report);
    println!("wrote {}", path.display());
    Ok(())
}

fn print_summary(report: &BenchmarkReport) {
    println!(
        "{:<15} {:>10} {:>10} {:>10} {:>10} {:>10} {:>12} {:>7}",
        "method", "min", "q1", "median", "q3", "max", "mean_s", "evals"
    );
    for (m, r) in &report.methods {
        let b = r.box_stats;
        println!(
            "{:<15} {:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>12.6} {:>7}",
            m.name(),
            b.min,
            b.q1,
            b.median,
            b.q3,
            b.max,
            r.mean_seconds,
            r.evals.iter().max().copied().unwrap_or(0)
        );
    }
}

fn cmd_report(common: &Common, report: Option<&Path>) -> Result<()> {
    let mut manifest = RunManifest::load_or_default(&common.out)?;
    let path = report
        .map(Path::to_path_buf)
        .or_else(|| manifest.report_json.clone())
        .unwrap_or_else(|| common.out.join("report.json"));
    let report = BenchmarkReport::load(&path)?;
    create_dir(&common.out)?;
    let csv = common.out.join("report.csv");
    bench::emit_report(&report, ReportFormat::Csv, &csv)?;
    manifest.report_csv = Some(csv.clone());
    manifest.report_json.get_or_insert(path);
    manifest.save(&common.out)?;
    print_summary(&report);
    println!("wrote {}", csv.display());
    Ok(())
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::GenData { common, fixture, rows } => cmd_gen_data(common, fixture.as_deref(), *rows),
        Command::TrainSurrogate {
            common,
            data,
            aggregation,
            epochs,
        } => cmd_train_surrogate(common, data.as_deref(), aggregation.as_deref(), *epochs),
        Command::TrainAgent {
            common,
            surrogate,
            updates,
            steps,
            batch,
        } => cmd_train_agent(common, surrogate.as_deref(), *updates, *steps, *batch),
        Command::Tune {
            common,
            checkpoint,
            surrogate,
            x0,
            steps,
        } => cmd_tune(
            common,
            checkpoint.as_deref(),
            surrogate.as_deref(),
            x0.as_deref(),
            *steps,
        ),
        Command::Bench {
            common,
            surrogate,
            fixture,
            checkpoint,
            methods,
            inits,
            steps,
        } => cmd_bench(
            common,
            BenchFlags {
                surrogate: surrogate.as_deref(),
                fixture: fixture.as_deref(),
                checkpoint: checkpoint.as_deref(),
                methods: methods.as_deref(),
                inits: *inits,
                steps: *steps,
            },
        ),
        Command::Report { common, report } => cmd_report(common, report.as_deref()),
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::TrainSurrogate { common, .. }
            | Command::TrainAgent { common, .. }
            | Command::Tune { common, .. }
            | Command::Bench { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

/// Runs a parsed command on a pool of `--jobs` threads.
pub fn execute(cli: &Cli) -> Result<()> {
    let jobs = cli.command.common().jobs;
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&cli.command))
}

/// Parses `args`, runs the command and returns the process exit code. Failures
/// print a single `error: <category>: <message>` line to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            eprintln!("error: usage: {msg} (see --help)");
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.category(), e.to_string().replace('\n', " "));
            1
        }
    }
}
