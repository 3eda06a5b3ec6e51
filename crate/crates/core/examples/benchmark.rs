//! The full comparison on the four-knob reference fixture: build the
//! surrogate, train the agent, and benchmark every method over 16 paired
//! starts. Pass a smaller update count to shorten training.
//!
//! cargo run --release --example benchmark -- [updates] [out_dir]

use std::path::PathBuf;

use l2o_tune::bench::fixture::{grid_max, FixtureId, FIXTURE_SEED};
use l2o_tune::bench::{emit_report, run_benchmark_on, BenchmarkConfig, ObjectiveSpec, ReportFormat};
use l2o_tune::trainer::train_with_progress;
use l2o_tune::Objective;

fn main() -> l2o_tune::Result<()> {
    let mut args = std::env::args().skip(1);
    let updates: usize = args.next().map_or(2000, |s| s.parse().expect("update count"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "bench_out".into()));
    std::fs::create_dir_all(&out).expect("output directory");

    let id = FixtureId::Bump4x16;
    let obj = id.build(FIXTURE_SEED)?;
    let (xmax, fmax) = grid_max(&obj)?;
    println!("surrogate ready; grid maximum f{xmax} = {fmax:.4}");

    let mut config = id.train_config(FIXTURE_SEED);
    config.total_updates = updates;
    let trained = train_with_progress(obj.space(), &obj, &config, |p| {
        if p.update % 100 == 0 {
            println!(
                "update {:>4}: mean best-f {:.4} ({:.0}s)",
                p.update, p.mean_best_f, p.seconds
            );
        }
    })?;
    trained.curve.write_csv(&out.join("curve.csv"))?;

    let bench = BenchmarkConfig {
        objective: ObjectiveSpec::Fixture(id),
        ..BenchmarkConfig::default()
    };
    let report = run_benchmark_on(&obj, Some(&trained.best), &bench)?;
    println!(
        "{:<15} {:>8} {:>8} {:>8} {:>10}",
        "method", "median", "iqr", "min", "mean ms"
    );
    for (m, r) in &report.methods {
        let b = r.box_stats;
        println!(
            "{m:<15} {:>8.4} {:>8.4} {:>8.4} {:>10.3}",
            b.median,
            b.iqr(),
            b.min,
            r.mean_seconds * 1e3
        );
    }
    emit_report(&report, ReportFormat::Json, &out.join("report.json"))?;
    emit_report(&report, ReportFormat::Csv, &out.join("report.csv"))?;
    println!("wrote {}", out.display());
    Ok(())
}
