//! `dfscil` command-line entry point.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 for bad input or
//! configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dfscil::data::{generate_synthetic, load_stream, save_stream, FeatureFormat, SyntheticBenchmarkSpec};
use dfscil::error::Error;
use dfscil::evaluation::{emit_report, evaluate_session, EvaluationReport, ReportFormat};
use dfscil::experiment::{run_experiment, sweep, sweep_csv_name, ExperimentConfig, SweepAxis};
use dfscil::trainer::Checkpoint;

#[derive(Debug, Parser)]
#[command(name = "dfscil", version, about = "Few-shot class-incremental learning with deep dictionaries")]
struct Cli {
    /// Relative output paths are resolved against this directory.
    #[arg(long, global = true, env = "DFSCIL_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Binary,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-cluster stream to disk.
    Generate {
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 20)]
        base: usize,
        /// Defaults to sessions * way.
        #[arg(long)]
        novel_classes: Option<usize>,
        #[arg(long, default_value_t = 4)]
        sessions: usize,
        #[arg(long, default_value_t = 5)]
        way: usize,
        #[arg(long, default_value_t = 5)]
        shot: usize,
        #[arg(long, default_value_t = 100)]
        train_per_class: usize,
        #[arg(long, default_value_t = 50)]
        test_per_class: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 6.0)]
        separation: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing stream.
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate one configuration.
    Run {
        config: PathBuf,
        /// Overrides `output.dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per value of a hyper-parameter.
    Sweep {
        config: PathBuf,
        /// m, lambda, tau, eta, alpha or pseudo-classes
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-score a checkpoint on the test splits of a stream.
    Evaluate {
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Last session to include; defaults to the last one the checkpoint has learned.
        #[arg(long)]
        session: Option<usize>,
        /// Write the report as CSV here instead of printing a table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print checkpoint metadata.
    Inspect { checkpoint: PathBuf },
}

fn resolve(root: Option<&Path>, path: &Path) -> PathBuf {
    match root {
        Some(r) if path.is_relative() => r.join(path),
        _ => path.to_path_buf(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.output_root.as_deref();
    match cli.command {
        Command::Generate {
            dim,
            base,
            novel_classes,
            sessions,
            way,
            shot,
            train_per_class,
            test_per_class,
            sigma,
            separation,
            seed,
            format,
            out,
            force,
        } => {
            let spec = SyntheticBenchmarkSpec {
                input_dim: dim,
                base_classes: base,
                novel_classes: novel_classes.unwrap_or(sessions * way),
                sessions,
                way,
                shot,
                base_train_per_class: train_per_class,
                test_per_class,
                sigma,
                separation,
                seed,
            };
            let stream = generate_synthetic(&spec)?;
            let format = match format {
                Format::Csv => FeatureFormat::Csv,
                Format::Binary => FeatureFormat::Binary,
            };
            let dir = resolve(root, &out);
            let manifest = save_stream(&stream, &dir, format, force)
                .with_context(|| format!("writing stream to {}", dir.display()))?;
            println!("{}", manifest.display());
        }
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = resolve(root, out.as_deref().unwrap_or(&cfg.output.dir));
            let outcome = run_experiment(&cfg, &dir)?;
            print!("{}", outcome.report.to_table()?);
            println!("final dictionary drift: {:.6}", outcome.drift.last().copied().unwrap_or(0.0));
            println!("outputs in {}", dir.display());
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => {
            let axis: SweepAxis = axis.parse()?;
            let cfg = ExperimentConfig::load(&config)?;
            let dir = resolve(root, &out.unwrap_or_else(|| cfg.output.dir.join(format!("sweep_{axis}"))));
            let rows = sweep(&cfg, axis, &values, &dir)?;
            println!("{:>12} {:>8} {:>8} {:>8} {:>10}", axis.name(), "joint", "harmonic", "average", "drift");
            for r in &rows {
                let h = r.final_harmonic.map_or_else(|| "-".into(), |h| format!("{:.2}", 100.0 * h));
                println!(
                    "{:>12} {:>8.2} {:>8} {:>8.2} {:>10.6}",
                    r.value,
                    100.0 * r.final_joint,
                    h,
                    100.0 * r.average,
                    r.drift
                );
            }
            println!("{}", dir.join(sweep_csv_name(axis)).display());
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            session,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let stream = load_stream(&manifest)?;
            let learned = ck.state.cursor.checked_sub(1).ok_or_else(|| {
                Error::State("checkpoint has not finished the base session".into())
            })?;
            let last = session.unwrap_or(learned);
            if last > learned {
                return Err(Error::Config(format!("checkpoint has only learned sessions 0..={learned}")).into());
            }
            let mut report = EvaluationReport::new(ck.trainer_config.variant());
            for t in 0..=last {
                report.sessions.push(evaluate_session(&ck.state, &stream.cumulative_test(t)?, t)?);
            }
            match out {
                Some(p) => {
                    let p = resolve(root, &p);
                    emit_report(&report, &p, ReportFormat::Csv)?;
                    println!("{}", p.display());
                }
                None => print!("{}", report.to_table()?),
            }
        }
        Command::Inspect { checkpoint } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let s = &ck.state;
            println!("format: {}", ck.format);
            println!("variant: {}", ck.trainer_config.variant());
            println!("seed: {}", ck.trainer_config.seed);
            println!("sessions learned: {}", s.cursor);
            println!("extractor widths: {:?} (frozen: {})", s.extractor.widths(), s.extractor.is_frozen());
            println!(
                "dictionary: {} atoms x {} dims, lambda {}",
                s.dictionary.m(),
                s.dictionary.d(),
                s.dictionary.lambda()
            );
            println!("tau: {}", s.classifier.tau);
            println!("drift from base dictionary: {:.6}", s.drift()?);
            for set in &s.sessions {
                println!("session {}: {} classes {:?}", set.session(), set.len(), set.labels());
            }
            match &s.pseudo {
                Some(p) => println!("pseudo classes: {}", p.len()),
                None => println!("pseudo classes: none"),
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_usage() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if let Some(Error::NonFiniteLoss { batch, .. }) = err.downcast_ref::<Error>() {
                eprintln!("offending batch rows: {batch:?}");
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
