//! `satcon`: analyze, simulate and verify saturated consensus scenarios.

use std::fmt;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use tempfile::NamedTempFile;

use satcon::certify::{analyze, certify, CertificateReport};
use satcon::scenario::{Prepared, RunOutput, RunSummary, ScenarioError};
use satcon::{Mode, Scenario};

const DEFAULT_OUT: &str = "out";

#[derive(Parser)]
#[command(
    name = "satcon",
    version,
    about = "Consensus of saturated agents over directed graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the graph and spectral certificate report of a scenario.
    Analyze { file: PathBuf },
    /// Run scenarios and write trajectory, event log and summary files.
    Simulate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        /// Run several scenarios in parallel, each into its own subdirectory.
        #[arg(long)]
        sweep: bool,
    },
    /// Simulate a scenario and check the Lyapunov and trigger invariants.
    Verify {
        file: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    sample_dt: Option<f64>,
    /// Output directory. Defaults to $SATCON_OUT, then ./out.
    #[arg(long, env = "SATCON_OUT")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Continuous,
    Event,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Continuous => Mode::Continuous,
            ModeArg::Event => Mode::Event,
        }
    }
}

impl RunArgs {
    fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    fn apply(&self, s: &mut Scenario) {
        if let Some(m) = self.mode {
            s.mode = m.into();
        }
        if let Some(t) = self.t_end {
            s.t_end = t;
        }
        if let Some(dt) = self.dt {
            s.dt = dt;
        }
        if let Some(dt) = self.sample_dt {
            s.sample_dt = dt;
        }
    }
}

#[derive(Debug)]
enum Failure {
    Validation(anyhow::Error),
    Certificate(String),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Certificate(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(e) => write!(f, "validation error: {e}"),
            Failure::Certificate(e) => write!(f, "certificate failed: {e}"),
            Failure::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn write_atomic(
    path: &Path,
    fill: impl FnOnce(&mut dyn Write) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = NamedTempFile::new_in(dir)
        .with_context(|| format!("cannot create a file in {}", dir.display()))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

fn emit<T: Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(runtime(e)),
        _ => Ok(()),
    }
}

fn load(file: &Path, args: Option<&RunArgs>) -> Result<Scenario, Failure> {
    let mut s = Scenario::load(file)?;
    if let Some(a) = args {
        a.apply(&mut s);
    }
    Ok(s)
}

fn write_artifacts(dir: &Path, prepared: &Prepared, out: &RunOutput) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write_atomic(&dir.join("trajectory.csv"), |w| {
        Ok(out.trajectory.write_csv(w)?)
    })?;
    if let (Some(log), Some(rule)) = (&out.log, &prepared.rule) {
        write_json(&dir.join("events.json"), &log.to_json())?;
        let p = prepared.x0.ncols();
        write_atomic(&dir.join("events.csv"), |w| {
            Ok(log.write_csv(w, rule, prepared.h, p)?)
        })?;
    }
    write_json(&dir.join("summary.json"), &out.summary)?;
    Ok(())
}

fn simulate_one(file: &Path, args: &RunArgs, dir: &Path) -> Result<RunSummary, Failure> {
    let s = load(file, Some(args))?;
    let prepared = s.prepare()?;
    let out = s.run_prepared(&prepared)?;
    write_artifacts(dir, &prepared, &out).map_err(runtime)?;
    Ok(out.summary)
}

fn cmd_analyze(file: &Path) -> Result<(), Failure> {
    let s = load(file, None)?;
    let graph = s.graph()?;
    let analysis = analyze(&graph).map_err(runtime)?;
    emit(&analysis.report)?;
    Ok(())
}

fn cmd_simulate(files: &[PathBuf], args: &RunArgs, sweep: bool) -> Result<(), Failure> {
    let out = args.out_dir();
    if !sweep {
        if files.len() > 1 {
            return Err(Failure::Validation(anyhow::anyhow!(
                "several scenario files need --sweep"
            )));
        }
        let summary = simulate_one(&files[0], args, &out)?;
        emit(&summary)?;
        return Ok(());
    }
    let results: Vec<(String, Result<RunSummary, Failure>)> = files
        .par_iter()
        .map(|f| {
            let stem = f
                .file_stem()
                .map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned());
            let r = simulate_one(f, args, &out.join(&stem));
            (stem, r)
        })
        .collect();
    let mut worst: Option<Failure> = None;
    let mut report = serde_json::Map::new();
    for (stem, r) in results {
        match r {
            Ok(summary) => {
                report.insert(stem, serde_json::to_value(summary).map_err(runtime)?);
            }
            Err(e) => {
                eprintln!("{stem}: {e}");
                report.insert(stem, serde_json::json!({ "error": e.to_string() }));
                if worst.as_ref().is_none_or(|w| e.code() > w.code()) {
                    worst = Some(e);
                }
            }
        }
    }
    emit(&report)?;
    worst.map_or(Ok(()), Err)
}

fn cmd_verify(file: &Path, args: &RunArgs) -> Result<(), Failure> {
    let s = load(file, Some(args))?;
    let prepared = s.prepare()?;
    let analysis = analyze(&prepared.graph).map_err(runtime)?;
    let out = s.run_prepared(&prepared)?;
    let dir = args.out_dir();
    write_artifacts(&dir, &prepared, &out).map_err(runtime)?;
    let report: CertificateReport = certify(&analysis, &prepared, s.mode, &out).map_err(runtime)?;
    write_json(&dir.join("certificate.json"), &report).map_err(runtime)?;
    emit(&report)?;
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed && !c.diagnostic)
            .map(|c| c.name.as_str())
            .collect();
        Err(Failure::Certificate(failed.join(", ")))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Analyze { file } => cmd_analyze(file),
        Command::Simulate { files, run, sweep } => cmd_simulate(files, run, *sweep),
        Command::Verify { file, run } => cmd_verify(file, run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
