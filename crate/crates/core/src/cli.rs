//! The `riemctl` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::evaluate::{evaluate, Slice};
use crate::manifold::ChartSpec;
use crate::report::ReportBundle;
use crate::scenario::{BaseSpec, Scenario, ScenarioSpec};
use crate::suite::geometry_suite;

/// Environment variable overriding the default output directory.
pub const OUT_ENV: &str = "RIEMCTL_OUT";
pub const DEFAULT_OUT: &str = "riemctl-reports";
/// Exit code for usage and configuration errors.
pub const EXIT_CONFIG: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "riemctl", version, about = "Optimality checks for control problems on Riemannian manifolds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Geometry and distance self-checks of a chart (builtin name or chart JSON).
    GeometryCheck {
        chart: String,
        #[command(flatten)]
        opts: Opts,
    },
    /// Integrates the base control, solves the duals and runs every applicable check.
    Run(ScenarioArgs),
    /// Maximum principle, stationarity and second order necessary checks.
    NecessaryCheck(ScenarioArgs),
    /// Spike sufficiency scan.
    SufficientCheck(ScenarioArgs),
    /// Endpoint-constrained form, kernel pairs and the energy form.
    EndpointCheck(ScenarioArgs),
    /// Taylor-order sweeps of the needle or classical expansion.
    Slopes(ScenarioArgs),
}

#[derive(Args, Debug)]
pub struct ScenarioArgs {
    pub scenario: PathBuf,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Args, Debug, Default)]
pub struct Opts {
    /// Largest integration step.
    #[arg(long)]
    pub step: Option<f64>,
    /// Relative finite-difference step of synthesized partials.
    #[arg(long)]
    pub fd_step: Option<f64>,
    /// Tolerance of the sign conditions.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: $RIEMCTL_OUT, then the scenario's output dir, then ./riemctl-reports).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

/// Exit status and the path of the written report.
#[derive(Debug)]
pub struct Outcome {
    pub code: i32,
    pub report: PathBuf,
    pub bundle: ReportBundle,
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) | Error::NoConvergence { .. } | Error::DegeneratePlane | Error::DomainExit { .. } => 2,
        _ => EXIT_CONFIG,
    }
}

/// Parses `argv` (program name first), runs the command, prints the summary
/// and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(out) => {
            print!("{}", out.bundle.summary());
            println!("report: {}", out.report.display());
            out.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn load_scenario(path: &Path, opts: &Opts) -> Result<ScenarioSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut spec = ScenarioSpec::from_json(&text)?;
    if let Some(v) = opts.step {
        spec.solver.step = v;
    }
    if let Some(v) = opts.fd_step {
        spec.solver.fd_step = v;
    }
    if let Some(v) = opts.tol {
        spec.solver.tol = v;
    }
    if let Some(v) = opts.seed {
        spec.seed = v;
    }
    spec.validate()?;
    Ok(spec)
}

fn load_chart(arg: &str) -> Result<ChartSpec> {
    let path = Path::new(arg);
    if path.extension().is_some_and(|e| e == "json") || path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {arg}: {e}")))?;
        Ok(serde_json::from_str(&text)?)
    } else {
        ChartSpec::builtin(arg)
    }
}

fn out_dir(opts: &Opts, spec_dir: Option<&str>) -> PathBuf {
    if let Some(d) = &opts.out {
        return d.clone();
    }
    if let Some(d) = std::env::var_os(OUT_ENV).filter(|d| !d.is_empty()) {
        return PathBuf::from(d);
    }
    spec_dir.map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn write(bundle: ReportBundle, dir: &Path, format: Format) -> Result<Outcome> {
    std::fs::create_dir_all(dir)?;
    let (ext, body) = match format {
        Format::Json => ("json", bundle.to_json()),
        Format::Csv => ("csv", bundle.to_csv()),
    };
    let path = dir.join(format!("{}_{}.{ext}", bundle.scenario, bundle.command));
    std::fs::write(&path, body)?;
    Ok(Outcome {
        code: bundle.exit_code(),
        report: path,
        bundle,
    })
}

pub fn execute(cmd: &Command) -> Result<Outcome> {
    let (args, slice, name) = match cmd {
        Command::GeometryCheck { chart, opts } => {
            let spec = load_chart(chart)?;
            if opts.step.is_some() || opts.fd_step.is_some() || opts.tol.is_some() {
                return Err(Error::Config("geometry-check takes only --seed, --out and --format".into()));
            }
            let seed = opts.seed.unwrap_or(0);
            let c = spec.build()?;
            let mut bundle = ReportBundle::new(&spec.name, "geometry-check", &(&spec, seed), seed);
            bundle.geometry = geometry_suite(&c, seed)?;
            return write(bundle, &out_dir(opts, None), opts.format);
        }
        Command::Run(a) => (a, Slice::All, "run"),
        Command::NecessaryCheck(a) => (a, Slice::Necessary, "necessary-check"),
        Command::SufficientCheck(a) => (a, Slice::Sufficient, "sufficient-check"),
        Command::EndpointCheck(a) => (a, Slice::Endpoint, "endpoint-check"),
        Command::Slopes(a) => (a, Slice::Slopes, "slopes"),
    };
    let spec = load_scenario(&args.scenario, &args.opts)?;
    let dir = out_dir(&args.opts, spec.output.as_ref().and_then(|o| o.dir.as_deref()));
    let seed = spec.seed;
    // The output location does not change results, so it stays out of the hash.
    let mut hashed = spec.clone();
    hashed.output = None;
    let mut bundle = ReportBundle::new(&spec.name, name, &hashed, seed);
    let brute = matches!(spec.base, BaseSpec::BruteForce { .. });
    let sc = Scenario::from_spec(spec)?;
    bundle = bundle.with_evaluation(evaluate(&sc, slice)?);
    if brute {
        bundle.provenance.oracle = Some("base control and its cost come from this toolkit's exhaustive grid search".into());
    }
    write(bundle, &dir, args.opts.format)
}
