//! `tvsekf` command-line front end.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use tvsekf::data::{read_data_csv, write_dataset, write_table};
use tvsekf::filter::Backend;
use tvsekf::mc::{compare_backends, emit_tables, run_condition, McReport};
use tvsekf::model::ModelSpec;
use tvsekf::simgen::{gen_dataset, ScenarioConfig, Simulation, SubCondition};
use tvsekf::tuner::{fit, sample_variance, TuneConfig};
use tvsekf::Error;

use manifest::Manifest;

#[derive(Parser, Debug)]
#[command(name = "tvsekf", version, about = "Time-varying dynamic factor models via square-root second-order EKF")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one synthetic dataset.
    Simulate(SimulateArgs),
    /// Fit a model to a CSV dataset.
    Fit(FitArgs),
    /// Run Monte Carlo conditions and write summary tables.
    Mc(StudyArgs),
    /// Run both filter backends on identical seeds and compare.
    Compare(StudyArgs),
}

#[derive(Args, Debug)]
struct ScenarioFlags {
    /// Simulation design (1: drifting cross-lags, 2: drifting intervention effects).
    #[arg(long)]
    sim: Option<u8>,
    /// Fitted sub-condition (A, B or C).
    #[arg(long)]
    cond: Option<String>,
    /// Series length.
    #[arg(long = "T", id = "t_len")]
    t_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scenario JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    scenario: ScenarioFlags,
    /// Fraction of the series before the intervention starts.
    #[arg(long)]
    onset_fraction: Option<f64>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Data CSV with columns y1..yk, x1..xr.
    #[arg(long)]
    data: PathBuf,
    /// Model spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Tuner config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    backend: Option<Backend>,
    /// Recorded in the manifest; fitting itself is deterministic.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StudyArgs {
    /// Study JSON: `{"scenarios": [...], "tune": {...}}`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    scenario: ScenarioFlags,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    backend: Option<Backend>,
    #[arg(long)]
    out: PathBuf,
}

/// Study configuration file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudyConfig {
    #[serde(default)]
    scenarios: Vec<ScenarioConfig>,
    #[serde(default)]
    tune: TuneConfig,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Other(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidSpec(_) | Error::InvalidScenario(_) | Error::Json(_) | Error::LayoutMismatch => {
                CliError::Config(e.to_string())
            }
            Error::MissingData { .. } | Error::Data(_) | Error::Csv(_) | Error::DimensionMismatch(_) => {
                CliError::Data(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NONCONVERGENCE: u8 = 4;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size thread pool: {e}");
        }
    }
    let argv: Vec<String> = std::env::args().collect();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a, &argv),
        Command::Fit(a) => fit_cmd(a, &argv),
        Command::Mc(a) => mc(a, &argv, false),
        Command::Compare(a) => mc(a, &argv, true),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(CliError::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(CliError::Data(m)) => {
            eprintln!("data error: {m}");
            ExitCode::from(EXIT_DATA)
        }
        Err(CliError::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::FAILURE
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn parse_cond(s: &str) -> Result<SubCondition, CliError> {
    s.parse().map_err(|e: Error| CliError::Config(e.to_string()))
}

fn apply_flags(base: Option<ScenarioConfig>, flags: &ScenarioFlags) -> Result<ScenarioConfig, CliError> {
    let mut sc = match base {
        Some(s) => s,
        None => {
            let sim = flags.sim.ok_or_else(|| CliError::Config("--sim is required without --config".into()))?;
            let cond = flags.cond.as_deref().ok_or_else(|| CliError::Config("--cond is required without --config".into()))?;
            let t_len = flags.t_len.ok_or_else(|| CliError::Config("--T is required without --config".into()))?;
            ScenarioConfig::new(Simulation::from_number(sim)?, parse_cond(cond)?, t_len, 0)
        }
    };
    if let Some(sim) = flags.sim {
        sc.simulation = Simulation::from_number(sim)?;
    }
    if let Some(c) = &flags.cond {
        sc.subcondition = parse_cond(c)?;
    }
    if let Some(t) = flags.t_len {
        sc.t_len = t;
    }
    if let Some(seed) = flags.seed {
        sc.seed = seed;
    }
    sc.validate()?;
    Ok(sc)
}

fn simulate(a: &SimulateArgs, argv: &[String]) -> Result<u8, CliError> {
    let mut manifest = Manifest::start("simulate", argv, a.config.as_deref());
    let base = a.config.as_deref().map(read_json::<ScenarioConfig>).transpose()?;
    let mut sc = apply_flags(base, &a.scenario)?;
    if let Some(f) = a.onset_fraction {
        sc.onset_fraction = f;
    }
    if let Some(b) = a.burn_in {
        sc.burn_in = b;
    }
    sc.validate()?;
    let d = gen_dataset(&sc)?;
    write_dataset(&d, &a.out)?;
    fs::write(a.out.join("spec.json"), sc.fitted_spec().to_json()?)?;
    manifest.seed = Some(sc.seed);
    manifest.resolved_config = serde_json::to_value(&sc).ok();
    manifest.outputs = vec!["data.csv".into(), "truth.json".into(), "spec.json".into()];
    manifest.finish(&a.out)?;
    log::info!("wrote {} (T={}, seed {})", a.out.display(), sc.t_len, sc.seed);
    Ok(0)
}

fn fit_cmd(a: &FitArgs, argv: &[String]) -> Result<u8, CliError> {
    let mut manifest = Manifest::start("fit", argv, a.config.as_deref());
    let spec_text = fs::read_to_string(&a.spec).map_err(|e| CliError::Config(format!("{}: {e}", a.spec.display())))?;
    let spec = ModelSpec::from_json(&spec_text)?;
    let mut cfg: TuneConfig = a.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
    if let Some(b) = a.backend {
        cfg.backend = b;
    }
    cfg.validate()?;
    let (obs, inputs) = read_data_csv(&a.data, spec.k(), spec.r())?;
    let out = fit(&obs, &inputs, &spec, &cfg)?;
    fs::create_dir_all(&a.out)?;

    let mut header: Vec<String> = (1..=spec.m()).map(|i| format!("eta{i}")).collect();
    header.extend(spec.tvp_slots().iter().map(|s| s.name()));
    let t_len = out.run.steps.len();
    let n = spec.state_dim();
    let filtered = DMatrix::from_fn(t_len, n, |t, j| out.run.steps[t].updated_state.values[j]);
    let smoothed = DMatrix::from_fn(t_len, n, |t, j| out.smoothed[t].state.values[j]);
    write_table(&a.out.join("filtered_states.csv"), &header, &filtered, true)?;
    write_table(&a.out.join("smoothed_states.csv"), &header, &smoothed, true)?;

    let mut class = String::from("parameter,sample_variance,verdict\n");
    for (p, (_, c)) in out.smoothed_paths.iter().zip(&out.classification) {
        class.push_str(&format!("{},{:e},{}\n", p.name(), sample_variance(&p.values), c.as_str()));
    }
    fs::write(a.out.join("classification.csv"), class)?;

    let estimates = serde_json::json!({
        "parameters": out.estimates(),
        "log_likelihood": out.tuned.log_lik,
        "iterations": out.tuned.iterations,
        "evaluations": out.tuned.evaluations,
        "converged": out.tuned.converged,
        "backend": cfg.backend,
        "tvp_noise_estimates": out.tuned.tvp_noise_estimates,
        "classification": out.classification.iter().map(|(s, c)| (s.name(), c.as_str()))
            .collect::<std::collections::BTreeMap<_, _>>(),
        "time_invariant_start": {
            "log_likelihood": out.time_invariant.log_lik,
            "iterations": out.time_invariant.iterations,
            "converged": out.time_invariant.converged,
        },
    });
    fs::write(a.out.join("estimates.json"), serde_json::to_string_pretty(&estimates).map_err(Error::from)?)?;

    manifest.seed = a.seed;
    manifest.inputs = vec![a.data.display().to_string(), a.spec.display().to_string()];
    manifest.resolved_config = serde_json::to_value(&cfg).ok();
    manifest.outputs = ["estimates.json", "filtered_states.csv", "smoothed_states.csv", "classification.csv"]
        .map(String::from)
        .to_vec();
    manifest.finish(&a.out)?;
    if out.tuned.converged {
        log::info!("converged in {} iterations, log-likelihood {:.4}", out.tuned.iterations, out.tuned.log_lik);
        Ok(0)
    } else {
        eprintln!(
            "optimizer did not converge after {} iterations; outputs written and flagged",
            out.tuned.iterations
        );
        Ok(EXIT_NONCONVERGENCE)
    }
}

fn mc(a: &StudyArgs, argv: &[String], compare: bool) -> Result<u8, CliError> {
    let mut manifest = Manifest::start(if compare { "compare" } else { "mc" }, argv, a.config.as_deref());
    let mut study: StudyConfig = a.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
    let flags = &a.scenario;
    let single = flags.sim.is_some() || flags.cond.is_some() || flags.t_len.is_some();
    if single || study.scenarios.is_empty() {
        let base = if study.scenarios.len() == 1 { study.scenarios.pop() } else { None };
        study.scenarios = vec![apply_flags(base, flags)?];
    } else if let Some(seed) = flags.seed {
        for s in &mut study.scenarios {
            s.seed = seed;
        }
    }
    for s in &mut study.scenarios {
        if let Some(r) = a.reps {
            s.replications = r;
        }
        s.validate()?;
    }
    if let Some(b) = a.backend {
        study.tune.backend = b;
    }
    study.tune.validate()?;

    let mut reports: Vec<McReport> = Vec::new();
    let mut comparison = Vec::new();
    for s in &study.scenarios {
        log::info!("running {} ({} replications)", s.condition_id(), s.replications);
        if compare {
            let c = compare_backends(s, &study.tune)?;
            comparison.push(serde_json::json!({
                "condition": s.condition_id(),
                "max_state_difference": c.max_state_difference,
                "square_root": {"mean_iterations": c.square_root.mean_iterations, "convergence_pct": c.square_root.convergence_pct},
                "standard": {"mean_iterations": c.standard.mean_iterations, "convergence_pct": c.standard.convergence_pct},
            }));
            reports.push(c.square_root);
            reports.push(c.standard);
        } else {
            reports.push(run_condition(s, &study.tune)?);
        }
    }
    emit_tables(&reports, &a.out)?;
    let mut outputs: Vec<String> = [
        "tables/bias.csv",
        "tables/sd.csv",
        "tables/classification.csv",
        "tables/efficiency.csv",
        "tables/tables.txt",
        "report.json",
    ]
    .map(String::from)
    .to_vec();
    if compare {
        let mut table = String::from("condition,backend,mean_iterations,convergence_pct,max_state_difference\n");
        for (c, pair) in comparison.iter().zip(reports.chunks(2)) {
            for r in pair {
                table.push_str(&format!(
                    "{},{},{:.3},{:.2},{:e}\n",
                    r.condition,
                    r.backend.as_str(),
                    r.mean_iterations,
                    r.convergence_pct,
                    c["max_state_difference"].as_f64().unwrap_or(f64::NAN)
                ));
            }
        }
        fs::write(a.out.join("tables/comparison.csv"), table)?;
        fs::write(
            a.out.join("comparison.json"),
            serde_json::to_string_pretty(&comparison).map_err(Error::from)?,
        )?;
        outputs.push("tables/comparison.csv".into());
        outputs.push("comparison.json".into());
    }
    manifest.seed = study.scenarios.first().map(|s| s.seed);
    manifest.resolved_config = serde_json::to_value(&study).ok();
    manifest.outputs = outputs;
    manifest.finish(&a.out)?;
    Ok(0)
}
