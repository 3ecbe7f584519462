//! Monte Carlo harness: generate, fit and score replications of one
//! condition, aggregate the outcome measures, and write the summary tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{run_filter, Backend};
use crate::model::{MatrixName, StateSpaceModel};
use crate::simgen::{gen_dataset, ScenarioConfig};
use crate::tuner::{fit, Classification, TuneConfig};

/// Per-replication estimates fed to [`relative_bias`].
#[derive(Debug, Clone, Copy)]
pub enum Estimates<'a> {
    /// One point estimate per replication.
    Invariant(&'a [f64]),
    /// One trajectory per replication, for a constant parameter estimated as
    /// time-varying; the relative error is averaged over time first.
    TimeAveraged(&'a [Vec<f64>]),
}

/// Mean relative bias in percent: `100 · mean_k[(π̂_k − π) / π]`.
pub fn relative_bias(estimates: Estimates<'_>, truth: f64) -> Result<f64> {
    if truth == 0.0 {
        return Err(Error::ZeroTruth);
    }
    let per_rep: Vec<f64> = match estimates {
        Estimates::Invariant(xs) => xs.iter().map(|x| (x - truth) / truth).collect(),
        Estimates::TimeAveraged(paths) => paths
            .iter()
            .map(|p| p.iter().map(|x| (x - truth) / truth).sum::<f64>() / p.len().max(1) as f64)
            .collect(),
    };
    if per_rep.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(100.0 * per_rep.iter().sum::<f64>() / per_rep.len() as f64)
}

/// Sample standard deviation across replications.
pub fn sd_estimates(xs: &[f64]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::TooFewReplications(xs.len()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    Ok((xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// What one replication produced. Failed replications carry `error` and no
/// estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub replication: usize,
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub log_lik: f64,
    /// π entries by name, plus the time mean of each drifting coefficient.
    pub estimates: BTreeMap<String, f64>,
    /// Smoothed trajectory of each coefficient estimated as time-varying.
    pub smoothed_paths: BTreeMap<String, Vec<f64>>,
    pub classification: BTreeMap<String, Classification>,
    /// RMSE of smoothed against generating trajectories, for coefficients that
    /// drift in the data.
    pub path_rmse: BTreeMap<String, f64>,
    pub error: Option<String>,
}

impl ReplicationOutcome {
    pub fn usable(&self) -> bool {
        self.converged && self.error.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    TimeInvariant,
    TimeVarying,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::TimeInvariant => "time-invariant",
            Kind::TimeVarying => "time-varying",
        }
    }
}

/// Aggregates for one estimated parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub generated: Kind,
    pub estimated: Kind,
    /// Generating value when the parameter is constant in the data.
    pub truth: Option<f64>,
    pub mean_estimate: Option<f64>,
    pub mean_relative_bias: Option<f64>,
    pub sd: Option<f64>,
    /// Percentage classified correctly; `None` when the parameter is fitted
    /// as constant and misclassification cannot happen.
    pub classification_accuracy: Option<f64>,
    pub mean_path_rmse: Option<f64>,
    /// Usable replications behind the numbers.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub condition: String,
    pub backend: Backend,
    pub scenario: ScenarioConfig,
    pub replications: usize,
    pub converged: usize,
    pub convergence_pct: f64,
    /// Mean optimizer iterations over all replications that ran.
    pub mean_iterations: f64,
    pub parameters: Vec<ParamSummary>,
    pub failures: Vec<String>,
    pub outcomes: Vec<ReplicationOutcome>,
    pub note: String,
}

impl McReport {
    pub fn parameter(&self, name: &str) -> Option<&ParamSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

const AGGREGATION_NOTE: &str = "non-converged replications count toward the convergence \
percentage but are excluded from bias, SD, classification and RMSE aggregates";

/// Generates, fits and scores replication `rep` of `scenario`.
pub fn run_replication(scenario: &ScenarioConfig, rep: usize, config: &TuneConfig) -> ReplicationOutcome {
    let seed = scenario.replication_seed(rep);
    let mut outcome = ReplicationOutcome {
        replication: rep,
        seed,
        converged: false,
        iterations: 0,
        log_lik: f64::NAN,
        estimates: BTreeMap::new(),
        smoothed_paths: BTreeMap::new(),
        classification: BTreeMap::new(),
        path_rmse: BTreeMap::new(),
        error: None,
    };
    let mut sc = scenario.clone();
    sc.seed = seed;
    let result = gen_dataset(&sc).and_then(|d| {
        let spec = sc.fitted_spec();
        fit(&d.observations, &d.inputs, &spec, config).map(|f| (d, f))
    });
    match result {
        Ok((data, f)) => {
            outcome.converged = f.tuned.converged;
            outcome.iterations = f.tuned.iterations;
            outcome.log_lik = f.tuned.log_lik;
            outcome.estimates = f.estimates();
            for p in &f.smoothed_paths {
                if let Some(truth) = data.truth_path(&p.cell) {
                    let mse = truth
                        .values
                        .iter()
                        .zip(&p.values)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        / p.values.len() as f64;
                    outcome.path_rmse.insert(p.name(), mse.sqrt());
                }
                outcome.smoothed_paths.insert(p.name(), p.values.clone());
            }
            outcome.classification = f.classification.iter().map(|(s, c)| (s.name(), *c)).collect();
        }
        Err(e) => outcome.error = Some(e.to_string()),
    }
    log::info!(
        "{} rep {rep} seed {seed}: converged={} iterations={}{}",
        scenario.condition_id(),
        outcome.converged,
        outcome.iterations,
        outcome.error.as_deref().map(|e| format!(" error: {e}")).unwrap_or_default()
    );
    outcome
}

/// Runs `scenario.replications` replications in parallel and aggregates them.
/// Bit-identical for a given base seed regardless of thread count.
pub fn run_condition(scenario: &ScenarioConfig, config: &TuneConfig) -> Result<McReport> {
    scenario.validate()?;
    config.validate()?;
    let outcomes: Vec<ReplicationOutcome> = (0..scenario.replications)
        .into_par_iter()
        .map(|rep| run_replication(scenario, rep, config))
        .collect();
    Ok(summarize(scenario, config.backend, outcomes))
}

/// Builds the report from per-replication outcomes.
pub fn summarize(scenario: &ScenarioConfig, backend: Backend, outcomes: Vec<ReplicationOutcome>) -> McReport {
    let spec = scenario.fitted_spec();
    let generated_tvp: Vec<String> = scenario.simulation.generated_tvp().iter().map(|s| s.name()).collect();
    let truths = crate::simgen::GeneratingModel::for_scenario(scenario)
        .invariant_values(&scenario.simulation.generated_tvp());
    let usable: Vec<&ReplicationOutcome> = outcomes.iter().filter(|o| o.usable()).collect();

    let mut names = spec.param_names();
    for s in spec.tvp_slots() {
        names.push(s.name());
    }
    let tvp_names: Vec<String> = spec.tvp_slots().iter().map(|s| s.name()).collect();

    let parameters = names
        .iter()
        .map(|name| {
            let estimated = if tvp_names.contains(name) {
                Kind::TimeVarying
            } else {
                Kind::TimeInvariant
            };
            let generated = if generated_tvp.contains(name) {
                Kind::TimeVarying
            } else {
                Kind::TimeInvariant
            };
            let truth = truths.get(name).copied();
            let points: Vec<f64> = usable.iter().filter_map(|o| o.estimates.get(name).copied()).collect();
            let mean_estimate = (!points.is_empty()).then(|| points.iter().sum::<f64>() / points.len() as f64);
            let mean_relative_bias = truth.and_then(|t| {
                let b = if estimated == Kind::TimeVarying {
                    let paths: Vec<Vec<f64>> =
                        usable.iter().filter_map(|o| o.smoothed_paths.get(name).cloned()).collect();
                    relative_bias(Estimates::TimeAveraged(&paths), t)
                } else {
                    relative_bias(Estimates::Invariant(&points), t)
                };
                b.ok().filter(|v| v.is_finite())
            });
            let sd = if generated == Kind::TimeInvariant {
                sd_estimates(&points).ok()
            } else {
                None
            };
            let classification_accuracy = (estimated == Kind::TimeVarying).then(|| {
                let want = match generated {
                    Kind::TimeVarying => Classification::TimeVarying,
                    Kind::TimeInvariant => Classification::TimeInvariant,
                };
                let verdicts: Vec<Classification> =
                    usable.iter().filter_map(|o| o.classification.get(name).copied()).collect();
                if verdicts.is_empty() {
                    f64::NAN
                } else {
                    100.0 * verdicts.iter().filter(|c| **c == want).count() as f64 / verdicts.len() as f64
                }
            });
            let rmses: Vec<f64> = usable.iter().filter_map(|o| o.path_rmse.get(name).copied()).collect();
            let mean_path_rmse = (!rmses.is_empty()).then(|| rmses.iter().sum::<f64>() / rmses.len() as f64);
            ParamSummary {
                name: name.clone(),
                generated,
                estimated,
                truth,
                mean_estimate,
                mean_relative_bias,
                sd,
                classification_accuracy,
                mean_path_rmse,
                n: points.len(),
            }
        })
        .collect();

    let ran: Vec<&ReplicationOutcome> = outcomes.iter().filter(|o| o.error.is_none()).collect();
    let converged = usable.len();
    let replications = outcomes.len();
    McReport {
        condition: scenario.condition_id(),
        backend,
        scenario: scenario.clone(),
        replications,
        converged,
        convergence_pct: if replications == 0 {
            0.0
        } else {
            100.0 * converged as f64 / replications as f64
        },
        mean_iterations: if ran.is_empty() {
            f64::NAN
        } else {
            ran.iter().map(|o| o.iterations as f64).sum::<f64>() / ran.len() as f64
        },
        parameters,
        failures: outcomes
            .iter()
            .filter_map(|o| o.error.as_ref().map(|e| format!("rep {} (seed {}): {e}", o.replication, o.seed)))
            .collect(),
        outcomes,
        note: AGGREGATION_NOTE.to_string(),
    }
}

/// Side-by-side run of both filter backends on identical seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendComparison {
    pub square_root: McReport,
    pub standard: McReport,
    /// Largest absolute difference between the two backends' filtered states
    /// when both run with the square-root π̂, over usable replications.
    pub max_state_difference: f64,
}

pub fn compare_backends(scenario: &ScenarioConfig, config: &TuneConfig) -> Result<BackendComparison> {
    let mut sr_cfg = config.clone();
    sr_cfg.backend = Backend::SquareRoot;
    let mut std_cfg = config.clone();
    std_cfg.backend = Backend::Standard;
    let square_root = run_condition(scenario, &sr_cfg)?;
    let standard = run_condition(scenario, &std_cfg)?;
    let max_state_difference = state_agreement(scenario, &square_root, config)?;
    Ok(BackendComparison {
        square_root,
        standard,
        max_state_difference,
    })
}

/// Reruns both backends at each usable replication's π̂ and reports the
/// largest filtered-state discrepancy.
pub fn state_agreement(scenario: &ScenarioConfig, report: &McReport, config: &TuneConfig) -> Result<f64> {
    let spec = scenario.fitted_spec();
    let diffs: Vec<f64> = report
        .outcomes
        .par_iter()
        .filter(|o| o.usable())
        .map(|o| -> Result<f64> {
            let mut sc = scenario.clone();
            sc.seed = o.seed;
            let d = gen_dataset(&sc)?;
            let f = fit(&d.observations, &d.inputs, &spec, &TuneConfig {
                backend: Backend::SquareRoot,
                ..config.clone()
            })?;
            let model = StateSpaceModel::new(&spec, &f.tuned.pi_hat)?;
            let a = run_filter(&model, &d.observations, &d.inputs, &f.init, Backend::SquareRoot)?;
            let b = run_filter(&model, &d.observations, &d.inputs, &f.init, Backend::Standard)?;
            Ok(a.steps
                .iter()
                .zip(&b.steps)
                .map(|(x, y)| (&x.updated_state.values - &y.updated_state.values).amax())
                .fold(0.0, f64::max))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(diffs.into_iter().fold(0.0, f64::max))
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.6}"),
        _ => "NA".to_string(),
    }
}

/// Writes `tables/{bias,sd,classification,efficiency}.csv`, `tables/tables.txt`,
/// `report.json` and `raw/estimates_<condition>.csv` under `dir`.
pub fn emit_tables(reports: &[McReport], dir: &Path) -> Result<()> {
    let tables = dir.join("tables");
    let raw = dir.join("raw");
    fs::create_dir_all(&tables)?;
    fs::create_dir_all(&raw)?;

    let mut bias = csv::Writer::from_path(tables.join("bias.csv"))?;
    bias.write_record(["condition", "backend", "parameter", "generated", "estimated", "truth", "mean_relative_bias_pct", "n"])?;
    let mut sd = csv::Writer::from_path(tables.join("sd.csv"))?;
    sd.write_record(["condition", "backend", "parameter", "sd", "n"])?;
    let mut class = csv::Writer::from_path(tables.join("classification.csv"))?;
    class.write_record(["condition", "backend", "parameter", "generated", "estimated", "accuracy_pct", "mean_path_rmse", "n"])?;
    let mut eff = csv::Writer::from_path(tables.join("efficiency.csv"))?;
    eff.write_record(["condition", "backend", "replications", "converged", "convergence_pct", "mean_iterations"])?;

    let mut text = String::new();
    for r in reports {
        let b = r.backend.as_str();
        let _ = writeln!(text, "== {} ({b}) ==", r.condition);
        let _ = writeln!(
            text,
            "replications {}  converged {} ({:.1}%)  mean iterations {:.1}",
            r.replications, r.converged, r.convergence_pct, r.mean_iterations
        );
        let _ = writeln!(
            text,
            "{:<16} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "parameter", "truth", "bias %", "sd", "class %", "rmse"
        );
        for p in &r.parameters {
            let n = p.n.to_string();
            if p.truth.is_some() {
                bias.write_record([
                    r.condition.as_str(),
                    b,
                    &p.name,
                    p.generated.as_str(),
                    p.estimated.as_str(),
                    &fmt_opt(p.truth),
                    &fmt_opt(p.mean_relative_bias),
                    &n,
                ])?;
            }
            if p.generated == Kind::TimeInvariant {
                sd.write_record([r.condition.as_str(), b, &p.name, &fmt_opt(p.sd), &n])?;
            }
            if matches!(p.name.split('_').next(), Some("Lambda" | "Phi" | "Gamma")) {
                class.write_record([
                    r.condition.as_str(),
                    b,
                    &p.name,
                    p.generated.as_str(),
                    p.estimated.as_str(),
                    &fmt_opt(p.classification_accuracy),
                    &fmt_opt(p.mean_path_rmse),
                    &n,
                ])?;
            }
            let _ = writeln!(
                text,
                "{:<16} {:>10} {:>10} {:>10} {:>10} {:>10}",
                p.name,
                short(p.truth),
                short(p.mean_relative_bias),
                short(p.sd),
                short(p.classification_accuracy),
                short(p.mean_path_rmse)
            );
        }
        let _ = writeln!(text);
        eff.write_record([
            r.condition.as_str(),
            b,
            &r.replications.to_string(),
            &r.converged.to_string(),
            &format!("{:.2}", r.convergence_pct),
            &format!("{:.3}", r.mean_iterations),
        ])?;
        write_raw(r, &raw.join(format!("estimates_{}_{}.csv", r.condition, b)))?;
    }
    bias.flush()?;
    sd.flush()?;
    class.flush()?;
    eff.flush()?;
    fs::write(tables.join("tables.txt"), text)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(reports)?)?;
    Ok(())
}

fn short(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.3}"),
        _ => "NA".into(),
    }
}

/// One row per replication: bookkeeping columns, then every estimate.
fn write_raw(r: &McReport, path: &Path) -> Result<()> {
    let mut names: Vec<String> = r.parameters.iter().map(|p| p.name.clone()).collect();
    names.sort();
    names.dedup();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["replication".to_string(), "seed".into(), "converged".into(), "iterations".into(), "log_lik".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for o in &r.outcomes {
        let mut row = vec![
            o.replication.to_string(),
            o.seed.to_string(),
            o.converged.to_string(),
            o.iterations.to_string(),
            format!("{:e}", o.log_lik),
        ];
        for n in &names {
            row.push(o.estimates.get(n).map(|v| format!("{v:e}")).unwrap_or_else(|| "NA".into()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// True for names of factor loadings and measurement-error variances.
pub fn is_measurement_param(name: &str) -> bool {
    name.starts_with(MatrixName::Lambda.as_str()) || name.starts_with("Xi_")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_examples() {
        assert_eq!(relative_bias(Estimates::Invariant(&[0.7, 0.7]), 0.7).unwrap(), 0.0);
        assert!(relative_bias(Estimates::Invariant(&[0.4, 0.6]), 0.5).unwrap().abs() < 1e-12);
        let b = relative_bias(Estimates::TimeAveraged(&[vec![0.23; 10]]), 0.2).unwrap();
        assert!((b - 15.0).abs() < 1e-9);
        assert!(matches!(relative_bias(Estimates::Invariant(&[1.0]), 0.0), Err(Error::ZeroTruth)));
    }

    #[test]
    fn sd_examples() {
        assert_eq!(sd_estimates(&[3.0, 3.0, 3.0]).unwrap(), 0.0);
        assert!((sd_estimates(&[0.0, 2.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(sd_estimates(&[1.0]), Err(Error::TooFewReplications(1))));
    }

    #[test]
    fn empty_report_set_writes_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_tables(&[], dir.path()).unwrap();
        for f in ["bias.csv", "sd.csv", "classification.csv", "efficiency.csv"] {
            let s = fs::read_to_string(dir.path().join("tables").join(f)).unwrap();
            assert_eq!(s.lines().count(), 1, "{f}");
        }
        assert!(dir.path().join("tables/tables.txt").exists());
        assert_eq!(fs::read_to_string(dir.path().join("report.json")).unwrap().trim(), "[]");
    }
}
