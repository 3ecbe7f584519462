//! Prediction-error likelihood tuning of the time-invariant parameters π,
//! followed by a frozen filter + smoother pass and zero-variance
//! classification of each drifting coefficient.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{rts_smooth_model, run_filter, Backend, FilterInit, FilterRun, SmoothedState};
use crate::model::{MatrixName, ModelSpec, ParamSlot, ParamVector, StateSpaceModel, TvpSlot};
use crate::optim::{minimize, Bounds, OptimOptions, Optimizer};
use crate::simgen::{PathKind, TvpPath};

/// Objective value returned for infeasible parameters or failed passes.
pub const PENALTY: f64 = 1e12;
/// Offset inside the log transform of variance parameters.
pub const VARIANCE_OFFSET: f64 = 1e-12;
/// Default sample-variance threshold below which a smoothed path is constant.
pub const CLASSIFY_THRESHOLD: f64 = 1e-10;

fn d_ftol() -> f64 {
    1e-8
}
fn d_xtol() -> f64 {
    1e-6
}
fn d_max_iter() -> usize {
    500
}
fn d_coef() -> f64 {
    0.999
}
fn d_free() -> f64 {
    100.0
}
fn d_max_var() -> f64 {
    1e4
}
fn d_penalty() -> f64 {
    PENALTY
}
fn d_tvp_start() -> f64 {
    1e-3
}
fn d_fraction() -> f64 {
    0.02
}
fn d_floor() -> f64 {
    1e-6
}
fn d_threshold() -> f64 {
    CLASSIFY_THRESHOLD
}
fn d_ti_iter() -> usize {
    2000
}

/// Optimizer settings. Every field has a default, so `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    /// Relative tolerance on the objective spread.
    #[serde(default = "d_ftol")]
    pub ftol: f64,
    /// Tolerance on the simplex diameter in the transformed coordinates.
    #[serde(default = "d_xtol")]
    pub xtol: f64,
    #[serde(default = "d_max_iter")]
    pub max_iter: usize,
    /// Iteration cap for the time-invariant fit that supplies starting values.
    #[serde(default = "d_ti_iter")]
    pub ti_max_iter: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub backend: Backend,
    /// Free Φ entries live in `[-coefficient_bound, coefficient_bound]`.
    #[serde(default = "d_coef")]
    pub coefficient_bound: f64,
    /// Box for free Λ and Γ entries.
    #[serde(default = "d_free")]
    pub free_bound: f64,
    /// Upper bound of every variance parameter.
    #[serde(default = "d_max_var")]
    pub max_variance: f64,
    #[serde(default = "d_penalty")]
    pub penalty: f64,
    /// Starting value of each free Ψ̃ entry of a drifting coefficient.
    #[serde(default = "d_tvp_start")]
    pub tvp_noise_start: f64,
    /// Initial variance of each drifting coefficient as a fraction of its magnitude.
    #[serde(default = "d_fraction")]
    pub init_fraction: f64,
    #[serde(default = "d_floor")]
    pub init_floor: f64,
    #[serde(default = "d_threshold")]
    pub classify_threshold: f64,
    /// Per-parameter `[lo, hi]` overrides keyed by parameter name, in natural
    /// (untransformed) units.
    #[serde(default)]
    pub bounds: BTreeMap<String, (f64, f64)>,
}

impl Default for TuneConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(format!("tune config: {m}")));
        if !(self.ftol > 0.0 && self.xtol > 0.0) {
            return bad("tolerances must be > 0");
        }
        if !(self.coefficient_bound > 0.0 && self.coefficient_bound.is_finite()) {
            return bad("coefficient_bound must be positive and finite");
        }
        if !(self.free_bound > 0.0 && self.free_bound.is_finite()) {
            return bad("free_bound must be positive and finite");
        }
        if !(self.max_variance > VARIANCE_OFFSET && self.max_variance.is_finite()) {
            return bad("max_variance must be finite and > 1e-12");
        }
        if !(self.tvp_noise_start >= 0.0 && self.init_floor >= 0.0 && self.init_fraction >= 0.0) {
            return bad("starting variances must be >= 0");
        }
        for (name, (lo, hi)) in &self.bounds {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(&format!("bounds for {name} must be finite with lo <= hi"));
            }
        }
        Ok(())
    }

    fn options(&self, max_iter: usize) -> OptimOptions {
        OptimOptions {
            ftol: self.ftol,
            xtol: self.xtol,
            max_iter,
        }
    }
}

/// Maps π to the optimizer's coordinates: variances on `ln(v + 1e-12)`,
/// everything else untouched.
#[derive(Debug, Clone)]
pub struct Transform {
    is_variance: Vec<bool>,
    pub bounds: Bounds,
}

impl Transform {
    pub fn new(spec: &ModelSpec, config: &TuneConfig) -> Self {
        let layout = spec.param_layout();
        let mut lower = Vec::with_capacity(layout.len());
        let mut upper = Vec::with_capacity(layout.len());
        let mut is_variance = Vec::with_capacity(layout.len());
        for slot in &layout {
            let name = spec.param_name(slot);
            let var = slot.is_variance();
            let (lo, hi) = match config.bounds.get(&name) {
                Some(&(lo, hi)) if var => (lo.max(0.0), hi.max(lo.max(0.0))),
                Some(&b) => b,
                None if var => (0.0, config.max_variance),
                None if slot.matrix == MatrixName::Phi => {
                    (-config.coefficient_bound, config.coefficient_bound)
                }
                None => (-config.free_bound, config.free_bound),
            };
            if var {
                lower.push(to_log(lo));
                upper.push(to_log(hi));
            } else {
                lower.push(lo);
                upper.push(hi);
            }
            is_variance.push(var);
        }
        Self {
            is_variance,
            bounds: Bounds::new(lower, upper),
        }
    }

    pub fn forward(&self, values: &[f64]) -> Vec<f64> {
        let mut u: Vec<f64> = values
            .iter()
            .zip(&self.is_variance)
            .map(|(v, var)| if *var { to_log(*v) } else { *v })
            .collect();
        self.bounds.project(&mut u);
        u
    }

    pub fn inverse(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, x)| {
                if !self.is_variance[i] {
                    x.clamp(self.bounds.lower[i], self.bounds.upper[i])
                } else if *x <= to_log(0.0) {
                    0.0
                } else {
                    (x.exp() - VARIANCE_OFFSET).max(0.0)
                }
            })
            .collect()
    }
}

fn to_log(v: f64) -> f64 {
    (v.max(0.0) + VARIANCE_OFFSET).ln()
}

/// `−log L(π)` from one forward pass. Failed or divergent passes, negative
/// variances and free Φ entries outside `[−1, 1]` all map to [`PENALTY`].
pub fn negative_log_likelihood(
    pi: &ParamVector,
    data: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    spec: &ModelSpec,
    init: &FilterInit,
    backend: Backend,
) -> f64 {
    match try_log_likelihood(pi, data, inputs, spec, init, backend) {
        Ok(ll) if ll.is_finite() => -ll,
        Ok(_) => PENALTY,
        Err(e) => {
            log::debug!("likelihood penalty: {e}");
            PENALTY
        }
    }
}

fn try_log_likelihood(
    pi: &ParamVector,
    data: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    spec: &ModelSpec,
    init: &FilterInit,
    backend: Backend,
) -> Result<f64> {
    for (slot, v) in pi.layout.iter().zip(&pi.values) {
        if !v.is_finite() {
            return Err(Error::InvalidSpec(format!("{} is not finite", spec.param_name(slot))));
        }
        if slot.is_variance() && *v < 0.0 {
            return Err(Error::InvalidSpec(format!("{} is negative", spec.param_name(slot))));
        }
        if slot.matrix == MatrixName::Phi && v.abs() > 1.0 {
            return Err(Error::InvalidSpec(format!("{} is explosive", spec.param_name(slot))));
        }
    }
    let model = StateSpaceModel::new(spec, pi)?;
    Ok(run_filter(&model, data, inputs, init, backend)?.log_likelihood)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub pi_hat: ParamVector,
    pub log_lik: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Ψ̃ entries of the drifting coefficients, keyed `Psi_<cell>`.
    pub tvp_noise_estimates: BTreeMap<String, f64>,
    /// Best objective value after each iteration.
    pub history: Vec<f64>,
}

/// Maximizes the likelihood over π starting from `start`.
pub fn tune(
    data: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    spec: &ModelSpec,
    start: &ParamVector,
    init: &FilterInit,
    config: &TuneConfig,
) -> Result<TuneResult> {
    tune_with(data, inputs, spec, start, init, config, config.max_iter)
}

fn tune_with(
    data: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    spec: &ModelSpec,
    start: &ParamVector,
    init: &FilterInit,
    config: &TuneConfig,
    max_iter: usize,
) -> Result<TuneResult> {
    config.validate()?;
    let layout = spec.param_layout();
    if start.layout != layout || start.values.len() != layout.len() {
        return Err(Error::LayoutMismatch);
    }
    let transform = Transform::new(spec, config);
    let backend = config.backend;
    let objective = |u: &[f64]| {
        let pi = ParamVector {
            values: transform.inverse(u),
            layout: layout.clone(),
        };
        negative_log_likelihood(&pi, data, inputs, spec, init, backend).min(config.penalty)
    };
    let u0 = transform.forward(&start.values);
    let res = minimize(
        config.optimizer,
        objective,
        &u0,
        &transform.bounds,
        &config.options(max_iter),
    );
    let pi_hat = ParamVector {
        values: transform.inverse(&res.x),
        layout,
    };
    if !res.converged {
        log::info!("optimizer stopped after {} iterations without converging", res.iterations);
    }
    Ok(TuneResult {
        tvp_noise_estimates: tvp_noise_estimates(spec, &pi_hat),
        log_lik: -res.f,
        iterations: res.iterations,
        evaluations: res.evaluations,
        converged: res.converged,
        history: res.history,
        pi_hat,
    })
}

fn tvp_noise_estimates(spec: &ModelSpec, pi: &ParamVector) -> BTreeMap<String, f64> {
    pi.layout
        .iter()
        .zip(&pi.values)
        .filter(|(s, _)| s.matrix == MatrixName::Psi && s.row >= spec.m())
        .map(|(s, v)| (spec.param_name(s), *v))
        .collect()
}

fn column_variance(data: &DMatrix<f64>, j: usize) -> f64 {
    let n = data.nrows() as f64;
    let col = data.column(j);
    let mean = col.sum() / n;
    col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)
}

/// Data-driven starting values for a spec without drifting cells: Φ diagonal
/// 0.5, cross terms and Γ zero, loadings scaled to half of each indicator's
/// variance, the other half assigned to measurement error.
pub fn heuristic_start(spec: &ModelSpec, data: &DMatrix<f64>) -> ParamVector {
    let layout = spec.param_layout();
    let latent_var = 1.0 / (1.0 - 0.25);
    let values = layout
        .iter()
        .map(|s| match s.matrix {
            MatrixName::Lambda => (0.5 * column_variance(data, s.row) / latent_var).max(1e-2).sqrt(),
            MatrixName::Phi if s.row == s.col => 0.5,
            MatrixName::Phi | MatrixName::Gamma => 0.0,
            MatrixName::Xi => (0.5 * column_variance(data, s.row)).max(1e-3),
            MatrixName::Psi => 1.0,
        })
        .collect();
    ParamVector { values, layout }
}

/// Tunes the fully time-invariant version of `spec` (every drifting cell
/// demoted to a free constant).
pub fn fit_time_invariant(
    data: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    spec: &ModelSpec,
    config: &TuneConfig,
) -> Result<(ModelSpec, TuneResult)> {
    let ti = spec.demote_tvp();
    let start = heuristic_start(&ti, data);
    let init = FilterInit::from_coefficients(ti.m(), &[], config.init_fraction, config.init_floor);
    let res = tune_with(data, inputs, &ti, &start, &init, config, config.ti_max_iter)?;
    Ok((ti, res))
}

/// Starting π and filter initialization for `spec` from a time-invariant fit:
/// shared entries are copied, drifting coefficients start at their constant
/// estimates with Ψ̃ at `tvp_noise_start`, and the initial covariance follows
/// the fraction-of-magnitude rule.
pub fn tvp_start(
    spec: &ModelSpec,
    ti_spec: &ModelSpec,
    ti_pi: &ParamVector,
    config: &TuneConfig,
) -> Result<(ParamVector, FilterInit)> {
    let ti_values: BTreeMap<String, f64> = ti_spec
        .param_names()
        .into_iter()
        .zip(ti_pi.values.iter().copied())
        .collect();
    let layout = spec.param_layout();
    let mut values = Vec::with_capacity(layout.len());
    for slot in &layout {
        let name = spec.param_name(slot);
        let v = if slot.matrix == MatrixName::Psi && slot.row >= spec.m() {
            config.tvp_noise_start
        } else {
            *ti_values.get(&name).ok_or(Error::LayoutMismatch)?
        };
        values.push(v);
    }
    let omega0 = spec
        .tvp_slots()
        .iter()
        .map(|s| ti_values.get(&s.name()).copied().ok_or(Error::LayoutMismatch))
        .collect::<Result<Vec<f64>>>()?;
    let init = FilterInit::from_coefficients(spec.m(), &omega0, config.init_fraction, config.init_floor);
    Ok((ParamVector { values, layout }, init))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    TimeVarying,
    TimeInvariant,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::TimeVarying => "time-varying",
            Classification::TimeInvariant => "time-invariant",
        }
    }
}

/// Time-invariant iff the sample variance of the path is below `threshold`.
pub fn classify_tvp(path: &[f64], threshold: f64) -> Result<Classification> {
    if path.len() < 2 {
        return Err(Error::PathTooShort(path.len()));
    }
    Ok(if sample_variance(path) < threshold {
        Classification::TimeInvariant
    } else {
        Classification::TimeVarying
    })
}

pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Filtered and smoothed trajectories of each ω component.
pub fn extract_paths(
    spec: &ModelSpec,
    run: &FilterRun,
    smoothed: &[SmoothedState],
) -> (Vec<TvpPath>, Vec<TvpPath>) {
    let slots = spec.tvp_slots();
    let build = |kind, get: &dyn Fn(usize, usize) -> f64, len: usize| {
        slots
            .iter()
            .enumerate()
            .map(|(j, cell)| TvpPath {
                cell: *cell,
                kind,
                values: (0..len).map(|t| get(t, j)).collect(),
            })
            .collect::<Vec<_>>()
    };
    let filtered = build(
        PathKind::Filtered,
        &|t, j| run.steps[t].updated_state.omega()[j],
        run.steps.len(),
    );
    let smooth = build(PathKind::Smoothed, &|t, j| smoothed[t].state.omega()[j], smoothed.len());
    (filtered, smooth)
}

/// Everything produced by fitting one dataset.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub spec: ModelSpec,
    pub time_invariant: TuneResult,
    pub tuned: TuneResult,
    pub init: FilterInit,
    pub run: FilterRun,
    pub smoothed: Vec<SmoothedState>,
    pub filtered_paths: Vec<TvpPath>,
    pub smoothed_paths: Vec<TvpPath>,
    pub classification: Vec<(TvpSlot, Classification)>,
}

impl FitOutcome {
    pub fn smoothed_path(&self, slot: &TvpSlot) -> Option<&TvpPath> {
        self.smoothed_paths.iter().find(|p| p.cell == *slot)
    }

    /// Named point estimates: every π entry, plus the time average of each
    /// smoothed drifting coefficient under its cell name.
    pub fn estimates(&self) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = self
            .spec
            .param_names()
            .into_iter()
            .zip(self.tuned.pi_hat.values.iter().copied())
            .collect();
        for p in &self.smoothed_paths {
            let mean = p.values.iter().sum::<f64>() / p.values.len().max(1) as f64;
            out.insert(p.name(), mean);
        }
        out
    }
}

/// Full pipeline: time-invariant start, likelihood tuning, frozen filter and
/// smoother pass, classification.
pub fn fit(
    data: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    spec: &ModelSpec,
    config: &TuneConfig,
) -> Result<FitOutcome> {
    config.validate()?;
    let (ti_spec, ti) = fit_time_invariant(data, inputs, spec, config)?;
    let (tuned, init) = if spec.tvp_slots().is_empty() {
        let init = FilterInit::from_coefficients(spec.m(), &[], config.init_fraction, config.init_floor);
        (ti.clone(), init)
    } else {
        let (start, init) = tvp_start(spec, &ti_spec, &ti.pi_hat, config)?;
        (tune(data, inputs, spec, &start, &init, config)?, init)
    };
    fit_with(data, inputs, spec, config, ti, tuned, init)
}

/// Frozen pass for an already tuned π.
pub fn fit_with(
    data: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    spec: &ModelSpec,
    config: &TuneConfig,
    time_invariant: TuneResult,
    tuned: TuneResult,
    init: FilterInit,
) -> Result<FitOutcome> {
    let model = StateSpaceModel::new(spec, &tuned.pi_hat)?;
    let run = run_filter(&model, data, inputs, &init, config.backend)?;
    let smoothed = rts_smooth_model(&run, &model, inputs)?;
    let (filtered_paths, smoothed_paths) = extract_paths(spec, &run, &smoothed);
    let classification = smoothed_paths
        .iter()
        .map(|p| Ok((p.cell, classify_tvp(&p.values, config.classify_threshold)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FitOutcome {
        spec: spec.clone(),
        time_invariant,
        tuned,
        init,
        run,
        smoothed,
        filtered_paths,
        smoothed_paths,
        classification,
    })
}

/// Names of the π entries, in layout order.
pub fn slot_names(spec: &ModelSpec, layout: &[ParamSlot]) -> Vec<String> {
    layout.iter().map(|s| spec.param_name(s)).collect()
}
