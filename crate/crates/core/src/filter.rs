//! Second-order extended Kalman filter over the augmented state, in a
//! square-root form (triangular covariance factors propagated by QR) and in
//! the standard full-covariance form, plus the fixed-interval RTS smoother.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, cholesky_factor, qr_triangularize, SqrtFactor};
use crate::model::{AugmentedState, ModelSpec, ParamVector, StateSpaceModel};

/// A step whose innovation covariance has a log-determinant above this is
/// treated as divergent.
pub const MAX_LOG_DET: f64 = 1e3;
/// A residual component larger than this in magnitude is treated as divergent.
pub const MAX_RESIDUAL: f64 = 1e6;
/// Ridge added to a singular predicted covariance in the smoother.
pub const SMOOTHER_RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Backend {
    /// Square-root second-order EKF.
    #[default]
    #[serde(rename = "sr-sekf")]
    SquareRoot,
    /// Standard second-order EKF propagating the full covariance.
    #[serde(rename = "sekf")]
    Standard,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::SquareRoot => "sr-sekf",
            Backend::Standard => "sekf",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sr-sekf" | "sr" => Ok(Backend::SquareRoot),
            "sekf" | "standard" => Ok(Backend::Standard),
            other => Err(format!("unknown backend '{other}' (expected sr-sekf or sekf)")),
        }
    }
}

/// Initial state and covariance root for a pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterInit {
    pub state: AugmentedState,
    pub sqrt_cov: SqrtFactor,
}

impl FilterInit {
    /// Latent block at zero with identity covariance; each time-varying
    /// coefficient starts at `omega0` with variance `fraction * |omega0|`,
    /// floored at `floor`.
    pub fn from_coefficients(m: usize, omega0: &[f64], fraction: f64, floor: f64) -> Self {
        let n = m + omega0.len();
        let eta = vec![0.0; m];
        let mut l = DMatrix::<f64>::zeros(n, n);
        for i in 0..m {
            l[(i, i)] = 1.0;
        }
        for (j, w) in omega0.iter().enumerate() {
            let var = (fraction * w.abs()).max(floor);
            l[(m + j, m + j)] = var.sqrt();
        }
        FilterInit {
            state: AugmentedState::new(&eta, omega0),
            sqrt_cov: SqrtFactor::from_lower(l),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    /// η̂*_{t|t-1}
    pub predicted_state: AugmentedState,
    /// P̄_{t|t-1}
    pub predicted_sqrt_cov: SqrtFactor,
    /// η̂*_{t|t}
    pub updated_state: AugmentedState,
    /// P̄_{t|t}
    pub updated_sqrt_cov: SqrtFactor,
    /// ỹ_t = y_t − ŷ_t
    pub residual: DVector<f64>,
    /// S_t
    pub residual_cov: DMatrix<f64>,
    /// W_t
    pub gain: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct FilterRun {
    pub steps: Vec<FilterStep>,
    pub log_likelihood: f64,
    pub init_state: AugmentedState,
    pub init_sqrt_cov: SqrtFactor,
    pub backend: Backend,
}

impl FilterRun {
    /// Log-likelihood recomputed from the stored residuals and covariances.
    pub fn recompute_log_likelihood(&self) -> Result<f64> {
        self.steps
            .iter()
            .enumerate()
            .try_fold(0.0, |acc, (t, s)| {
                Ok(acc + log_likelihood_term(&s.residual, &s.residual_cov, t)?)
            })
    }
}

/// Gaussian prediction-error contribution of one step:
/// `-½ (k log 2π + log|S| + ỹᵀ S⁻¹ ỹ)`.
pub fn log_likelihood_term(residual: &DVector<f64>, s: &DMatrix<f64>, t: usize) -> Result<f64> {
    let k = residual.len() as f64;
    let l = cholesky_factor(s).map_err(|_| Error::IndefiniteResidualCov(t))?;
    let log_det = linalg::log_det_from_lower(&l.factor).ok_or(Error::IndefiniteResidualCov(t))?;
    let z = l
        .factor
        .solve_lower_triangular(residual)
        .ok_or(Error::IndefiniteResidualCov(t))?;
    let quad = z.norm_squared();
    let term = -0.5 * (k * (2.0 * PI).ln() + log_det + quad);
    if !term.is_finite() || log_det > MAX_LOG_DET || residual.amax() > MAX_RESIDUAL {
        return Err(Error::NonFiniteLikelihood(t));
    }
    Ok(term)
}

/// Indices of Hessians with at least one nonzero entry.
fn active(hessians: &[DMatrix<f64>]) -> Vec<usize> {
    hessians
        .iter()
        .enumerate()
        .filter(|(_, h)| h.iter().any(|v| *v != 0.0))
        .map(|(i, _)| i)
        .collect()
}

/// `Lᵀ H_i L` for the active Hessians.
fn projected(lower: &DMatrix<f64>, hessians: &[DMatrix<f64>], idx: &[usize]) -> Vec<DMatrix<f64>> {
    let lt = lower.transpose();
    idx.iter().map(|&i| &lt * &hessians[i] * lower).collect()
}

/// `½ Σᵢ eᵢ tr(Aᵢ)` over the active set.
fn trace_correction(n: usize, idx: &[usize], proj: &[DMatrix<f64>]) -> DVector<f64> {
    let mut c = DVector::zeros(n);
    for (a, &i) in proj.iter().zip(idx) {
        c[i] = 0.5 * a.trace();
    }
    c
}

/// `½ Σᵢⱼ eᵢeⱼᵀ tr(Aᵢ Aⱼ)` with symmetric `Aᵢ`.
fn double_trace(n: usize, idx: &[usize], proj: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate().skip(a) {
            let v = 0.5 * proj[a].component_mul(&proj[b].transpose()).sum();
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Second-order state prediction using the square-root factor directly:
/// `f(η̂) + ½ Σᵢ eᵢ tr(P̄ᵀ H_{f,i} P̄)`. Returns the prediction and the
/// correction vector.
pub fn predict_state(
    prev: &DVector<f64>,
    prev_sqrt: &SqrtFactor,
    x: &DVector<f64>,
    model: &StateSpaceModel,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let lower = prev_sqrt.lower();
    let idx = active(model.f_hessians());
    let proj = projected(&lower, model.f_hessians(), &idx);
    let corr = trace_correction(model.state_dim(), &idx, &proj);
    let pred = model.f(prev, x)? + &corr;
    Ok((pred, corr))
}

/// Square-root covariance prediction: the linearization-error covariance
/// `½ Σᵢⱼ eᵢeⱼᵀ tr(P̄ᵀH_iP̄ P̄ᵀH_jP̄) + Ψ̃` is Cholesky-factored and stacked
/// under `(J_f P̄)ᵀ`; the triangularized stack is the predicted root.
pub fn predict_sqrt_cov(
    prev_sqrt: &SqrtFactor,
    jacobian: &DMatrix<f64>,
    hessians: &[DMatrix<f64>],
    process_noise: &DVector<f64>,
) -> Result<SqrtFactor> {
    let n = jacobian.nrows();
    if jacobian.ncols() != n || prev_sqrt.dim() != n || process_noise.len() != n {
        return Err(Error::DimensionMismatch("covariance prediction inputs".into()));
    }
    let lower = prev_sqrt.lower();
    let idx = active(hessians);
    let proj = projected(&lower, hessians, &idx);
    let mut lin_err = double_trace(n, &idx, &proj);
    for i in 0..n {
        lin_err[(i, i)] += process_noise[i];
    }
    let eps = cholesky_factor(&lin_err).map_err(|_| Error::IndefiniteLinearizationMatrix(0))?;
    let mut stacked = DMatrix::<f64>::zeros(2 * n, n);
    stacked
        .view_mut((0, 0), (n, n))
        .copy_from(&(jacobian * &lower).transpose());
    stacked.view_mut((n, 0), (n, n)).copy_from(&eps.factor.transpose());
    Ok(SqrtFactor::from_upper(qr_triangularize(&stacked)?).to_lower())
}

/// Predicted measurement and the pieces of its covariance.
#[derive(Debug, Clone)]
pub struct MeasurementPrediction {
    /// ŷ_t with the second-order trace correction.
    pub y_hat: DVector<f64>,
    /// S_t = J_h P J_hᵀ + second-order term + Ξ̃.
    pub s: DMatrix<f64>,
    /// Second-order term + Ξ̃ (the part not carried by J_h P J_hᵀ).
    pub noise_term: DMatrix<f64>,
    /// J_h at the predicted state.
    pub jacobian: DMatrix<f64>,
}

pub fn predict_measurement(
    pred: &DVector<f64>,
    pred_sqrt: &SqrtFactor,
    model: &StateSpaceModel,
) -> Result<MeasurementPrediction> {
    let k = model.obs_dim();
    let lower = pred_sqrt.lower();
    let idx = active(model.h_hessians());
    let proj = projected(&lower, model.h_hessians(), &idx);
    let y_hat = model.h(pred)? + trace_correction(k, &idx, &proj);
    let mut noise_term = double_trace(k, &idx, &proj);
    for i in 0..k {
        noise_term[(i, i)] += model.measurement_noise()[i];
    }
    let jacobian = model.jacobian_h(pred)?;
    let jl = &jacobian * &lower;
    let s = &jl * jl.transpose() + &noise_term;
    Ok(MeasurementPrediction {
        y_hat,
        s,
        noise_term,
        jacobian,
    })
}

/// Square-root measurement update.
///
/// Triangularizes `[[N̄ᵀ, 0], [P̄ᵀJ_hᵀ, P̄ᵀ]]` where `N = Ξ̃ + second-order term`;
/// the gain is `W = Υᵀ Δ⁻ᵀ` and the updated root is the lower-right block.
pub fn update(
    pred: &AugmentedState,
    pred_sqrt: &SqrtFactor,
    y: &DVector<f64>,
    y_hat: &DVector<f64>,
    noise_term: &DMatrix<f64>,
    jacobian_h: &DMatrix<f64>,
) -> Result<FilterStep> {
    let k = y.len();
    let n = pred.len();
    if y_hat.len() != k || noise_term.shape() != (k, k) || jacobian_h.shape() != (k, n) {
        return Err(Error::DimensionMismatch("measurement update inputs".into()));
    }
    let noise_root = cholesky_factor(noise_term)?;
    let upper = pred_sqrt.upper();
    let block = linalg::block_qr_update(
        &noise_root.upper(),
        &DMatrix::zeros(k, n),
        &(&upper * jacobian_h.transpose()),
        &upper,
    )?;
    let gain = block.gain()?;
    let residual = y - y_hat;
    let updated = &pred.values + &gain * &residual;
    Ok(FilterStep {
        predicted_state: pred.clone(),
        predicted_sqrt_cov: pred_sqrt.clone(),
        updated_state: AugmentedState::from_vector(updated, pred.latent_dim()),
        updated_sqrt_cov: block.updated.clone(),
        residual_cov: block.residual_cov(),
        residual,
        gain,
    })
}

fn check_data(data: &DMatrix<f64>, inputs: &DMatrix<f64>, model: &StateSpaceModel) -> Result<()> {
    if data.ncols() != model.obs_dim() {
        return Err(Error::DimensionMismatch(format!(
            "data has {} columns, model has {} indicators",
            data.ncols(),
            model.obs_dim()
        )));
    }
    if inputs.nrows() != data.nrows() || inputs.ncols() != model.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "inputs are {}x{}, expected {}x{}",
            inputs.nrows(),
            inputs.ncols(),
            data.nrows(),
            model.input_dim()
        )));
    }
    if data.iter().chain(inputs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in data or inputs".into()));
    }
    Ok(())
}

fn check_init(init: &FilterInit, model: &StateSpaceModel) -> Result<()> {
    if init.state.len() != model.state_dim()
        || init.state.latent_dim() != model.latent_dim()
        || init.sqrt_cov.dim() != model.state_dim()
    {
        return Err(Error::DimensionMismatch("initial state does not match the model".into()));
    }
    Ok(())
}

fn row(m: &DMatrix<f64>, t: usize) -> DVector<f64> {
    m.row(t).transpose()
}

/// Runs the square-root second-order filter over `data` (T x k) with inputs (T x r).
pub fn filter_pass(
    data: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    pi: &ParamVector,
    spec: &ModelSpec,
    init: &FilterInit,
) -> Result<FilterRun> {
    let model = StateSpaceModel::new(spec, pi)?;
    run_filter(&model, data, inputs, init, Backend::SquareRoot)
}

/// Runs the standard (full-covariance) second-order filter.
pub fn sekf_filter_pass(
    data: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    pi: &ParamVector,
    spec: &ModelSpec,
    init: &FilterInit,
) -> Result<FilterRun> {
    let model = StateSpaceModel::new(spec, pi)?;
    run_filter(&model, data, inputs, init, Backend::Standard)
}

pub fn run_filter(
    model: &StateSpaceModel,
    data: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    init: &FilterInit,
    backend: Backend,
) -> Result<FilterRun> {
    check_data(data, inputs, model)?;
    check_init(init, model)?;
    let steps = match backend {
        Backend::SquareRoot => sr_steps(model, data, inputs, init)?,
        Backend::Standard => standard_steps(model, data, inputs, init)?,
    };
    let mut ll = 0.0;
    for (t, s) in steps.iter().enumerate() {
        ll += log_likelihood_term(&s.residual, &s.residual_cov, t)?;
    }
    Ok(FilterRun {
        steps,
        log_likelihood: ll,
        init_state: init.state.clone(),
        init_sqrt_cov: init.sqrt_cov.clone(),
        backend,
    })
}

fn check_residual(residual: &DVector<f64>, t: usize) -> Result<()> {
    if residual.iter().any(|v| !v.is_finite()) || residual.amax() > MAX_RESIDUAL {
        return Err(Error::NonFiniteLikelihood(t));
    }
    Ok(())
}

fn sr_steps(
    model: &StateSpaceModel,
    data: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    init: &FilterInit,
) -> Result<Vec<FilterStep>> {
    let m = model.latent_dim();
    let mut state = init.state.values.clone();
    let mut sqrt = init.sqrt_cov.clone().to_lower();
    let mut steps = Vec::with_capacity(data.nrows());
    for t in 0..data.nrows() {
        let x = row(inputs, t);
        let jf = model.jacobian_f(&state, &x)?;
        let (pred, _) = predict_state(&state, &sqrt, &x, model)?;
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState(t));
        }
        let pred_sqrt = predict_sqrt_cov(&sqrt, &jf, model.f_hessians(), model.process_noise())
            .map_err(|e| match e {
                Error::IndefiniteLinearizationMatrix(_) => Error::IndefiniteLinearizationMatrix(t),
                other => other,
            })?;
        let meas = predict_measurement(&pred, &pred_sqrt, model)?;
        let y = row(data, t);
        let pred_state = AugmentedState::from_vector(pred, m);
        let step = update(&pred_state, &pred_sqrt, &y, &meas.y_hat, &meas.noise_term, &meas.jacobian)
            .map_err(|e| match e {
                Error::SingularDelta(_) | Error::IndefiniteMatrix { .. } => {
                    Error::IndefiniteResidualCov(t)
                }
                other => other,
            })?;
        check_residual(&step.residual, t)?;
        if !step.updated_sqrt_cov.is_finite() || step.updated_state.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState(t));
        }
        state = step.updated_state.values.clone();
        sqrt = step.updated_sqrt_cov.clone();
        steps.push(step);
    }
    Ok(steps)
}

/// `½ Σᵢⱼ eᵢeⱼᵀ tr(H_i P H_j P)` and `½ Σᵢ eᵢ tr(H_i P)` on a full covariance.
fn full_second_order(
    n: usize,
    p: &DMatrix<f64>,
    hessians: &[DMatrix<f64>],
) -> (DVector<f64>, DMatrix<f64>) {
    let idx = active(hessians);
    let hp: Vec<DMatrix<f64>> = idx.iter().map(|&i| &hessians[i] * p).collect();
    let mut corr = DVector::zeros(n);
    let mut cov = DMatrix::zeros(n, n);
    for (a, &i) in idx.iter().enumerate() {
        corr[i] = 0.5 * hp[a].trace();
        for (b, &j) in idx.iter().enumerate() {
            cov[(i, j)] = 0.5 * (&hp[a] * &hp[b]).trace();
        }
    }
    (corr, cov)
}

fn psd_root(p: &DMatrix<f64>, t: usize) -> Result<SqrtFactor> {
    cholesky_factor(p).map_err(|_| Error::CovarianceNotPsd(t))
}

fn standard_steps(
    model: &StateSpaceModel,
    data: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    init: &FilterInit,
) -> Result<Vec<FilterStep>> {
    let n = model.state_dim();
    let k = model.obs_dim();
    let m = model.latent_dim();
    let mut state = init.state.values.clone();
    let mut p = init.sqrt_cov.reconstruct();
    let mut steps = Vec::with_capacity(data.nrows());
    for t in 0..data.nrows() {
        let x = row(inputs, t);
        let jf = model.jacobian_f(&state, &x)?;
        let (corr, second) = full_second_order(n, &p, model.f_hessians());
        let pred = model.f(&state, &x)? + corr;
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState(t));
        }
        let mut p_pred = &jf * &p * jf.transpose() + second;
        for i in 0..n {
            p_pred[(i, i)] += model.process_noise()[i];
        }

        let (hcorr, hsecond) = full_second_order(k, &p_pred, model.h_hessians());
        let y_hat = model.h(&pred)? + hcorr;
        let jh = model.jacobian_h(&pred)?;
        let pjt = &p_pred * jh.transpose();
        let mut s = &jh * &pjt + hsecond;
        for i in 0..k {
            s[(i, i)] += model.measurement_noise()[i];
        }
        let s_root = cholesky_factor(&s).map_err(|_| Error::IndefiniteResidualCov(t))?;
        // W = P Jᵀ S⁻¹, solved through the Cholesky root of S.
        let gain_t = s_root
            .factor
            .solve_lower_triangular(&pjt.transpose())
            .and_then(|z| s_root.factor.transpose().solve_upper_triangular(&z))
            .ok_or(Error::IndefiniteResidualCov(t))?;
        let gain = gain_t.transpose();
        let y = row(data, t);
        let residual = &y - &y_hat;
        check_residual(&residual, t)?;
        let updated = &pred + &gain * &residual;
        let p_upd = &p_pred - &gain * &s * gain.transpose();
        if updated.iter().any(|v| !v.is_finite()) || p_upd.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState(t));
        }
        steps.push(FilterStep {
            predicted_state: AugmentedState::from_vector(pred, m),
            predicted_sqrt_cov: psd_root(&p_pred, t)?,
            updated_state: AugmentedState::from_vector(updated.clone(), m),
            updated_sqrt_cov: psd_root(&p_upd, t)?,
            residual,
            residual_cov: s,
            gain,
        });
        state = updated;
        p = p_upd;
    }
    Ok(steps)
}

/// Smoothed state and covariance at one time point.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedState {
    pub state: AugmentedState,
    pub cov: DMatrix<f64>,
}

/// Inverse-free smoother gain `C = P_{t|t} J_fᵀ P_{t+1|t}⁻¹`.
fn smoother_gain(p_t: &DMatrix<f64>, jf: &DMatrix<f64>, pred_sqrt: &SqrtFactor, t: usize) -> Result<DMatrix<f64>> {
    let rhs = jf * p_t; // = (P_t Jᵀ)ᵀ
    let l = pred_sqrt.lower();
    let max_d = (0..l.nrows()).map(|i| l[(i, i)].abs()).fold(0.0, f64::max);
    let singular = (0..l.nrows()).any(|i| l[(i, i)].abs() <= 1e-12 * max_d.max(1e-300));
    let solve = |l: &DMatrix<f64>| {
        l.solve_lower_triangular(&rhs)
            .and_then(|z| l.transpose().solve_upper_triangular(&z))
    };
    let ct = if singular {
        log::warn!("singular predicted covariance at t={}; adding ridge {SMOOTHER_RIDGE}", t + 1);
        let mut p = pred_sqrt.reconstruct();
        for i in 0..p.nrows() {
            p[(i, i)] += SMOOTHER_RIDGE;
        }
        let root = cholesky_factor(&p)?;
        solve(&root.factor)
    } else {
        solve(&l)
    };
    ct.map(|c| c.transpose()).ok_or(Error::CovarianceNotPsd(t))
}

/// Fixed-interval RTS smoother run backward from the last filtered step.
pub fn rts_smooth(
    run: &FilterRun,
    pi: &ParamVector,
    spec: &ModelSpec,
    inputs: &DMatrix<f64>,
) -> Result<Vec<SmoothedState>> {
    let model = StateSpaceModel::new(spec, pi)?;
    rts_smooth_model(run, &model, inputs)
}

pub fn rts_smooth_model(
    run: &FilterRun,
    model: &StateSpaceModel,
    inputs: &DMatrix<f64>,
) -> Result<Vec<SmoothedState>> {
    let n_steps = run.steps.len();
    if n_steps == 0 {
        return Ok(Vec::new());
    }
    if inputs.nrows() < n_steps || inputs.ncols() != model.input_dim() {
        return Err(Error::DimensionMismatch("smoother inputs".into()));
    }
    let m = model.latent_dim();
    let last = &run.steps[n_steps - 1];
    let mut out = vec![
        SmoothedState {
            state: last.updated_state.clone(),
            cov: last.updated_sqrt_cov.reconstruct(),
        };
        n_steps
    ];
    for t in (0..n_steps - 1).rev() {
        let cur = &run.steps[t];
        let next = &run.steps[t + 1];
        let x_next = row(inputs, t + 1);
        let jf = model.jacobian_f(&cur.updated_state.values, &x_next)?;
        let p_t = cur.updated_sqrt_cov.reconstruct();
        let c = smoother_gain(&p_t, &jf, &next.predicted_sqrt_cov, t)?;
        let state = &cur.updated_state.values
            + &c * (&out[t + 1].state.values - &next.predicted_state.values);
        let cov = &p_t + &c * (&out[t + 1].cov - next.predicted_sqrt_cov.reconstruct()) * c.transpose();
        out[t] = SmoothedState {
            state: AugmentedState::from_vector(state, m),
            cov: linalg::symmetrize(&cov),
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Cell, ModelMatrices, NoiseCell, Pattern};
    use nalgebra::dmatrix;

    fn scalar_model(loading: Cell) -> (ModelSpec, StateSpaceModel) {
        let spec = ModelSpec::new(
            1,
            1,
            0,
            Pattern::new(1, 1, vec![loading]).unwrap(),
            Pattern::new(1, 1, vec![Cell::Free]).unwrap(),
            Pattern::filled(1, 0, Cell::Free),
            vec![NoiseCell::Free],
            None,
            None,
        )
        .unwrap();
        let n = spec.state_dim();
        let model = StateSpaceModel::from_matrices(
            &spec,
            ModelMatrices {
                lambda: dmatrix![1.0],
                phi: dmatrix![0.5],
                gamma: DMatrix::zeros(1, 0),
                xi: DVector::from_element(1, 1.0),
                psi: DVector::from_element(n, 1.0),
            },
        )
        .unwrap();
        (spec, model)
    }

    #[test]
    fn zero_residual_leaves_state() {
        let (_, model) = scalar_model(Cell::Fixed(1.0));
        let pred = AugmentedState::new(&[0.3], &[]);
        let sqrt = SqrtFactor::from_lower(dmatrix![1.0]);
        let meas = predict_measurement(&pred.values, &sqrt, &model).unwrap();
        let step = update(&pred, &sqrt, &meas.y_hat, &meas.y_hat, &meas.noise_term, &meas.jacobian).unwrap();
        assert_eq!(step.updated_state, pred);
    }

    #[test]
    fn scalar_update_algebra() {
        let (_, model) = scalar_model(Cell::Fixed(1.0));
        let pred = AugmentedState::new(&[0.0], &[]);
        let sqrt = SqrtFactor::from_lower(dmatrix![1.0]);
        let meas = predict_measurement(&pred.values, &sqrt, &model).unwrap();
        let y = DVector::from_element(1, 2.0);
        let step = update(&pred, &sqrt, &y, &meas.y_hat, &meas.noise_term, &meas.jacobian).unwrap();
        assert!((step.updated_state.values[0] - 1.0).abs() < 1e-14);
        assert!((step.updated_sqrt_cov.reconstruct()[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((step.residual_cov[(0, 0)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn zero_uncertainty_prediction() {
        let (_, model) = scalar_model(Cell::Fixed(1.0));
        let sqrt = SqrtFactor::zeros(1);
        let meas = predict_measurement(&DVector::from_element(1, 2.0), &sqrt, &model).unwrap();
        assert_eq!(meas.s, dmatrix![1.0]);
        let (pred, corr) =
            predict_state(&DVector::from_element(1, 2.0), &sqrt, &DVector::zeros(0), &model).unwrap();
        assert_eq!(pred[0], 1.0);
        assert_eq!(corr[0], 0.0);
    }

    #[test]
    fn identity_propagation_keeps_root() {
        let l = SqrtFactor::from_lower(dmatrix![2.0, 0.0; 0.5, 1.0]);
        let out = predict_sqrt_cov(
            &l,
            &DMatrix::identity(2, 2),
            &[DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)],
            &DVector::zeros(2),
        )
        .unwrap();
        assert!((out.factor - l.factor).amax() < 1e-14);
    }

    #[test]
    fn tvp_loading_second_order_terms() {
        let (_, model) = scalar_model(Cell::Tvp);
        // state (η, λ) with cov [[1, .3], [.3, .5]]
        let sqrt = cholesky_factor(&dmatrix![1.0, 0.3; 0.3, 0.5]).unwrap();
        let pred = DVector::from_vec(vec![2.0, 0.8]);
        let meas = predict_measurement(&pred, &sqrt, &model).unwrap();
        // E[λη] = 1.6 + cov = 1.9
        assert!((meas.y_hat[0] - 1.9).abs() < 1e-14);
        // Var(λη) second-order: J P Jᵀ with J = (λ, η) plus ½ tr(HPHP) = P_ηη P_λλ + P_ηλ²
        let j = dmatrix![0.8, 2.0];
        let p = dmatrix![1.0, 0.3; 0.3, 0.5];
        let lin = (&j * &p * j.transpose())[(0, 0)];
        let expect = lin + 1.0 * 0.5 + 0.09 + 1.0;
        assert!((meas.s[(0, 0)] - expect).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_reported() {
        let (spec, _) = scalar_model(Cell::Fixed(1.0));
        let pi = ParamVector {
            values: vec![0.5, 1.0],
            layout: spec.param_layout(),
        };
        let mut data = DMatrix::from_fn(20, 1, |t, _| (t as f64).sin());
        data[(10, 0)] = 1e7;
        let init = FilterInit::from_coefficients(1, &[], 0.02, 1e-6);
        let err = filter_pass(&data, &DMatrix::zeros(20, 0), &pi, &spec, &init).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLikelihood(10)), "{err:?}");
    }

    #[test]
    fn single_step_run() {
        let (spec, _) = scalar_model(Cell::Fixed(1.0));
        let pi = ParamVector {
            values: vec![0.5, 1.0],
            layout: spec.param_layout(),
        };
        let init = FilterInit::from_coefficients(1, &[], 0.02, 1e-6);
        let run = filter_pass(&dmatrix![0.4], &DMatrix::zeros(1, 0), &pi, &spec, &init).unwrap();
        assert_eq!(run.steps.len(), 1);
        // prior η ~ N(0, 0.25 + 1), y ~ N(0, 2.25)
        let s = 2.25;
        let expect = -0.5 * ((2.0 * PI).ln() + f64::ln(s) + 0.16 / s);
        assert!((run.log_likelihood - expect).abs() < 1e-12);
        let sm = rts_smooth(&run, &pi, &spec, &DMatrix::zeros(1, 0)).unwrap();
        assert_eq!(sm[0].state, run.steps[0].updated_state);
    }

    #[test]
    fn backend_parsing() {
        assert_eq!("sr-sekf".parse::<Backend>().unwrap(), Backend::SquareRoot);
        assert_eq!("sekf".parse::<Backend>().unwrap(), Backend::Standard);
        assert!("ukf".parse::<Backend>().is_err());
    }

    #[test]
    fn bar_shalom_initial_covariance() {
        let init = FilterInit::from_coefficients(2, &[0.5, 0.0], 0.02, 1e-6);
        let p = init.sqrt_cov.reconstruct();
        assert_eq!(p[(0, 0)], 1.0);
        assert!((p[(2, 2)] - 0.01).abs() < 1e-16);
        assert!((p[(3, 3)] - 1e-6).abs() < 1e-18);
        assert_eq!(init.state.omega(), &[0.5, 0.0]);
    }
}
