//! Synthetic data for the two Monte Carlo designs.
//!
//! Simulation 1 lets the cross-lagged coefficients Φ12, Φ21 drift; simulation 2
//! lets the intervention effects Γ1, Γ2 drift. Drifting coefficients are
//! loess-smoothed Gaussian random walks rescaled onto a fixed range.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Cell, MatrixName, ModelSpec, NoiseCell, Pattern, TvpSlot};

pub const DEFAULT_SPAN: f64 = 0.5;
pub const DEFAULT_ONSET_FRACTION: f64 = 2.0 / 11.0;
pub const DEFAULT_BURN_IN: usize = 1000;

/// Locally weighted linear regression on the index grid `0..n`.
///
/// Each fit uses the `ceil(span * n)` nearest indices with tricube weights
/// scaled by the distance to the farthest of them.
pub fn loess_smooth(series: &[f64], span: f64) -> Result<Vec<f64>> {
    let n = series.len();
    if n < 4 {
        return Err(Error::SeriesTooShort(n));
    }
    if !(span > 0.0 && span <= 1.0) {
        return Err(Error::InvalidScenario(format!("loess span {span} not in (0, 1]")));
    }
    let q = ((span * n as f64).ceil() as usize).clamp(3, n);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(q / 2).min(n - q);
        let hi = lo + q; // exclusive
        let reach = (i - lo).max(hi - 1 - i) as f64;
        // widen slightly so the farthest neighbor keeps a tiny positive weight
        let h = reach * (1.0 + 1e-9);
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        let mut w = Vec::with_capacity(q);
        for (j, yj) in series.iter().enumerate().take(hi).skip(lo) {
            let u = (j as f64 - i as f64).abs() / h;
            let wj = (1.0 - u * u * u).max(0.0).powi(3);
            w.push(wj);
            sw += wj;
            sx += wj * j as f64;
            sy += wj * yj;
        }
        let (mx, my) = (sx / sw, sy / sw);
        let (mut sxx, mut sxy) = (0.0, 0.0);
        for (wj, j) in w.iter().zip(lo..hi) {
            let dx = j as f64 - mx;
            sxx += wj * dx * dx;
            sxy += wj * dx * (series[j] - my);
        }
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        out.push(my + slope * (i as f64 - mx));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    GroundTruth,
    Filtered,
    Smoothed,
}

/// Trajectory of one coefficient over the retained window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvpPath {
    pub cell: TvpSlot,
    pub kind: PathKind,
    pub values: Vec<f64>,
}

impl TvpPath {
    pub fn name(&self) -> String {
        self.cell.name()
    }
}

/// Random walk with unit Gaussian increments, loess-smoothed, then min-max
/// rescaled so its minimum is `lo` and maximum is `hi`.
pub fn gen_tvp_path<R: Rng + ?Sized>(
    t_len: usize,
    range: (f64, f64),
    span: f64,
    cell: TvpSlot,
    rng: &mut R,
) -> TvpPath {
    let (lo, hi) = range;
    assert!(lo < hi, "empty range");
    let mut walk = Vec::with_capacity(t_len);
    let mut acc = 0.0;
    for _ in 0..t_len {
        let z: f64 = rng.sample(StandardNormal);
        acc += z;
        walk.push(acc);
    }
    let smooth = if t_len >= 4 {
        loess_smooth(&walk, span).expect("length checked")
    } else {
        walk
    };
    let min = smooth.iter().copied().fold(f64::INFINITY, f64::min);
    let max = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = if max > min {
        smooth
            .iter()
            .map(|v| {
                if *v == max {
                    hi
                } else {
                    lo + (v - min) / (max - min) * (hi - lo)
                }
            })
            .collect()
    } else {
        vec![lo; smooth.len()]
    };
    TvpPath {
        cell,
        kind: PathKind::GroundTruth,
        values,
    }
}

/// 0 before onset, 1 from onset to the end. The number of pre-onset points is
/// `floor(onset_fraction * T)`, at least one.
pub fn intervention_indicator(t_len: usize, onset_fraction: f64) -> Vec<f64> {
    let pre = ((onset_fraction * t_len as f64 + 1e-9).floor() as usize).max(1).min(t_len);
    (0..t_len).map(|t| if t < pre { 0.0 } else { 1.0 }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Simulation {
    /// Cross-lagged effects Φ12, Φ21 drift.
    #[serde(rename = "1")]
    CrossLagged,
    /// Intervention effects Γ1, Γ2 drift.
    #[serde(rename = "2")]
    Intervention,
}

impl Simulation {
    pub fn number(self) -> u8 {
        match self {
            Simulation::CrossLagged => 1,
            Simulation::Intervention => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Simulation::CrossLagged),
            2 => Ok(Simulation::Intervention),
            _ => Err(Error::InvalidScenario(format!("simulation must be 1 or 2, got {n}"))),
        }
    }

    /// Cells that drift in the data-generating model.
    pub fn generated_tvp(self) -> [TvpSlot; 2] {
        let slot = |matrix, row, col| TvpSlot { matrix, row, col };
        match self {
            Simulation::CrossLagged => [slot(MatrixName::Phi, 0, 1), slot(MatrixName::Phi, 1, 0)],
            Simulation::Intervention => {
                [slot(MatrixName::Gamma, 0, 0), slot(MatrixName::Gamma, 1, 0)]
            }
        }
    }

    pub fn tvp_range(self) -> (f64, f64) {
        match self {
            Simulation::CrossLagged => (-0.3, 0.3),
            Simulation::Intervention => (-0.5, 0.5),
        }
    }
}

/// Which coefficients the fitted model lets drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubCondition {
    A,
    B,
    C,
}

impl std::str::FromStr for SubCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(SubCondition::A),
            "B" => Ok(SubCondition::B),
            "C" => Ok(SubCondition::C),
            other => Err(Error::InvalidScenario(format!("unknown sub-condition '{other}'"))),
        }
    }
}

impl fmt::Display for SubCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SubCondition::A => "A",
            SubCondition::B => "B",
            SubCondition::C => "C",
        };
        f.write_str(s)
    }
}

fn default_onset() -> f64 {
    DEFAULT_ONSET_FRACTION
}
fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}
fn default_reps() -> usize {
    100
}
fn default_latent_noise() -> f64 {
    1.0
}
fn default_measurement_noise() -> f64 {
    0.2
}
fn default_span() -> f64 {
    DEFAULT_SPAN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub simulation: Simulation,
    pub subcondition: SubCondition,
    #[serde(rename = "T")]
    pub t_len: usize,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_onset")]
    pub onset_fraction: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    /// Generating innovation variance of each latent factor.
    #[serde(default = "default_latent_noise")]
    pub latent_noise: f64,
    /// Generating measurement-error variance of each indicator.
    #[serde(default = "default_measurement_noise")]
    pub measurement_noise: f64,
    #[serde(default = "default_span")]
    pub span: f64,
}

impl ScenarioConfig {
    pub fn new(simulation: Simulation, subcondition: SubCondition, t_len: usize, seed: u64) -> Self {
        Self {
            simulation,
            subcondition,
            t_len,
            replications: default_reps(),
            seed,
            onset_fraction: DEFAULT_ONSET_FRACTION,
            burn_in: DEFAULT_BURN_IN,
            latent_noise: 1.0,
            measurement_noise: 0.2,
            span: DEFAULT_SPAN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_len < 2 {
            return Err(Error::InvalidScenario(format!("T must be >= 2, got {}", self.t_len)));
        }
        if !(self.onset_fraction > 0.0 && self.onset_fraction < 1.0) {
            return Err(Error::InvalidScenario(format!(
                "onset fraction {} not in (0, 1)",
                self.onset_fraction
            )));
        }
        if !(self.latent_noise >= 0.0 && self.measurement_noise >= 0.0) {
            return Err(Error::InvalidScenario("noise variances must be >= 0".into()));
        }
        if !(self.span > 0.0 && self.span <= 1.0) {
            return Err(Error::InvalidScenario(format!("span {} not in (0, 1]", self.span)));
        }
        Ok(())
    }

    /// Short id such as `1A_T200`.
    pub fn condition_id(&self) -> String {
        format!("{}{}_T{}", self.simulation.number(), self.subcondition, self.t_len)
    }

    /// Seed of replication `rep`.
    pub fn replication_seed(&self, rep: usize) -> u64 {
        self.seed.wrapping_add(rep as u64)
    }

    /// Cells estimated as time-varying in the fitted model.
    pub fn fitted_tvp(&self) -> Vec<TvpSlot> {
        let slot = |matrix, row, col| TvpSlot { matrix, row, col };
        let cross = [slot(MatrixName::Phi, 0, 1), slot(MatrixName::Phi, 1, 0)];
        let auto = [slot(MatrixName::Phi, 0, 0), slot(MatrixName::Phi, 1, 1)];
        let gamma = [slot(MatrixName::Gamma, 0, 0), slot(MatrixName::Gamma, 1, 0)];
        let mut out = Vec::new();
        match (self.simulation, self.subcondition) {
            (Simulation::CrossLagged, SubCondition::A) => out.extend(cross),
            (Simulation::CrossLagged, SubCondition::B) => out.extend(cross.into_iter().chain(auto)),
            (Simulation::Intervention, SubCondition::A) => out.extend(gamma),
            (Simulation::Intervention, SubCondition::B) => out.extend(gamma.into_iter().chain(cross)),
            (_, SubCondition::C) => out.extend(cross.into_iter().chain(auto).chain(gamma)),
        }
        out
    }

    /// The model fitted to each replication (two factors, three indicators each,
    /// one intervention input).
    pub fn fitted_spec(&self) -> ModelSpec {
        let mut loading = Pattern::filled(6, 2, Cell::Fixed(0.0));
        for i in 0..3 {
            loading.set(i, 0, Cell::Free);
            loading.set(i + 3, 1, Cell::Free);
        }
        let mut phi = Pattern::filled(2, 2, Cell::Free);
        let mut gamma = Pattern::filled(2, 1, Cell::Free);
        for s in self.fitted_tvp() {
            match s.matrix {
                MatrixName::Phi => phi.set(s.row, s.col, Cell::Tvp),
                MatrixName::Gamma => gamma.set(s.row, s.col, Cell::Tvp),
                _ => unreachable!(),
            }
        }
        ModelSpec::new(
            6,
            2,
            1,
            loading,
            phi,
            gamma,
            vec![NoiseCell::Free; 6],
            Some(vec![NoiseCell::Fixed(self.latent_noise); 2]),
            None,
        )
        .expect("simulation spec is valid")
    }
}

/// Constant data-generating matrices (drifting cells hold their nominal
/// constant, which the paths replace).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratingModel {
    pub lambda: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub xi: Vec<f64>,
    pub psi: Vec<f64>,
}

impl GeneratingModel {
    pub fn for_scenario(s: &ScenarioConfig) -> Self {
        let mut lambda = DMatrix::zeros(6, 2);
        for i in 0..3 {
            lambda[(i, 0)] = 1.0;
            lambda[(i + 3, 1)] = 1.0;
        }
        GeneratingModel {
            lambda,
            phi: DMatrix::from_row_slice(2, 2, &[0.7, -0.2, -0.3, 0.5]),
            gamma: DMatrix::from_column_slice(2, 1, &[0.5, 0.5]),
            xi: vec![s.measurement_noise; 6],
            psi: vec![s.latent_noise; 2],
        }
    }

    /// Named constant values of every generating coefficient that does not drift.
    pub fn invariant_values(&self, drifting: &[TvpSlot]) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        let is_tvp = |matrix, row, col| drifting.contains(&TvpSlot { matrix, row, col });
        for (name, mat) in [
            (MatrixName::Lambda, &self.lambda),
            (MatrixName::Phi, &self.phi),
            (MatrixName::Gamma, &self.gamma),
        ] {
            for j in 0..mat.ncols() {
                for i in 0..mat.nrows() {
                    let v = mat[(i, j)];
                    if !is_tvp(name, i, j) && (name != MatrixName::Lambda || v != 0.0) {
                        out.insert(format!("{}_{}_{}", name.as_str(), i + 1, j + 1), v);
                    }
                }
            }
        }
        for (i, v) in self.xi.iter().enumerate() {
            out.insert(format!("Xi_{}", i + 1), *v);
        }
        for (i, v) in self.psi.iter().enumerate() {
            out.insert(format!("Psi_eta_{}", i + 1), *v);
        }
        out
    }
}

/// Simulates `burn_in + T` steps of the latent VAR(1) and the indicators,
/// returning the retained `(observations, latent)` windows.
///
/// `phi_t` and `gamma_t` hold the coefficients for each retained step; the
/// burn-in uses their first entries with zero input.
#[allow(clippy::too_many_arguments)]
pub fn simulate<R: Rng + ?Sized>(
    lambda: &DMatrix<f64>,
    xi: &[f64],
    psi: &[f64],
    phi_t: &[DMatrix<f64>],
    gamma_t: &[DMatrix<f64>],
    inputs: &DMatrix<f64>,
    burn_in: usize,
    rng: &mut R,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (k, m) = lambda.shape();
    let t_len = inputs.nrows();
    if phi_t.len() != t_len || gamma_t.len() != t_len || xi.len() != k || psi.len() != m || t_len == 0 {
        return Err(Error::InvalidScenario("simulation inputs do not conform".into()));
    }
    let sd_psi: Vec<f64> = psi.iter().map(|v| v.sqrt()).collect();
    let sd_xi: Vec<f64> = xi.iter().map(|v| v.sqrt()).collect();
    let shock = |sd: &[f64], rng: &mut R| {
        DVector::from_iterator(sd.len(), sd.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)))
    };
    let mut eta = DVector::<f64>::zeros(m);
    for _ in 0..burn_in {
        eta = &phi_t[0] * &eta + shock(&sd_psi, rng);
    }
    let mut obs = DMatrix::zeros(t_len, k);
    let mut latent = DMatrix::zeros(t_len, m);
    for t in 0..t_len {
        let x = inputs.row(t).transpose();
        eta = &phi_t[t] * &eta + &gamma_t[t] * x + shock(&sd_psi, rng);
        let y = lambda * &eta + shock(&sd_xi, rng);
        obs.row_mut(t).copy_from(&y.transpose());
        latent.row_mut(t).copy_from(&eta.transpose());
    }
    Ok((obs, latent))
}

/// One synthetic replication.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenario: ScenarioConfig,
    /// T x 6 indicators.
    pub observations: DMatrix<f64>,
    /// T x 1 intervention indicator.
    pub inputs: DMatrix<f64>,
    /// T x 2 true latent factors.
    pub latent: DMatrix<f64>,
    pub truth_paths: Vec<TvpPath>,
    /// Generating values of every non-drifting parameter, by name.
    pub generating_values: BTreeMap<String, f64>,
}

impl Dataset {
    pub fn truth_path(&self, slot: &TvpSlot) -> Option<&TvpPath> {
        self.truth_paths.iter().find(|p| p.cell == *slot)
    }
}

/// Generates one replication; deterministic in `scenario.seed`.
pub fn gen_dataset(scenario: &ScenarioConfig) -> Result<Dataset> {
    scenario.validate()?;
    let t_len = scenario.t_len;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let gen = GeneratingModel::for_scenario(scenario);
    let drifting = scenario.simulation.generated_tvp();
    let truth_paths: Vec<TvpPath> = drifting
        .iter()
        .map(|s| gen_tvp_path(t_len, scenario.simulation.tvp_range(), scenario.span, *s, &mut rng))
        .collect();
    let mut phi_t = vec![gen.phi.clone(); t_len];
    let mut gamma_t = vec![gen.gamma.clone(); t_len];
    for p in &truth_paths {
        for (t, v) in p.values.iter().enumerate() {
            match p.cell.matrix {
                MatrixName::Phi => phi_t[t][(p.cell.row, p.cell.col)] = *v,
                MatrixName::Gamma => gamma_t[t][(p.cell.row, p.cell.col)] = *v,
                _ => unreachable!(),
            }
        }
    }
    let x = intervention_indicator(t_len, scenario.onset_fraction);
    let inputs = DMatrix::from_column_slice(t_len, 1, &x);
    let (observations, latent) = simulate(
        &gen.lambda,
        &gen.xi,
        &gen.psi,
        &phi_t,
        &gamma_t,
        &inputs,
        scenario.burn_in,
        &mut rng,
    )?;
    Ok(Dataset {
        scenario: scenario.clone(),
        observations,
        inputs,
        latent,
        truth_paths,
        generating_values: gen.invariant_values(&drifting),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loess_reproduces_constants_and_lines() {
        let c = vec![3.5; 40];
        for v in loess_smooth(&c, 0.5).unwrap() {
            assert!((v - 3.5).abs() < 1e-12);
        }
        let line: Vec<f64> = (0..57).map(|t| 1.5 - 0.25 * t as f64).collect();
        for (a, b) in loess_smooth(&line, 0.5).unwrap().iter().zip(&line) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn loess_rejects_short_series() {
        assert!(matches!(loess_smooth(&[1.0, 2.0, 3.0], 0.5), Err(Error::SeriesTooShort(3))));
    }

    #[test]
    fn loess_reduces_roughness() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut acc = 0.0;
        let walk: Vec<f64> = (0..200)
            .map(|_| {
                acc += rng.sample::<f64, _>(StandardNormal);
                acc
            })
            .collect();
        let rough = |s: &[f64]| s.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).powi(2)).sum::<f64>();
        let smooth = loess_smooth(&walk, 0.5).unwrap();
        assert!(rough(&smooth) < rough(&walk));
    }

    #[test]
    fn tvp_path_hits_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cell = TvpSlot { matrix: MatrixName::Phi, row: 0, col: 1 };
        for range in [(-0.3, 0.3), (-0.5, 0.5)] {
            let p = gen_tvp_path(200, range, 0.5, cell, &mut rng);
            let min = p.values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = p.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!((min - range.0).abs() < 1e-12);
            assert!((max - range.1).abs() < 1e-12);
            assert_eq!(p.values.len(), 200);
        }
    }

    #[test]
    fn simulation_ranges() {
        assert_eq!(Simulation::CrossLagged.tvp_range(), (-0.3, 0.3));
        assert_eq!(Simulation::Intervention.tvp_range(), (-0.5, 0.5));
    }

    #[test]
    fn onset_rule() {
        let x = intervention_indicator(11, 2.0 / 11.0);
        assert_eq!(x, [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let x = intervention_indicator(70, 2.0 / 11.0);
        assert_eq!(x.iter().position(|v| *v == 1.0), Some(12)); // t = 13, 1-based
        let x = intervention_indicator(10, 1e-6);
        assert_eq!(x[0], 0.0);
        assert_eq!(x[1], 1.0);
    }

    #[test]
    fn sim1_generates_cross_lagged_paths() {
        let s = ScenarioConfig::new(Simulation::CrossLagged, SubCondition::A, 70, 3);
        let d = gen_dataset(&s).unwrap();
        let names: Vec<String> = d.truth_paths.iter().map(TvpPath::name).collect();
        assert_eq!(names, ["Phi_1_2", "Phi_2_1"]);
        assert_eq!(d.generating_values["Gamma_1_1"], 0.5);
        assert_eq!(d.generating_values["Gamma_2_1"], 0.5);
        assert_eq!(d.generating_values["Phi_1_1"], 0.7);
        assert!(!d.generating_values.contains_key("Phi_1_2"));
        assert_eq!(d.observations.shape(), (70, 6));
    }

    #[test]
    fn sim2_holds_cross_lagged_constant() {
        let s = ScenarioConfig::new(Simulation::Intervention, SubCondition::A, 70, 3);
        let d = gen_dataset(&s).unwrap();
        assert_eq!(d.generating_values["Phi_1_2"], -0.2);
        assert_eq!(d.generating_values["Phi_2_1"], -0.3);
        assert!(d.truth_path(&TvpSlot { matrix: MatrixName::Gamma, row: 0, col: 0 }).is_some());
    }

    #[test]
    fn noise_free_null_system_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lambda = DMatrix::from_element(3, 1, 1.0);
        let phi = vec![DMatrix::from_element(1, 1, 0.5); 20];
        let gamma = vec![DMatrix::from_element(1, 1, 0.5); 20];
        let (y, eta) = simulate(&lambda, &[0.0; 3], &[0.0], &phi, &gamma, &DMatrix::zeros(20, 1), 50, &mut rng)
            .unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
        assert!(eta.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fitted_specs_follow_taxonomy() {
        let count = |sim, cond| ScenarioConfig::new(sim, cond, 70, 0).fitted_spec().tvp_slots().len();
        assert_eq!(count(Simulation::CrossLagged, SubCondition::A), 2);
        assert_eq!(count(Simulation::CrossLagged, SubCondition::B), 4);
        assert_eq!(count(Simulation::CrossLagged, SubCondition::C), 6);
        assert_eq!(count(Simulation::Intervention, SubCondition::A), 2);
        assert_eq!(count(Simulation::Intervention, SubCondition::B), 4);
        assert_eq!(count(Simulation::Intervention, SubCondition::C), 6);
    }

    #[test]
    fn invalid_scenarios() {
        let mut s = ScenarioConfig::new(Simulation::CrossLagged, SubCondition::A, 1, 0);
        assert!(gen_dataset(&s).is_err());
        s.t_len = 50;
        s.onset_fraction = 1.5;
        assert!(matches!(gen_dataset(&s), Err(Error::InvalidScenario(_))));
    }
}
