//! Dynamic factor model with random-walk time-varying coefficients.
//!
//! Measurement: `y_t = Λ(ω_t) η_t + ε_t`, latent dynamics:
//! `η_t = Φ(ω_t) η_{t-1} + Γ(ω_t) x_t + ζ_t`, with `ω_t = ω_{t-1} + ξ_t`.
//! Any cell of Λ, Φ or Γ may be fixed, free (estimated, time-invariant) or
//! time-varying (carried in ω). The augmented state is `[η; ω]`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One cell of a coefficient pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Cell {
    Fixed(f64),
    Free,
    Tvp,
}

impl TryFrom<String> for Cell {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        let t = s.trim();
        match t {
            "free" => Ok(Cell::Free),
            "tvp" => Ok(Cell::Tvp),
            _ => parse_fixed(t).map(Cell::Fixed),
        }
    }
}

impl From<Cell> for String {
    fn from(c: Cell) -> String {
        c.to_string()
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Fixed(v) => write!(f, "fixed:{v}"),
            Cell::Free => f.write_str("free"),
            Cell::Tvp => f.write_str("tvp"),
        }
    }
}

fn parse_fixed(t: &str) -> Result<f64> {
    let v = t
        .strip_prefix("fixed:")
        .ok_or_else(|| Error::InvalidSpec(format!("unknown cell '{t}'")))?;
    let v: f64 = v
        .trim()
        .parse()
        .map_err(|_| Error::InvalidSpec(format!("bad fixed value in '{t}'")))?;
    if !v.is_finite() {
        return Err(Error::InvalidSpec(format!("non-finite fixed value in '{t}'")));
    }
    Ok(v)
}

/// A noise variance: either fixed or estimated. Noise variances cannot vary in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NoiseCell {
    Fixed(f64),
    Free,
}

impl TryFrom<String> for NoiseCell {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        let t = s.trim();
        match t {
            "free" => Ok(NoiseCell::Free),
            "tvp" => Err(Error::InvalidSpec(
                "noise variances cannot be time-varying".into(),
            )),
            _ => {
                let v = parse_fixed(t)?;
                if v < 0.0 {
                    return Err(Error::InvalidSpec(format!("negative variance in '{t}'")));
                }
                Ok(NoiseCell::Fixed(v))
            }
        }
    }
}

impl From<NoiseCell> for String {
    fn from(c: NoiseCell) -> String {
        match c {
            NoiseCell::Fixed(v) => format!("fixed:{v}"),
            NoiseCell::Free => "free".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatrixName {
    Lambda,
    Phi,
    Gamma,
    Xi,
    Psi,
}

impl MatrixName {
    pub fn as_str(self) -> &'static str {
        match self {
            MatrixName::Lambda => "Lambda",
            MatrixName::Phi => "Phi",
            MatrixName::Gamma => "Gamma",
            MatrixName::Xi => "Xi",
            MatrixName::Psi => "Psi",
        }
    }
}

/// A `rows x cols` grid of cells, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    rows: usize,
    cols: usize,
    cells: Vec<Cell>,
}

impl Pattern {
    pub fn new(rows: usize, cols: usize, cells: Vec<Cell>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "pattern {rows}x{cols} needs {} cells, got {}",
                rows * cols,
                cells.len()
            )));
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn filled(rows: usize, cols: usize, cell: Cell) -> Self {
        Self {
            rows,
            cols,
            cells: vec![cell; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<Cell>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidSpec("ragged pattern rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> Cell {
        self.cells[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, cell: Cell) {
        self.cells[i * self.cols + j] = cell;
    }

    fn to_rows(&self) -> Vec<Vec<Cell>> {
        self.cells.chunks(self.cols.max(1)).map(<[Cell]>::to_vec).collect()
    }

    /// Cells in column-major order with their coordinates.
    fn column_major(&self) -> impl Iterator<Item = (usize, usize, Cell)> + '_ {
        (0..self.cols).flat_map(move |j| (0..self.rows).map(move |i| (i, j, self.get(i, j))))
    }
}

/// Position of one time-varying coefficient inside Λ, Φ or Γ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TvpSlot {
    pub matrix: MatrixName,
    pub row: usize,
    pub col: usize,
}

impl TvpSlot {
    /// 1-based label, e.g. `Phi_1_2`.
    pub fn name(&self) -> String {
        format!("{}_{}_{}", self.matrix.as_str(), self.row + 1, self.col + 1)
    }
}

/// Position of one time-invariant parameter in π.
///
/// Noise variances use `(Xi, i, i)` and `(Psi, s, s)` where `s` indexes the
/// augmented state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamSlot {
    pub matrix: MatrixName,
    pub row: usize,
    pub col: usize,
}

impl ParamSlot {
    pub fn is_variance(&self) -> bool {
        matches!(self.matrix, MatrixName::Xi | MatrixName::Psi)
    }
}

/// Model dimensions, coefficient patterns and noise designations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpecFile", into = "ModelSpecFile")]
pub struct ModelSpec {
    k: usize,
    m: usize,
    r: usize,
    loading: Pattern,
    phi: Pattern,
    gamma: Pattern,
    measurement_noise: Vec<NoiseCell>,
    latent_noise: Vec<NoiseCell>,
    tvp_noise: Vec<NoiseCell>,
}

/// On-disk JSON layout of a [`ModelSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpecFile {
    pub k: usize,
    pub m: usize,
    pub r: usize,
    pub loading_pattern: Vec<Vec<Cell>>,
    pub phi_pattern: Vec<Vec<Cell>>,
    #[serde(default)]
    pub gamma_pattern: Vec<Vec<Cell>>,
    pub measurement_noise: Vec<NoiseCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_noise: Option<Vec<NoiseCell>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tvp_noise: Option<Vec<NoiseCell>>,
}

fn pattern_from_file(rows: &[Vec<Cell>], nr: usize, nc: usize, what: &str) -> Result<Pattern> {
    if nc == 0 {
        if rows.iter().any(|r| !r.is_empty()) {
            return Err(Error::InvalidSpec(format!("{what} must be empty when it has no columns")));
        }
        return Ok(Pattern::filled(nr, 0, Cell::Free));
    }
    let p = Pattern::from_rows(rows)?;
    if p.rows() != nr || p.cols() != nc {
        return Err(Error::InvalidSpec(format!(
            "{what} must be {nr}x{nc}, got {}x{}",
            p.rows(),
            p.cols()
        )));
    }
    Ok(p)
}

impl TryFrom<ModelSpecFile> for ModelSpec {
    type Error = Error;

    fn try_from(f: ModelSpecFile) -> Result<Self> {
        let loading = pattern_from_file(&f.loading_pattern, f.k, f.m, "loading_pattern")?;
        let phi = pattern_from_file(&f.phi_pattern, f.m, f.m, "phi_pattern")?;
        let gamma = pattern_from_file(&f.gamma_pattern, f.m, f.r, "gamma_pattern")?;
        ModelSpec::new(
            f.k,
            f.m,
            f.r,
            loading,
            phi,
            gamma,
            f.measurement_noise,
            f.latent_noise,
            f.tvp_noise,
        )
    }
}

impl From<ModelSpec> for ModelSpecFile {
    fn from(s: ModelSpec) -> Self {
        ModelSpecFile {
            k: s.k,
            m: s.m,
            r: s.r,
            loading_pattern: s.loading.to_rows(),
            phi_pattern: s.phi.to_rows(),
            gamma_pattern: if s.r == 0 { vec![] } else { s.gamma.to_rows() },
            measurement_noise: s.measurement_noise,
            latent_noise: Some(s.latent_noise),
            tvp_noise: Some(s.tvp_noise),
        }
    }
}

impl ModelSpec {
    /// Builds and validates a spec. `latent_noise` defaults to variances fixed
    /// at 1 (scale identification); `tvp_noise` defaults to all free.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        k: usize,
        m: usize,
        r: usize,
        loading: Pattern,
        phi: Pattern,
        gamma: Pattern,
        measurement_noise: Vec<NoiseCell>,
        latent_noise: Option<Vec<NoiseCell>>,
        tvp_noise: Option<Vec<NoiseCell>>,
    ) -> Result<Self> {
        if k == 0 || m == 0 {
            return Err(Error::InvalidSpec("k and m must be positive".into()));
        }
        let dims_ok = loading.rows() == k
            && loading.cols() == m
            && phi.rows() == m
            && phi.cols() == m
            && gamma.rows() == m
            && gamma.cols() == r;
        if !dims_ok {
            return Err(Error::InvalidSpec("pattern dimensions do not match k, m, r".into()));
        }
        if measurement_noise.len() != k {
            return Err(Error::InvalidSpec(format!(
                "measurement_noise needs {k} entries, got {}",
                measurement_noise.len()
            )));
        }
        let latent_noise = latent_noise.unwrap_or_else(|| vec![NoiseCell::Fixed(1.0); m]);
        if latent_noise.len() != m {
            return Err(Error::InvalidSpec(format!(
                "latent_noise needs {m} entries, got {}",
                latent_noise.len()
            )));
        }
        let mut spec = ModelSpec {
            k,
            m,
            r,
            loading,
            phi,
            gamma,
            measurement_noise,
            latent_noise,
            tvp_noise: Vec::new(),
        };
        let n_tvp = spec.tvp_slots().len();
        spec.tvp_noise = tvp_noise.unwrap_or_else(|| vec![NoiseCell::Free; n_tvp]);
        if spec.tvp_noise.len() != n_tvp {
            return Err(Error::InvalidSpec(format!(
                "tvp_noise needs {n_tvp} entries, got {}",
                spec.tvp_noise.len()
            )));
        }
        let negative = spec
            .measurement_noise
            .iter()
            .chain(&spec.latent_noise)
            .chain(&spec.tvp_noise)
            .any(|c| matches!(c, NoiseCell::Fixed(v) if *v < 0.0 || !v.is_finite()));
        if negative {
            return Err(Error::InvalidSpec("fixed variances must be finite and >= 0".into()));
        }
        for c in 0..m {
            let scale_fixed = matches!(spec.latent_noise[c], NoiseCell::Fixed(v) if v > 0.0);
            let loading_fixed =
                (0..k).any(|i| matches!(spec.loading.get(i, c), Cell::Fixed(v) if v != 0.0));
            if !scale_fixed && !loading_fixed {
                return Err(Error::InvalidSpec(format!(
                    "factor {} is not identified: fix its innovation variance or one nonzero loading",
                    c + 1
                )));
            }
        }
        Ok(spec)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn k(&self) -> usize {
        self.k
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn r(&self) -> usize {
        self.r
    }
    pub fn loading(&self) -> &Pattern {
        &self.loading
    }
    pub fn phi(&self) -> &Pattern {
        &self.phi
    }
    pub fn gamma(&self) -> &Pattern {
        &self.gamma
    }
    pub fn measurement_noise(&self) -> &[NoiseCell] {
        &self.measurement_noise
    }
    pub fn latent_noise(&self) -> &[NoiseCell] {
        &self.latent_noise
    }
    pub fn tvp_noise(&self) -> &[NoiseCell] {
        &self.tvp_noise
    }

    fn pattern(&self, name: MatrixName) -> &Pattern {
        match name {
            MatrixName::Lambda => &self.loading,
            MatrixName::Phi => &self.phi,
            MatrixName::Gamma => &self.gamma,
            _ => unreachable!("noise matrices are not patterns"),
        }
    }

    /// Time-varying cells in ω order: Λ, Φ, Γ, each column-wise.
    pub fn tvp_slots(&self) -> Vec<TvpSlot> {
        let mut out = Vec::new();
        for name in [MatrixName::Lambda, MatrixName::Phi, MatrixName::Gamma] {
            for (i, j, c) in self.pattern(name).column_major() {
                if c == Cell::Tvp {
                    out.push(TvpSlot {
                        matrix: name,
                        row: i,
                        col: j,
                    });
                }
            }
        }
        out
    }

    /// Augmented state dimension `m* = m + |ω|`.
    pub fn state_dim(&self) -> usize {
        self.m + self.tvp_slots().len()
    }

    /// Layout of π: free cells of Λ, Φ, Γ column-wise, then free Ξ, then free Ψ.
    pub fn param_layout(&self) -> Vec<ParamSlot> {
        let mut out = Vec::new();
        for name in [MatrixName::Lambda, MatrixName::Phi, MatrixName::Gamma] {
            for (i, j, c) in self.pattern(name).column_major() {
                if c == Cell::Free {
                    out.push(ParamSlot {
                        matrix: name,
                        row: i,
                        col: j,
                    });
                }
            }
        }
        for (i, c) in self.measurement_noise.iter().enumerate() {
            if *c == NoiseCell::Free {
                out.push(ParamSlot {
                    matrix: MatrixName::Xi,
                    row: i,
                    col: i,
                });
            }
        }
        for (s, c) in self.latent_noise.iter().chain(&self.tvp_noise).enumerate() {
            if *c == NoiseCell::Free {
                out.push(ParamSlot {
                    matrix: MatrixName::Psi,
                    row: s,
                    col: s,
                });
            }
        }
        out
    }

    /// Human-readable 1-based name of a π entry.
    pub fn param_name(&self, slot: &ParamSlot) -> String {
        match slot.matrix {
            MatrixName::Xi => format!("Xi_{}", slot.row + 1),
            MatrixName::Psi if slot.row < self.m => format!("Psi_eta_{}", slot.row + 1),
            MatrixName::Psi => match self.tvp_slots().get(slot.row - self.m) {
                Some(t) => format!("Psi_{}", t.name()),
                None => format!("Psi_{}", slot.row + 1),
            },
            name => format!("{}_{}_{}", name.as_str(), slot.row + 1, slot.col + 1),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.param_layout().iter().map(|s| self.param_name(s)).collect()
    }

    /// Same model with every time-varying cell estimated as time-invariant.
    pub fn demote_tvp(&self) -> ModelSpec {
        let demote = |p: &Pattern| {
            let cells = p
                .cells
                .iter()
                .map(|c| if *c == Cell::Tvp { Cell::Free } else { *c })
                .collect();
            Pattern::new(p.rows, p.cols, cells).expect("same shape")
        };
        ModelSpec::new(
            self.k,
            self.m,
            self.r,
            demote(&self.loading),
            demote(&self.phi),
            demote(&self.gamma),
            self.measurement_noise.clone(),
            Some(self.latent_noise.clone()),
            Some(Vec::new()),
        )
        .expect("demoting keeps a valid spec")
    }
}

/// The time-invariant parameter vector π.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<ParamSlot>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, slot: &ParamSlot) -> Option<f64> {
        self.layout
            .iter()
            .position(|s| s == slot)
            .map(|i| self.values[i])
    }
}

/// Full numeric model matrices. Time-varying cells hold whatever value the
/// caller chose; they never enter π.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMatrices {
    pub lambda: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    /// Measurement-noise variances, length k.
    pub xi: DVector<f64>,
    /// Process-noise variances over the augmented state, length m*.
    pub psi: DVector<f64>,
}

impl ModelMatrices {
    fn matrix(&self, name: MatrixName) -> &DMatrix<f64> {
        match name {
            MatrixName::Lambda => &self.lambda,
            MatrixName::Phi => &self.phi,
            MatrixName::Gamma => &self.gamma,
            _ => unreachable!(),
        }
    }

    fn matrix_mut(&mut self, name: MatrixName) -> &mut DMatrix<f64> {
        match name {
            MatrixName::Lambda => &mut self.lambda,
            MatrixName::Phi => &mut self.phi,
            MatrixName::Gamma => &mut self.gamma,
            _ => unreachable!(),
        }
    }
}

fn check_matrices(spec: &ModelSpec, mats: &ModelMatrices) -> Result<()> {
    let ok = mats.lambda.shape() == (spec.k, spec.m)
        && mats.phi.shape() == (spec.m, spec.m)
        && mats.gamma.shape() == (spec.m, spec.r)
        && mats.xi.len() == spec.k
        && mats.psi.len() == spec.state_dim();
    if ok {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(
            "model matrices do not conform to the spec".into(),
        ))
    }
}

/// Column-wise stacking of the free cells (the υ operator) followed by the
/// free noise variances.
pub fn stack_params(spec: &ModelSpec, mats: &ModelMatrices) -> Result<ParamVector> {
    check_matrices(spec, mats)?;
    let layout = spec.param_layout();
    let values = layout
        .iter()
        .map(|s| match s.matrix {
            MatrixName::Xi => mats.xi[s.row],
            MatrixName::Psi => mats.psi[s.row],
            name => mats.matrix(name)[(s.row, s.col)],
        })
        .collect();
    Ok(ParamVector { values, layout })
}

/// Inverse of [`stack_params`]: fixed cells come from the spec, time-varying
/// cells are set to zero.
pub fn unstack_params(spec: &ModelSpec, pi: &ParamVector) -> Result<ModelMatrices> {
    if pi.layout != spec.param_layout() || pi.values.len() != pi.layout.len() {
        return Err(Error::LayoutMismatch);
    }
    let fill = |p: &Pattern| {
        DMatrix::from_fn(p.rows(), p.cols(), |i, j| match p.get(i, j) {
            Cell::Fixed(v) => v,
            _ => 0.0,
        })
    };
    let noise = |c: &NoiseCell| match c {
        NoiseCell::Fixed(v) => *v,
        NoiseCell::Free => 0.0,
    };
    let mut mats = ModelMatrices {
        lambda: fill(&spec.loading),
        phi: fill(&spec.phi),
        gamma: fill(&spec.gamma),
        xi: DVector::from_iterator(spec.k, spec.measurement_noise.iter().map(noise)),
        psi: DVector::from_iterator(
            spec.state_dim(),
            spec.latent_noise.iter().chain(&spec.tvp_noise).map(noise),
        ),
    };
    for (s, v) in pi.layout.iter().zip(&pi.values) {
        match s.matrix {
            MatrixName::Xi => mats.xi[s.row] = *v,
            MatrixName::Psi => mats.psi[s.row] = *v,
            name => mats.matrix_mut(name)[(s.row, s.col)] = *v,
        }
    }
    Ok(mats)
}

/// Augmented state `[η; ω]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub values: DVector<f64>,
    m: usize,
}

impl AugmentedState {
    pub fn new(eta: &[f64], omega: &[f64]) -> Self {
        Self {
            values: DVector::from_iterator(eta.len() + omega.len(), eta.iter().chain(omega).copied()),
            m: eta.len(),
        }
    }

    pub fn from_vector(values: DVector<f64>, m: usize) -> Self {
        assert!(m <= values.len(), "latent block longer than state");
        Self { values, m }
    }

    pub fn zeros(m: usize, n_tvp: usize) -> Self {
        Self::from_vector(DVector::zeros(m + n_tvp), m)
    }

    pub fn latent_dim(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn eta(&self) -> &[f64] {
        &self.values.as_slice()[..self.m]
    }

    pub fn omega(&self) -> &[f64] {
        &self.values.as_slice()[self.m..]
    }
}

/// A spec resolved against a particular π: ready for repeated evaluation of
/// `f`, `h` and their derivatives inside the filter loop.
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    k: usize,
    m: usize,
    r: usize,
    n: usize,
    lambda: DMatrix<f64>,
    phi: DMatrix<f64>,
    gamma: DMatrix<f64>,
    xi: DVector<f64>,
    psi: DVector<f64>,
    slots: Vec<TvpSlot>,
    f_hessians: Vec<DMatrix<f64>>,
    h_hessians: Vec<DMatrix<f64>>,
}

impl StateSpaceModel {
    pub fn new(spec: &ModelSpec, pi: &ParamVector) -> Result<Self> {
        let mats = unstack_params(spec, pi)?;
        Self::from_matrices(spec, mats)
    }

    /// Builds the model from explicit matrices; time-varying cells are ignored.
    pub fn from_matrices(spec: &ModelSpec, mats: ModelMatrices) -> Result<Self> {
        check_matrices(spec, &mats)?;
        let slots = spec.tvp_slots();
        let (k, m, r) = (spec.k, spec.m, spec.r);
        let n = m + slots.len();
        let mut lambda = mats.lambda;
        let mut phi = mats.phi;
        let mut gamma = mats.gamma;
        for s in &slots {
            match s.matrix {
                MatrixName::Lambda => lambda[(s.row, s.col)] = 0.0,
                MatrixName::Phi => phi[(s.row, s.col)] = 0.0,
                MatrixName::Gamma => gamma[(s.row, s.col)] = 0.0,
                _ => unreachable!(),
            }
        }
        // f and h are bilinear in (η, ω); their Hessians are constant.
        let mut f_hessians = vec![DMatrix::zeros(n, n); n];
        let mut h_hessians = vec![DMatrix::zeros(n, n); k];
        for (j, s) in slots.iter().enumerate() {
            let target = match s.matrix {
                MatrixName::Phi => &mut f_hessians[s.row],
                MatrixName::Lambda => &mut h_hessians[s.row],
                _ => continue,
            };
            target[(s.col, m + j)] += 1.0;
            target[(m + j, s.col)] += 1.0;
        }
        Ok(Self {
            k,
            m,
            r,
            n,
            lambda,
            phi,
            gamma,
            xi: mats.xi,
            psi: mats.psi,
            slots,
            f_hessians,
            h_hessians,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.k
    }
    pub fn latent_dim(&self) -> usize {
        self.m
    }
    pub fn input_dim(&self) -> usize {
        self.r
    }
    pub fn state_dim(&self) -> usize {
        self.n
    }
    pub fn slots(&self) -> &[TvpSlot] {
        &self.slots
    }
    /// Measurement-noise variances (diagonal of Ξ̃).
    pub fn measurement_noise(&self) -> &DVector<f64> {
        &self.xi
    }
    /// Process-noise variances over the augmented state (diagonal of Ψ̃).
    pub fn process_noise(&self) -> &DVector<f64> {
        &self.psi
    }

    fn check_state(&self, state: &DVector<f64>) -> Result<()> {
        if state.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "state has length {}, model needs {}",
                state.len(),
                self.n
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.r {
            return Err(Error::DimensionMismatch(format!(
                "input has length {}, model needs {}",
                x.len(),
                self.r
            )));
        }
        Ok(())
    }

    fn substituted(&self, state: &DVector<f64>, name: MatrixName) -> DMatrix<f64> {
        let mut out = match name {
            MatrixName::Lambda => self.lambda.clone(),
            MatrixName::Phi => self.phi.clone(),
            MatrixName::Gamma => self.gamma.clone(),
            _ => unreachable!(),
        };
        for (j, s) in self.slots.iter().enumerate() {
            if s.matrix == name {
                out[(s.row, s.col)] = state[self.m + j];
            }
        }
        out
    }

    /// Λ with time-varying cells taken from the state.
    pub fn lambda_at(&self, state: &DVector<f64>) -> DMatrix<f64> {
        self.substituted(state, MatrixName::Lambda)
    }
    pub fn phi_at(&self, state: &DVector<f64>) -> DMatrix<f64> {
        self.substituted(state, MatrixName::Phi)
    }
    pub fn gamma_at(&self, state: &DVector<f64>) -> DMatrix<f64> {
        self.substituted(state, MatrixName::Gamma)
    }

    /// Transition `f`: `η' = Φ(ω)η + Γ(ω)x`, `ω' = ω`.
    pub fn f(&self, state: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(state)?;
        self.check_input(x)?;
        let eta = state.rows(0, self.m);
        let mut next = state.clone();
        let mut lat = self.phi_at(state) * eta;
        if self.r > 0 {
            lat += self.gamma_at(state) * x;
        }
        next.rows_mut(0, self.m).copy_from(&lat);
        Ok(next)
    }

    /// Measurement `h`: `y = Λ(ω)η`.
    pub fn h(&self, state: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(state)?;
        Ok(self.lambda_at(state) * state.rows(0, self.m))
    }

    pub fn jacobian_f(&self, state: &DVector<f64>, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_state(state)?;
        self.check_input(x)?;
        let m = self.m;
        let mut j = DMatrix::<f64>::identity(self.n, self.n);
        j.view_mut((0, 0), (m, m)).copy_from(&self.phi_at(state));
        for (idx, s) in self.slots.iter().enumerate() {
            match s.matrix {
                MatrixName::Phi => j[(s.row, m + idx)] = state[s.col],
                MatrixName::Gamma => j[(s.row, m + idx)] = x[s.col],
                _ => {}
            }
        }
        Ok(j)
    }

    pub fn jacobian_h(&self, state: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_state(state)?;
        let m = self.m;
        let mut j = DMatrix::<f64>::zeros(self.k, self.n);
        j.view_mut((0, 0), (self.k, m)).copy_from(&self.lambda_at(state));
        for (idx, s) in self.slots.iter().enumerate() {
            if s.matrix == MatrixName::Lambda {
                j[(s.row, m + idx)] = state[s.col];
            }
        }
        Ok(j)
    }

    /// Hessian of the `i`-th component of `f` over the augmented state.
    pub fn hessian_f(&self, i: usize) -> Result<&DMatrix<f64>> {
        self.f_hessians.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: self.n,
        })
    }

    /// Hessian of the `i`-th component of `h` over the augmented state.
    pub fn hessian_h(&self, i: usize) -> Result<&DMatrix<f64>> {
        self.h_hessians.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: self.k,
        })
    }

    pub fn f_hessians(&self) -> &[DMatrix<f64>] {
        &self.f_hessians
    }

    pub fn h_hessians(&self) -> &[DMatrix<f64>] {
        &self.h_hessians
    }
}

fn resolve(state: &AugmentedState, pi: &ParamVector, spec: &ModelSpec) -> Result<StateSpaceModel> {
    if state.latent_dim() != spec.m() || state.len() != spec.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "state ({} latent, {} total) does not match spec ({} latent, {} total)",
            state.latent_dim(),
            state.len(),
            spec.m(),
            spec.state_dim()
        )));
    }
    StateSpaceModel::new(spec, pi)
}

pub fn eval_f(
    state: &AugmentedState,
    x: &DVector<f64>,
    pi: &ParamVector,
    spec: &ModelSpec,
) -> Result<AugmentedState> {
    let model = resolve(state, pi, spec)?;
    Ok(AugmentedState::from_vector(model.f(&state.values, x)?, spec.m()))
}

pub fn eval_h(state: &AugmentedState, pi: &ParamVector, spec: &ModelSpec) -> Result<DVector<f64>> {
    resolve(state, pi, spec)?.h(&state.values)
}

pub fn jacobian_f(
    state: &AugmentedState,
    x: &DVector<f64>,
    pi: &ParamVector,
    spec: &ModelSpec,
) -> Result<DMatrix<f64>> {
    resolve(state, pi, spec)?.jacobian_f(&state.values, x)
}

pub fn hessian_f(
    state: &AugmentedState,
    pi: &ParamVector,
    spec: &ModelSpec,
    i: usize,
) -> Result<DMatrix<f64>> {
    resolve(state, pi, spec)?.hessian_f(i).cloned()
}

pub fn jacobian_h(state: &AugmentedState, pi: &ParamVector, spec: &ModelSpec) -> Result<DMatrix<f64>> {
    resolve(state, pi, spec)?.jacobian_h(&state.values)
}

pub fn hessian_h(
    state: &AugmentedState,
    pi: &ParamVector,
    spec: &ModelSpec,
    i: usize,
) -> Result<DMatrix<f64>> {
    resolve(state, pi, spec)?.hessian_h(i).cloned()
}
