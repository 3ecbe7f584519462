//! Shared fixtures: random models, a reference simulator, and a textbook
//! linear Kalman filter / RTS smoother written independently of the crate.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tvsekf::filter::FilterInit;
use tvsekf::linalg::SqrtFactor;
use tvsekf::model::{AugmentedState, Cell, ModelMatrices, ModelSpec, NoiseCell, Pattern, StateSpaceModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unif<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Stable m×m matrix: random entries rescaled to max row sum 0.85.
pub fn stable_phi<R: Rng>(rng: &mut R, m: usize) -> DMatrix<f64> {
    let mut phi = DMatrix::from_fn(m, m, |_, _| unif(rng, -0.6, 0.6));
    let row_sum = (0..m).map(|i| phi.row(i).abs().sum()).fold(0.0, f64::max);
    if row_sum > 0.85 {
        phi *= 0.85 / row_sum;
    }
    phi
}

/// Lower-triangular root with a comfortably positive diagonal.
pub fn random_root<R: Rng>(rng: &mut R, n: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => scale * unif(rng, -0.3, 0.3),
        std::cmp::Ordering::Equal => scale * unif(rng, 0.5, 1.2),
        std::cmp::Ordering::Less => 0.0,
    })
}

/// A fully linear model: every Λ, Φ, Γ cell free, latent variances fixed.
pub fn random_linear<R: Rng>(rng: &mut R) -> (ModelSpec, StateSpaceModel, ModelMatrices) {
    let m = rng.random_range(1..=3);
    let k = rng.random_range(m..=m + 4);
    let r = rng.random_range(0..=2);
    let latent: Vec<f64> = (0..m).map(|_| unif(rng, 0.3, 1.5)).collect();
    let spec = ModelSpec::new(
        k,
        m,
        r,
        Pattern::filled(k, m, Cell::Free),
        Pattern::filled(m, m, Cell::Free),
        Pattern::filled(m, r, Cell::Free),
        vec![NoiseCell::Free; k],
        Some(latent.iter().map(|v| NoiseCell::Fixed(*v)).collect()),
        None,
    )
    .unwrap();
    let mats = ModelMatrices {
        lambda: DMatrix::from_fn(k, m, |_, _| unif(rng, -1.5, 1.5)),
        phi: stable_phi(rng, m),
        gamma: DMatrix::from_fn(m, r, |_, _| unif(rng, -1.0, 1.0)),
        xi: DVector::from_fn(k, |_, _| unif(rng, 0.1, 1.0)),
        psi: DVector::from_vec(latent),
    };
    let model = StateSpaceModel::from_matrices(&spec, mats.clone()).unwrap();
    (spec, model, mats)
}

/// Two factors, four indicators, one input; drifting Λ21, Φ12 and Γ21.
pub fn random_tvp<R: Rng>(rng: &mut R) -> (ModelSpec, StateSpaceModel, ModelMatrices, Vec<f64>) {
    let f = Cell::Fixed(0.0);
    let loading = Pattern::from_rows(&[
        vec![Cell::Fixed(1.0), f],
        vec![Cell::Tvp, f],
        vec![f, Cell::Fixed(1.0)],
        vec![f, Cell::Free],
    ])
    .unwrap();
    let phi = Pattern::from_rows(&[vec![Cell::Free, Cell::Tvp], vec![Cell::Free, Cell::Free]]).unwrap();
    let gamma = Pattern::from_rows(&[vec![Cell::Free], vec![Cell::Tvp]]).unwrap();
    let spec = ModelSpec::new(4, 2, 1, loading, phi, gamma, vec![NoiseCell::Free; 4], None, None).unwrap();
    let mut lambda = DMatrix::zeros(4, 2);
    lambda[(0, 0)] = 1.0;
    lambda[(2, 1)] = 1.0;
    lambda[(3, 1)] = unif(rng, 0.6, 1.4);
    let mut phi = DMatrix::zeros(2, 2);
    phi[(0, 0)] = unif(rng, 0.2, 0.6);
    phi[(1, 0)] = unif(rng, -0.2, 0.2);
    phi[(1, 1)] = unif(rng, 0.2, 0.6);
    let gamma = DMatrix::from_column_slice(2, 1, &[unif(rng, -0.5, 0.5), 0.0]);
    let mut psi = vec![1.0, 1.0];
    psi.extend((0..3).map(|_| unif(rng, 1e-4, 1e-3)));
    let mats = ModelMatrices {
        lambda,
        phi,
        gamma,
        xi: DVector::from_fn(4, |_, _| unif(rng, 0.2, 0.6)),
        psi: DVector::from_vec(psi),
    };
    let omega0 = vec![unif(rng, 0.7, 1.3), unif(rng, -0.3, 0.3), unif(rng, -0.5, 0.5)];
    let model = StateSpaceModel::from_matrices(&spec, mats.clone()).unwrap();
    (spec, model, mats, omega0)
}

pub fn init_from_root(eta: &[f64], omega: &[f64], root: DMatrix<f64>) -> FilterInit {
    FilterInit {
        state: AugmentedState::new(eta, omega),
        sqrt_cov: SqrtFactor::from_lower(root),
    }
}

pub fn random_inputs<R: Rng>(rng: &mut R, t_len: usize, r: usize) -> DMatrix<f64> {
    DMatrix::from_fn(t_len, r, |t, j| if j == 0 { f64::from(t > t_len / 5) } else { normal(rng) })
}

/// Draws from the augmented model itself: `s_t = f(s_{t−1}, x_t) + ζ`,
/// `y_t = h(s_t) + ε` with diagonal noise.
pub fn simulate<R: Rng>(
    model: &StateSpaceModel,
    init: &FilterInit,
    inputs: &DMatrix<f64>,
    rng: &mut R,
) -> DMatrix<f64> {
    let n = model.state_dim();
    let k = model.obs_dim();
    let psi = model.process_noise().clone();
    let xi = model.measurement_noise().clone();
    let mut s = init.state.values.clone();
    let mut data = DMatrix::zeros(inputs.nrows(), k);
    for t in 0..inputs.nrows() {
        let x = inputs.row(t).transpose();
        s = model.f(&s, &x).unwrap() + DVector::from_fn(n, |i, _| psi[i].sqrt() * normal(rng));
        let y = model.h(&s).unwrap() + DVector::from_fn(k, |i, _| xi[i].sqrt() * normal(rng));
        data.row_mut(t).copy_from(&y.transpose());
    }
    data
}

pub struct KalmanOracle {
    pub filtered: Vec<DVector<f64>>,
    pub filtered_cov: Vec<DMatrix<f64>>,
    pub predicted: Vec<DVector<f64>>,
    pub predicted_cov: Vec<DMatrix<f64>>,
    pub log_lik: f64,
}

/// Covariance-form Kalman filter with a Joseph-form update.
#[allow(clippy::too_many_arguments)]
pub fn kalman_oracle(
    lambda: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    xi: &DVector<f64>,
    psi: &DVector<f64>,
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
    data: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
) -> KalmanOracle {
    let r_mat = DMatrix::from_diagonal(xi);
    let q_mat = DMatrix::from_diagonal(psi);
    let n = x0.len();
    let k = lambda.nrows();
    let mut x = x0.clone();
    let mut p = p0.clone();
    let mut out = KalmanOracle {
        filtered: vec![],
        filtered_cov: vec![],
        predicted: vec![],
        predicted_cov: vec![],
        log_lik: 0.0,
    };
    for t in 0..data.nrows() {
        let u = inputs.row(t).transpose();
        let xp = phi * &x + gamma * u;
        let pp = phi * &p * phi.transpose() + &q_mat;
        let y = data.row(t).transpose();
        let e = &y - lambda * &xp;
        let s = lambda * &pp * lambda.transpose() + &r_mat;
        let s_inv = s.clone().try_inverse().unwrap();
        let gain = &pp * lambda.transpose() * &s_inv;
        x = &xp + &gain * &e;
        let ikh = DMatrix::identity(n, n) - &gain * lambda;
        p = &ikh * &pp * ikh.transpose() + &gain * &r_mat * gain.transpose();
        out.log_lik += -0.5
            * (k as f64 * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + (e.transpose() * &s_inv * &e)[0]);
        out.predicted.push(xp);
        out.predicted_cov.push(pp);
        out.filtered.push(x.clone());
        out.filtered_cov.push(p.clone());
    }
    out
}

/// Textbook RTS recursion on top of [`kalman_oracle`] output.
pub fn rts_oracle(kf: &KalmanOracle, phi: &DMatrix<f64>) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    let n_steps = kf.filtered.len();
    let mut xs = kf.filtered.clone();
    let mut ps = kf.filtered_cov.clone();
    for t in (0..n_steps - 1).rev() {
        let c = &kf.filtered_cov[t] * phi.transpose() * kf.predicted_cov[t + 1].clone().try_inverse().unwrap();
        xs[t] = &kf.filtered[t] + &c * (&xs[t + 1] - &kf.predicted[t + 1]);
        ps[t] = &kf.filtered_cov[t] + &c * (&ps[t + 1] - &kf.predicted_cov[t + 1]) * c.transpose();
    }
    (xs, ps)
}

/// `max |a − b| / max(1, |b|)` over entries.
pub fn rel_diff_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

pub fn rel_diff_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}
