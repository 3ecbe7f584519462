//! Box-constrained minimizers used by the likelihood tuner.
//!
//! Both work on a plain `FnMut(&[f64]) -> f64` objective and keep every trial
//! point inside the box by coordinate-wise projection.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len(), "bound vectors differ in length");
        assert!(
            lower.iter().zip(&upper).all(|(l, u)| l <= u),
            "lower bound above upper bound"
        );
        Self { lower, upper }
    }

    pub fn unbounded(n: usize) -> Self {
        Self::new(vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, v)| *v >= self.lower[i] && *v <= self.upper[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    NelderMead,
    #[default]
    Bfgs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    /// Relative tolerance on the spread of objective values.
    pub ftol: f64,
    /// Absolute tolerance on the simplex diameter (or step length for BFGS).
    pub xtol: f64,
    pub max_iter: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            ftol: 1e-8,
            xtol: 1e-6,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective value after each iteration.
    pub history: Vec<f64>,
}

/// Largest coordinate change a single BFGS trial step may make.
const MAX_STEP: f64 = 1.0;

fn initial_step(x: f64) -> f64 {
    (0.05 * x.abs()).max(0.05)
}

/// Adaptive Nelder–Mead (dimension-dependent coefficients of Gao and Han).
///
/// Converged means the simplex diameter (max-norm distance of every vertex to
/// the best one) is below `xtol` and the spread of objective values is at most
/// `ftol * max(|f_best|, 1)`.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], bounds: &Bounds, opts: &OptimOptions) -> OptimResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    assert_eq!(bounds.len(), n, "bounds do not match x0");
    let mut evaluations = 0usize;
    let mut eval = |x: &[f64], count: &mut usize| {
        *count += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut start = x0.to_vec();
    bounds.project(&mut start);
    if n == 0 {
        let v = eval(&start, &mut evaluations);
        return OptimResult {
            x: start,
            f: v,
            iterations: 0,
            evaluations,
            converged: true,
            history: vec![v],
        };
    }

    let nf = n as f64;
    let (alpha, beta, gamma, delta) = if n >= 2 {
        (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(start.clone());
    for i in 0..n {
        let mut v = start.clone();
        let h = initial_step(start[i]);
        v[i] += h;
        if v[i] > bounds.upper[i] {
            v[i] = start[i] - h;
        }
        bounds.project(&mut v);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evaluations)).collect();

    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    let order = |simplex: &mut Vec<Vec<f64>>, values: &mut Vec<f64>| {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
        *simplex = idx.iter().map(|i| simplex[*i].clone()).collect();
        *values = idx.iter().map(|i| values[*i]).collect();
    };

    order(&mut simplex, &mut values);
    loop {
        let best = values[0];
        let diameter = simplex[1..]
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&simplex[0])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        let spread = values[n] - best;
        if diameter < opts.xtol && spread <= opts.ftol * best.abs().max(1.0) {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / nf;
            }
        }
        let along = |t: f64| {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + t * (c - w))
                .collect();
            bounds.project(&mut p);
            p
        };

        let xr = along(alpha);
        let fr = eval(&xr, &mut evaluations);
        let mut shrink = false;
        if fr < values[0] {
            let xe = along(alpha * beta);
            let fe = eval(&xe, &mut evaluations);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else if fr < values[n] {
            let xc = along(alpha * gamma);
            let fc = eval(&xc, &mut evaluations);
            if fc <= fr {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                shrink = true;
            }
        } else {
            let xc = along(-gamma);
            let fc = eval(&xc, &mut evaluations);
            if fc < values[n] {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                shrink = true;
            }
        }
        if shrink {
            let x_best = simplex[0].clone();
            for i in 1..=n {
                let mut p: Vec<f64> = x_best
                    .iter()
                    .zip(&simplex[i])
                    .map(|(b, v)| b + delta * (v - b))
                    .collect();
                bounds.project(&mut p);
                values[i] = eval(&p, &mut evaluations);
                simplex[i] = p;
            }
        }
        order(&mut simplex, &mut values);
        history.push(values[0]);
    }

    OptimResult {
        x: simplex[0].clone(),
        f: values[0],
        iterations,
        evaluations,
        converged,
        history,
    }
}

/// Central-difference gradient, one-sided next to a bound.
fn numerical_gradient<F>(f: &mut F, x: &[f64], fx: f64, bounds: &Bounds, evals: &mut usize) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut g = vec![0.0; x.len()];
    let mut p = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        let up = (x[i] + h).min(bounds.upper[i]);
        let dn = (x[i] - h).max(bounds.lower[i]);
        let (fu, fd);
        if up > x[i] {
            p[i] = up;
            fu = f(&p);
            *evals += 1;
        } else {
            fu = fx;
        }
        if dn < x[i] {
            p[i] = dn;
            fd = f(&p);
            *evals += 1;
        } else {
            fd = fx;
        }
        p[i] = x[i];
        let width = up - dn;
        g[i] = if width > 0.0 { (fu - fd) / width } else { 0.0 };
        if !g[i].is_finite() {
            g[i] = 0.0;
        }
    }
    g
}

/// Quasi-Newton (BFGS) with numerical gradients and a projected backtracking
/// line search.
///
/// Converged means the last accepted step moved less than `xtol` in max-norm
/// and improved the objective by at most `ftol * max(|f|, 1)`, or the projected
/// gradient vanished, or not even a steepest-descent step far below `xtol`
/// lowers the objective. Only running out of iterations counts as failure.
pub fn bfgs<F>(mut f: F, x0: &[f64], bounds: &Bounds, opts: &OptimOptions) -> OptimResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    assert_eq!(bounds.len(), n, "bounds do not match x0");
    let mut evaluations = 0usize;
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut fx = f(&x);
    evaluations += 1;
    let mut history = Vec::new();
    if n == 0 {
        return OptimResult {
            x,
            f: fx,
            iterations: 0,
            evaluations,
            converged: true,
            history: vec![fx],
        };
    }
    let mut g = numerical_gradient(&mut f, &x, fx, bounds, &mut evaluations);
    let identity = |n: usize| {
        let mut h = vec![vec![0.0; n]; n];
        for (i, row) in h.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        h
    };
    let mut hinv = identity(n);
    let mut fresh = true;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        // projected gradient norm
        let pg = (0..n)
            .map(|i| {
                let moved = (x[i] - g[i]).clamp(bounds.lower[i], bounds.upper[i]);
                (moved - x[i]).abs()
            })
            .fold(0.0, f64::max);
        if pg < 1e-10 {
            converged = true;
            break;
        }
        iterations += 1;
        let mut d: Vec<f64> = (0..n)
            .map(|i| -(0..n).map(|j| hinv[i][j] * g[j]).sum::<f64>())
            .collect();
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            hinv = identity(n);
            fresh = true;
            d = g.iter().map(|v| -v).collect();
        }
        // an unscaled first step can jump straight onto a bound where the
        // objective is flat; cap the trial step in max-norm
        let longest = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if longest > MAX_STEP {
            for v in d.iter_mut() {
                *v *= MAX_STEP / longest;
            }
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            bounds.project(&mut trial);
            let ft = f(&trial);
            evaluations += 1;
            let moved: f64 = trial.iter().zip(&x).zip(&g).map(|((a, b), gi)| (a - b) * gi).sum();
            if ft.is_finite() && ft <= fx + 1e-4 * moved.min(0.0) && ft < fx {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            // no descent along the search direction: retry once from steepest descent
            if !fresh {
                hinv = identity(n);
                fresh = true;
                history.push(fx);
                continue;
            }
            // steepest descent found no decrease at any step length: the
            // point is stationary up to gradient noise
            history.push(fx);
            converged = true;
            break;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let step = s.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let improvement = fx - f_new;
        let g_new = numerical_gradient(&mut f, &x_new, f_new, bounds, &mut evaluations);
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            if fresh {
                let yy: f64 = y.iter().map(|v| v * v).sum();
                let scale = sy / yy;
                for (i, row) in hinv.iter_mut().enumerate() {
                    row.iter_mut().for_each(|v| *v = 0.0);
                    row[i] = scale;
                }
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| hinv[i][j] * y[j]).sum()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for j in 0..n {
                    hinv[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        history.push(fx);
        if step < opts.xtol && improvement <= opts.ftol * fx.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    OptimResult {
        x,
        f: fx,
        iterations,
        evaluations,
        converged,
        history,
    }
}

pub fn minimize<F>(
    method: Optimizer,
    f: F,
    x0: &[f64],
    bounds: &Bounds,
    opts: &OptimOptions,
) -> OptimResult
where
    F: FnMut(&[f64]) -> f64,
{
    match method {
        Optimizer::NelderMead => nelder_mead(f, x0, bounds, opts),
        Optimizer::Bfgs => bfgs(f, x0, bounds, opts),
    }
}
