//! Unconstrained smooth maximization (L-BFGS with Armijo backtracking) and
//! finite-difference gradient checking.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::error::{input, Error, Result};

/// A smooth objective to be maximized.
pub trait Objective {
    fn n_dims(&self) -> usize;
    /// Value and gradient at `x`. Errors and non-finite values are treated as
    /// a rejected point by the line search.
    fn evaluate(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
}

/// Objective backed by a closure.
pub struct FnObjective<F> {
    n: usize,
    f: F,
}

impl<F> FnObjective<F>
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    pub fn new(n: usize, f: F) -> Self {
        Self { n, f }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    fn n_dims(&self) -> usize {
        self.n
    }
    fn evaluate(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        (self.f)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimSettings {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub rel_tol: f64,
    /// Number of stored secant pairs.
    pub memory: usize,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-5,
            rel_tol: 1e-9,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub params: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `(iteration, value)` after each accepted step; iteration 0 is the start.
    pub trace: Vec<(usize, f64)>,
}

const ARMIJO_C1: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;

fn eval_point(obj: &dyn Objective, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
    match obj.evaluate(x) {
        Ok((v, g)) if v.is_finite() && g.iter().all(|gi| gi.is_finite()) => Some((v, g)),
        _ => None,
    }
}

/// Maximize `obj` from `init`.
pub fn maximize(
    obj: &dyn Objective,
    init: &DVector<f64>,
    settings: &OptimSettings,
) -> Result<OptimResult> {
    if init.len() != obj.n_dims() {
        return input(format!(
            "maximize: init has {} entries, objective has {}",
            init.len(),
            obj.n_dims()
        ));
    }
    if settings.max_iters == 0 || !(settings.grad_tol > 0.0) || !(settings.rel_tol > 0.0) {
        return input("maximize: settings must be positive");
    }
    let (mut f, mut g) = eval_point(obj, init).ok_or_else(|| {
        Error::Initialization("objective is not finite at the initial point".into())
    })?;
    let mut x = init.clone();
    let mut trace = vec![(0, f)];
    if g.amax() < settings.grad_tol {
        return Ok(OptimResult {
            params: x.as_slice().to_vec(),
            value: f,
            iterations: 0,
            converged: true,
            trace,
        });
    }

    // Work on the minimization problem of -f.
    let mut hist: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=settings.max_iters {
        iterations = iter;
        let grad_min = -&g;
        let mut dir = two_loop(&grad_min, &hist);
        let mut slope = grad_min.dot(&dir);
        if !(slope < 0.0) {
            hist.clear();
            dir = -&grad_min;
            slope = grad_min.dot(&dir);
        }
        let mut step = if hist.is_empty() {
            (1.0 / grad_min.amax()).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let xn = &x + &dir * step;
            if let Some((fnew, gnew)) = eval_point(obj, &xn) {
                if -fnew <= -f + ARMIJO_C1 * step * slope {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
            }
            step *= BACKTRACK;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            if hist.is_empty() {
                // No ascent along the steepest direction at any step size.
                converged = true;
                iterations = iter - 1;
                break;
            }
            hist.clear();
            continue;
        };
        let s = &xn - &x;
        let y = -&gnew + &g;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if hist.len() == settings.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let rel_change = (fnew - f).abs() / f.abs().max(1.0);
        x = xn;
        f = fnew;
        g = gnew;
        trace.push((iter, f));
        if g.amax() < settings.grad_tol || rel_change < settings.rel_tol {
            converged = true;
            break;
        }
    }
    Ok(OptimResult {
        params: x.as_slice().to_vec(),
        value: f,
        iterations,
        converged,
        trace,
    })
}

/// L-BFGS two-loop recursion: returns `-H·grad`.
fn two_loop(
    grad: &DVector<f64>,
    hist: &VecDeque<(DVector<f64>, DVector<f64>, f64)>,
) -> DVector<f64> {
    let mut q = grad.clone();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * s.dot(&q);
        q -= y * a;
        alphas.push(a);
    }
    if let Some((s, y, _)) = hist.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
        let b = rho * y.dot(&q);
        q += s * (a - b);
    }
    -q
}

/// Largest discrepancy between the analytic gradient and a central
/// finite-difference estimate (five-point stencil with spacing `step`).
/// Relative to the numerical derivative, or absolute where it is below 1e-8.
pub fn grad_check(obj: &dyn Objective, point: &DVector<f64>, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return input("grad_check: step must be positive");
    }
    let (_, g) = obj.evaluate(point)?;
    let mut worst: f64 = 0.0;
    let mut x = point.clone();
    for i in 0..point.len() {
        let mut at = |delta: f64| -> Result<f64> {
            x[i] = point[i] + delta;
            let v = obj.evaluate(&x)?.0;
            x[i] = point[i];
            Ok(v)
        };
        let numeric =
            (at(-2.0 * step)? - 8.0 * at(-step)? + 8.0 * at(step)? - at(2.0 * step)?) / (12.0 * step);
        let diff = (g[i] - numeric).abs();
        let err = if numeric.abs() < 1e-8 {
            diff
        } else {
            diff / numeric.abs()
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bowl() -> impl Objective {
        FnObjective::new(2, |x: &DVector<f64>| {
            let c = DVector::from_vec(vec![1.0, 2.0]);
            let d = x - &c;
            Ok((-d.norm_squared(), -&d * 2.0))
        })
    }

    #[test]
    fn quadratic_bowl_converges() {
        let r = maximize(&bowl(), &DVector::zeros(2), &OptimSettings::default()).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 50);
        assert!((r.params[0] - 1.0).abs() < 1e-6 && (r.params[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_start_stops_immediately() {
        let r = maximize(
            &bowl(),
            &DVector::from_vec(vec![1.0, 2.0]),
            &OptimSettings::default(),
        )
        .unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.trace.len(), 1);
    }

    #[test]
    fn non_finite_start_is_initialization_error() {
        let obj = FnObjective::new(1, |_: &DVector<f64>| Ok((f64::NAN, DVector::zeros(1))));
        assert!(matches!(
            maximize(&obj, &DVector::zeros(1), &OptimSettings::default()),
            Err(Error::Initialization(_))
        ));
    }

    #[test]
    fn line_search_survives_non_finite_regions() {
        // log-barrier: -inf outside x > 0
        let obj = FnObjective::new(1, |x: &DVector<f64>| {
            let v = x[0];
            if v <= 0.0 {
                return Ok((f64::NEG_INFINITY, DVector::zeros(1)));
            }
            Ok((v.ln() - v, DVector::from_element(1, 1.0 / v - 1.0)))
        });
        let r = maximize(&obj, &DVector::from_element(1, 0.05), &OptimSettings::default()).unwrap();
        assert!((r.params[0] - 1.0).abs() < 1e-4);
        assert!(r.trace.windows(2).all(|w| w[1].1 >= w[0].1));
    }

    #[test]
    fn grad_check_quadratic_and_corrupted() {
        let p = DVector::from_vec(vec![0.3, -0.7]);
        assert!(grad_check(&bowl(), &p, 1e-4).unwrap() < 1e-9);
        let bad = FnObjective::new(2, |x: &DVector<f64>| {
            let (v, mut g) = bowl().evaluate(x)?;
            g[1] *= 2.0;
            Ok((v, g))
        });
        assert!(grad_check(&bad, &p, 1e-4).unwrap() > 0.5);
    }

    #[test]
    fn rejects_bad_settings() {
        let s = OptimSettings {
            max_iters: 0,
            ..Default::default()
        };
        assert!(maximize(&bowl(), &DVector::zeros(2), &s).is_err());
        assert!(maximize(&bowl(), &DVector::zeros(3), &OptimSettings::default()).is_err());
        assert!(grad_check(&bowl(), &DVector::zeros(2), 0.0).is_err());
    }
}
