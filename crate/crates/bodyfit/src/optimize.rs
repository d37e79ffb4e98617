//! Limited-memory quasi-Newton minimization.
//!
//! All four fitting energies in the pipeline are smooth (or almost
//! everywhere smooth) functions of a few dozen to a few hundred thousand
//! variables, minimized with the same machinery: L-BFGS with a strong-Wolfe
//! line search. A finite-difference gradient checker is provided for the
//! hand-derived analytic gradients.

use crate::error::{Error, Result};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// Options for [`minimize`].
#[derive(Debug, Clone)]
pub struct MinimizeOptions {
    /// Hard cap on quasi-Newton iterations.
    pub max_iterations: usize,
    /// Gradient stopping threshold on the infinity norm. When `None`, the
    /// threshold is `1e-6 * max(1, |f(x0)|)`.
    pub gradient_tolerance: Option<f64>,
    /// Relative function-decrease stopping threshold.
    pub function_tolerance: f64,
    /// Number of curvature pairs kept.
    pub memory: usize,
    /// Sufficient-decrease constant of the line search.
    pub armijo: f64,
    /// Curvature constant of the line search.
    pub curvature: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            max_iterations: 500,
            gradient_tolerance: None,
            function_tolerance: 1e-9,
            memory: 10,
            armijo: 1e-4,
            curvature: 0.9,
        }
    }
}

impl MinimizeOptions {
    /// Same options with a different iteration cap.
    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }
}

/// Why the minimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinimizeStatus {
    /// Gradient infinity norm fell below the tolerance.
    GradientConverged,
    /// Relative function decrease fell below the tolerance.
    FunctionConverged,
    /// Iteration cap reached.
    MaxIterations,
    /// The line search could not find further descent; the best point seen
    /// is returned.
    LineSearchFailed,
}

/// Result of [`minimize`].
#[derive(Debug, Clone)]
pub struct Minimum {
    /// Best point found.
    pub x: Vec<f64>,
    /// Objective value at `x`.
    pub value: f64,
    /// Termination reason.
    pub status: MinimizeStatus,
    /// Quasi-Newton iterations performed.
    pub iterations: usize,
    /// Objective evaluations performed.
    pub evaluations: usize,
}

/// Minimizes `f` starting from `x0`.
///
/// The objective writes its gradient into the provided slice and returns the
/// value. Non-finite values at the start point are an error; the iterates
/// themselves never move to a point with a non-finite value because the line
/// search rejects such steps.
pub fn minimize<F>(mut f: F, x0: &[f64], options: &MinimizeOptions) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot minimize over zero variables".into()));
    }
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; n];
    let mut evaluations = 0usize;
    let mut value = {
        evaluations += 1;
        f(&x, &mut grad)
    };
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Optimizer {
            message: "objective or gradient is not finite at the start point".into(),
            energy: value,
            iterations: 0,
        });
    }
    let gtol = options
        .gradient_tolerance
        .unwrap_or_else(|| 1e-6 * value.abs().max(1.0));

    let mut s_history: VecDeque<Vec<f64>> = VecDeque::new();
    let mut y_history: VecDeque<Vec<f64>> = VecDeque::new();
    let mut rho_history: VecDeque<f64> = VecDeque::new();

    let mut direction = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut grad_new = vec![0.0; n];

    for iteration in 0..options.max_iterations {
        if inf_norm(&grad) <= gtol {
            return Ok(Minimum {
                x,
                value,
                status: MinimizeStatus::GradientConverged,
                iterations: iteration,
                evaluations,
            });
        }

        two_loop(&grad, &s_history, &y_history, &rho_history, &mut direction);
        let mut dg = dot(&direction, &grad);
        if dg >= 0.0 {
            // Not a descent direction (stale curvature); restart steepest.
            for (d, g) in direction.iter_mut().zip(&grad) {
                *d = -g;
            }
            s_history.clear();
            y_history.clear();
            rho_history.clear();
            dg = dot(&direction, &grad);
        }

        let first_step = if iteration == 0 && s_history.is_empty() {
            // Scale the very first step to unit displacement.
            (1.0 / inf_norm(&grad).max(1.0)).min(1.0)
        } else {
            1.0
        };

        let search = strong_wolfe(
            &mut f,
            &x,
            value,
            &grad,
            &direction,
            dg,
            first_step,
            options,
            &mut x_new,
            &mut grad_new,
            &mut evaluations,
        );

        let (step, new_value) = match search {
            Some(result) => result,
            None => {
                return Ok(Minimum {
                    x,
                    value,
                    status: MinimizeStatus::LineSearchFailed,
                    iterations: iteration,
                    evaluations,
                });
            }
        };

        // Curvature pair update.
        let mut s = vec![0.0; n];
        let mut y = vec![0.0; n];
        for i in 0..n {
            s[i] = x_new[i] - x[i];
            y[i] = grad_new[i] - grad[i];
        }
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if s_history.len() == options.memory {
                s_history.pop_front();
                y_history.pop_front();
                rho_history.pop_front();
            }
            rho_history.push_back(1.0 / sy);
            s_history.push_back(s);
            y_history.push_back(y);
        }

        let decrease = value - new_value;
        x.copy_from_slice(&x_new);
        grad.copy_from_slice(&grad_new);
        let old_value = value;
        value = new_value;
        let _ = step;

        if decrease >= 0.0 && decrease <= options.function_tolerance * old_value.abs().max(1.0) {
            return Ok(Minimum {
                x,
                value,
                status: MinimizeStatus::FunctionConverged,
                iterations: iteration + 1,
                evaluations,
            });
        }
    }

    Ok(Minimum {
        x,
        value,
        status: MinimizeStatus::MaxIterations,
        iterations: options.max_iterations,
        evaluations,
    })
}

/// Two-loop recursion computing `direction = -H * grad`.
fn two_loop(
    grad: &[f64],
    s_history: &VecDeque<Vec<f64>>,
    y_history: &VecDeque<Vec<f64>>,
    rho_history: &VecDeque<f64>,
    direction: &mut [f64],
) {
    let m = s_history.len();
    for (d, g) in direction.iter_mut().zip(grad) {
        *d = -g;
    }
    if m == 0 {
        return;
    }
    let mut alphas = vec![0.0; m];
    for i in (0..m).rev() {
        let alpha = rho_history[i] * dot(&s_history[i], direction);
        alphas[i] = alpha;
        for (d, yv) in direction.iter_mut().zip(&y_history[i]) {
            *d -= alpha * yv;
        }
    }
    // Initial Hessian scaling from the most recent pair.
    let last = m - 1;
    let yy = dot(&y_history[last], &y_history[last]);
    if yy > 0.0 {
        let gamma = 1.0 / (rho_history[last] * yy);
        for d in direction.iter_mut() {
            *d *= gamma;
        }
    }
    for i in 0..m {
        let beta = rho_history[i] * dot(&y_history[i], direction);
        let coeff = alphas[i] - beta;
        for (d, sv) in direction.iter_mut().zip(&s_history[i]) {
            *d += coeff * sv;
        }
    }
}

/// Strong-Wolfe line search (bracket and zoom). Returns `(step, value)` and
/// fills `x_new`/`grad_new`, or `None` when no acceptable step exists.
#[allow(clippy::too_many_arguments)]
fn strong_wolfe<F>(
    f: &mut F,
    x: &[f64],
    value0: f64,
    _grad0: &[f64],
    direction: &[f64],
    dg0: f64,
    first_step: f64,
    options: &MinimizeOptions,
    x_new: &mut [f64],
    grad_new: &mut [f64],
    evaluations: &mut usize,
) -> Option<(f64, f64)>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    const MAX_BRACKET: usize = 20;
    const MAX_ZOOM: usize = 40;
    let c1 = options.armijo;
    let c2 = options.curvature;

    let mut eval = |alpha: f64, x_new: &mut [f64], grad_new: &mut [f64], evals: &mut usize| {
        for i in 0..x.len() {
            x_new[i] = x[i] + alpha * direction[i];
        }
        *evals += 1;
        let v = f(x_new, grad_new);
        let d = dot(grad_new, direction);
        (v, d)
    };

    let mut alpha_prev = 0.0;
    let mut value_prev = value0;
    let mut dg_prev = dg0;
    let mut alpha = first_step;

    let mut bracket: Option<(f64, f64, f64, f64, f64, f64)> = None;
    for i in 0..MAX_BRACKET {
        let (v, d) = eval(alpha, x_new, grad_new, evaluations);
        if !v.is_finite() {
            // Step into a bad region: shrink instead of bracketing.
            alpha *= 0.25;
            if alpha < 1e-20 {
                return None;
            }
            continue;
        }
        if v > value0 + c1 * alpha * dg0 || (i > 0 && v >= value_prev) {
            bracket = Some((alpha_prev, value_prev, dg_prev, alpha, v, d));
            break;
        }
        if d.abs() <= -c2 * dg0 {
            return Some((alpha, v));
        }
        if d >= 0.0 {
            bracket = Some((alpha, v, d, alpha_prev, value_prev, dg_prev));
            break;
        }
        alpha_prev = alpha;
        value_prev = v;
        dg_prev = d;
        alpha *= 2.0;
    }

    let (mut lo, mut value_lo, mut dg_lo, mut hi, mut value_hi, _dg_hi) = bracket?;

    for _ in 0..MAX_ZOOM {
        // Quadratic interpolation using the low end's value/slope and the
        // high end's value; bisect when the fit is unusable.
        let denom = value_hi - value_lo - dg_lo * (hi - lo);
        let mut alpha = if denom.abs() > 1e-300 {
            lo - 0.5 * dg_lo * (hi - lo) * (hi - lo) / denom
        } else {
            0.5 * (lo + hi)
        };
        let lo_hi_range = (hi - lo).abs();
        let within = (alpha - lo.min(hi)).min(lo.max(hi) - alpha);
        if !alpha.is_finite() || within < 0.05 * lo_hi_range {
            alpha = 0.5 * (lo + hi);
        }
        let (v, d) = eval(alpha, x_new, grad_new, evaluations);
        if !v.is_finite() || v > value0 + c1 * alpha * dg0 || v >= value_lo {
            hi = alpha;
            value_hi = v;
        } else {
            if d.abs() <= -c2 * dg0 {
                return Some((alpha, v));
            }
            if d * (hi - lo) >= 0.0 {
                hi = lo;
                value_hi = value_lo;
            }
            lo = alpha;
            value_lo = v;
            dg_lo = d;
        }
        if (hi - lo).abs() * inf_norm(direction) < 1e-16 * (1.0 + inf_norm(x)) {
            break;
        }
    }

    // Accept the best sufficient-decrease point even without curvature.
    if value_lo < value0 + c1 * lo * dg0 && lo > 0.0 {
        let (v, _) = eval(lo, x_new, grad_new, evaluations);
        return Some((lo, v));
    }
    None
}

/// Largest relative error between the analytic gradient of `f` and central
/// finite differences, over `samples` randomly chosen coordinates.
///
/// The error for a coordinate is `|analytic - numeric| / max(1e-12, |numeric|)`.
/// Deterministic for a given `seed`.
pub fn check_gradient<F>(mut f: F, x: &[f64], step: f64, samples: usize, seed: u64) -> f64
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let n = x.len();
    let mut grad = vec![0.0; n];
    f(x, &mut grad);
    let mut scratch = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if samples >= n {
        (0..n).collect()
    } else {
        sample(&mut rng, n, samples).into_vec()
    };
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in picks {
        xp[i] = x[i] + step;
        let fp = f(&xp, &mut scratch);
        xp[i] = x[i] - step;
        let fm = f(&xp, &mut scratch);
        xp[i] = x[i];
        let numeric = (fp - fm) / (2.0 * step);
        let err = (grad[i] - numeric).abs() / numeric.abs().max(1e-12);
        worst = worst.max(err);
    }
    worst
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}
