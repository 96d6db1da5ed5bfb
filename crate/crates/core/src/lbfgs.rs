//! Limited-memory BFGS with a weak Wolfe line search (bisection/expansion
//! after Lewis and Overton), suited to the nonsmooth-ish penalty costs of the
//! trajectory optimizer.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsParams {
    pub memory: usize,
    /// Stop when ‖g‖∞ ≤ g_tol · max(1, ‖x‖∞).
    pub g_tol: f64,
    pub max_iterations: usize,
    /// Stop when the relative decrease over `past` iterations is below `delta`.
    pub past: usize,
    pub delta: f64,
    pub armijo: f64,
    pub curvature: f64,
    pub max_linesearch: usize,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        Self {
            memory: 8,
            g_tol: 1e-5,
            max_iterations: 300,
            past: 3,
            delta: 1e-7,
            armijo: 1e-4,
            curvature: 0.9,
            max_linesearch: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LbfgsStatus {
    Converged,
    Stalled,
    MaxIterations,
    LineSearchFailed,
    NonFinite,
    /// The iteration callback asked to stop.
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsReport {
    pub status: LbfgsStatus,
    pub iterations: usize,
    pub evaluations: usize,
    pub cost: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizes `cost` starting from `x`, leaving the best point in `x`.
/// `cost(x, grad)` returns the value and writes the gradient. `on_iterate`
/// is called after every accepted step with (iteration, x, value) and may
/// return `true` to stop.
pub fn minimize<F, C>(x: &mut [f64], mut cost: F, params: &LbfgsParams, mut on_iterate: C) -> LbfgsReport
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    C: FnMut(usize, &[f64], f64) -> bool,
{
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut f = cost(x, &mut g);
    let mut evaluations = 1;
    let report = |status, iterations, evaluations, cost| LbfgsReport { status, iterations, evaluations, cost };
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return report(LbfgsStatus::NonFinite, 0, evaluations, f);
    }
    if inf_norm(&g) <= params.g_tol * inf_norm(x).max(1.0) {
        return report(LbfgsStatus::Converged, 0, evaluations, f);
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(params.memory);
    let mut past_costs: VecDeque<f64> = VecDeque::new();
    let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut step = 1.0 / dot(&d, &d).sqrt().max(1e-12);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut alpha = vec![0.0; params.memory];

    for iter in 1..=params.max_iterations {
        let dg0 = dot(&d, &g);
        if !(dg0 < 0.0) {
            // Lost descent (numerical trouble); fall back to steepest descent.
            history.clear();
            d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
            step = 1.0 / dot(&d, &d).sqrt().max(1e-12);
            continue;
        }
        let (mut lo, mut hi) = (0.0, f64::INFINITY);
        let mut accepted = None;
        for _ in 0..params.max_linesearch {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            let f_new = cost(&x_new, &mut g_new);
            evaluations += 1;
            if !f_new.is_finite() || f_new > f + params.armijo * step * dg0 {
                hi = step;
            } else if dot(&g_new, &d) < params.curvature * dg0 {
                lo = step;
            } else {
                accepted = Some(f_new);
                break;
            }
            step = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * step };
            if hi.is_finite() && (hi - lo) <= 1e-16 * hi.max(1.0) {
                break;
            }
        }
        let Some(f_new) = accepted else {
            // Take a sufficient-decrease point if one was bracketed.
            if lo > 0.0 {
                for i in 0..n {
                    x_new[i] = x[i] + lo * d[i];
                }
                let f_lo = cost(&x_new, &mut g_new);
                evaluations += 1;
                if f_lo < f {
                    x.copy_from_slice(&x_new);
                    let _ = on_iterate(iter, x, f_lo);
                    return report(LbfgsStatus::LineSearchFailed, iter, evaluations, f_lo);
                }
            }
            return report(LbfgsStatus::LineSearchFailed, iter, evaluations, f);
        };

        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        let f_prev = f;
        f = f_new;
        if on_iterate(iter, x, f) {
            return report(LbfgsStatus::Stopped, iter, evaluations, f);
        }

        if inf_norm(&g) <= params.g_tol * inf_norm(x).max(1.0) {
            return report(LbfgsStatus::Converged, iter, evaluations, f);
        }
        past_costs.push_back(f_prev);
        if past_costs.len() > params.past {
            let old = past_costs.pop_front().expect("non-empty");
            if (old - f) / f.abs().max(1.0) < params.delta {
                return report(LbfgsStatus::Stalled, iter, evaluations, f);
            }
        }

        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s) {
            if history.len() == params.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        // Two-loop recursion.
        d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
        for (k, (s, y, rho)) in history.iter().enumerate().rev() {
            alpha[k] = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= alpha[k] * yi);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|di| *di *= gamma);
        }
        for (k, (s, y, rho)) in history.iter().enumerate() {
            let beta = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (alpha[k] - beta) * si);
        }
        step = 1.0;
    }
    report(LbfgsStatus::MaxIterations, params.max_iterations, evaluations, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let mut f = 0.0;
        g.fill(0.0);
        for i in 0..x.len() - 1 {
            let a = x[i + 1] - x[i] * x[i];
            let b = 1.0 - x[i];
            f += 100.0 * a * a + b * b;
            g[i] += -400.0 * a * x[i] - 2.0 * b;
            g[i + 1] += 200.0 * a;
        }
        f
    }

    #[test]
    fn solves_rosenbrock() {
        let mut x = vec![-1.2, 1.0, -1.2, 1.0, 0.5, -0.3];
        let params = LbfgsParams { max_iterations: 1000, delta: 0.0, ..Default::default() };
        let mut costs = Vec::new();
        let r = minimize(&mut x, rosenbrock, &params, |_, _, f| {
            costs.push(f);
            false
        });
        assert_eq!(r.status, LbfgsStatus::Converged, "{r:?}");
        assert!(x.iter().all(|v| (v - 1.0).abs() < 1e-4), "{x:?}");
        assert!(costs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_converges_quickly() {
        let diag = [1.0, 10.0, 100.0, 3.0];
        let mut x = vec![1.0; 4];
        let r = minimize(
            &mut x,
            |x, g| {
                let mut f = 0.0;
                for i in 0..4 {
                    g[i] = diag[i] * x[i];
                    f += 0.5 * diag[i] * x[i] * x[i];
                }
                f
            },
            &LbfgsParams::default(),
            |_, _, _| false,
        );
        assert_eq!(r.status, LbfgsStatus::Converged);
        assert!(r.iterations < 30);
        assert!(x.iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn callback_can_stop() {
        let mut x = vec![-1.2, 1.0];
        let r = minimize(&mut x, rosenbrock, &LbfgsParams::default(), |it, _, _| it == 3);
        assert_eq!(r.status, LbfgsStatus::Stopped);
        assert_eq!(r.iterations, 3);
    }

    #[test]
    fn reports_non_finite_start() {
        let mut x = vec![0.0];
        let r = minimize(&mut x, |_, g| {
            g[0] = 0.0;
            f64::NAN
        }, &LbfgsParams::default(), |_, _, _| false);
        assert_eq!(r.status, LbfgsStatus::NonFinite);
    }
}
