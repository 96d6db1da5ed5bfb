//! Receding-horizon tracking controller.
//!
//! Multiple shooting with RK4 intervals and one Gauss-Newton step per tick
//! (real-time iteration). The linearized problem is condensed onto the input
//! increments and solved as a box-constrained QP. Terrestrial nodes carry
//! quadratic penalties on lateral body velocity and height.

use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::dynamics::{
    normalize_quaternion, rk4_raw, ControlInput, ExternalWrench, FullState, InputVector, Mode,
    PhysicalParams, StateVector, IDX_P, IDX_Q, IDX_V,
};
use crate::error::ControlError;
use crate::flatness::{ReferencePoint, ReferenceTrack};

const NX: usize = 13;
const NU: usize = 4;

type StateMatrix = SMatrix<f64, NX, NX>;
type InputMatrix = SMatrix<f64, NX, NU>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmpcConfig {
    pub horizon: usize,
    /// Shooting interval, s.
    pub dt: f64,
    pub w_position: [f64; 3],
    pub w_attitude: [f64; 4],
    pub w_velocity: [f64; 3],
    pub w_rate: [f64; 3],
    /// Input weights `[T, τx, τy, τz]`.
    pub w_input: [f64; 4],
    /// Weight of the terrestrial penalties on lateral velocity and height.
    pub mode_penalty: f64,
    /// Gauss-Newton iterations per tick.
    pub sqp_iterations: usize,
    /// Added to the condensed Hessian diagonal.
    pub regularization: f64,
    pub qp_max_iterations: usize,
    pub qp_tolerance: f64,
    /// Overrides the rotor-derived input bounds when set.
    pub input_min: Option<[f64; 4]>,
    pub input_max: Option<[f64; 4]>,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.07,
            w_position: [8000.0, 8000.0, 300.0],
            w_attitude: [400.0; 4],
            w_velocity: [100.0; 3],
            w_rate: [10.0, 10.0, 50.0],
            w_input: [0.5, 0.1, 0.1, 0.2],
            mode_penalty: 1e4,
            sqp_iterations: 1,
            regularization: 1e-8,
            qp_max_iterations: 50,
            qp_tolerance: 1e-9,
            input_min: None,
            input_max: None,
        }
    }
}

impl NmpcConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |m: &str| Err(ControlError::InvalidConfig(m.into()));
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        let weights = self
            .w_position
            .iter()
            .chain(&self.w_attitude)
            .chain(&self.w_velocity)
            .chain(&self.w_rate)
            .chain(&self.w_input)
            .chain([&self.mode_penalty, &self.regularization]);
        if weights.clone().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("weights must be finite and non-negative");
        }
        if self.sqp_iterations == 0 || self.qp_max_iterations == 0 {
            return bad("iteration counts must be positive");
        }
        if self.input_min.is_some() != self.input_max.is_some() {
            return bad("input_min and input_max must be given together");
        }
        if let (Some(lo), Some(hi)) = (self.input_min, self.input_max) {
            if lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
                return bad("input_min must be below input_max");
            }
        }
        Ok(())
    }

    fn state_weights(&self) -> StateVector {
        let mut w = StateVector::zeros();
        w.fixed_rows_mut::<3>(IDX_P).copy_from_slice(&self.w_position);
        w.fixed_rows_mut::<4>(IDX_Q).copy_from_slice(&self.w_attitude);
        w.fixed_rows_mut::<3>(IDX_V).copy_from_slice(&self.w_velocity);
        w.fixed_rows_mut::<3>(10).copy_from_slice(&self.w_rate);
        w
    }

    pub fn input_bounds(&self, params: &PhysicalParams) -> (InputVector, InputVector) {
        match (self.input_min, self.input_max) {
            (Some(lo), Some(hi)) => (InputVector::from(lo), InputVector::from(hi)),
            _ => params.input_bounds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSolution {
    /// `N` inputs, all inside the bounds.
    pub inputs: Vec<ControlInput>,
    /// `N + 1` states obtained by integrating `inputs` from `x0`.
    pub rollout: Vec<FullState>,
    pub kkt_residual: f64,
    pub qp_iterations: usize,
    pub degraded: bool,
    pub solve_time_ms: f64,
}

/// Extracts `n + 1` samples spaced `dt` apart starting at `t`, holding the
/// final reference past the end of the track.
pub fn reference_window(track: &ReferenceTrack, t: f64, n: usize, dt: f64) -> Vec<ReferencePoint> {
    (0..=n).map(|i| track.at(t + i as f64 * dt)).collect()
}

#[derive(Debug, Clone)]
pub struct BoxQpResult {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn projected_gradient_norm(x: &DVector<f64>, g: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    (0..x.len()).fold(0.0, |m, i| m.max((x[i] - (x[i] - g[i]).clamp(lo[i], hi[i])).abs()))
}

/// Minimizes `½xᵀHx + fᵀx` over `lo ≤ x ≤ hi` by projected Newton steps on the
/// free set. `H` must be symmetric positive definite.
pub fn solve_box_qp(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    max_iterations: usize,
    tolerance: f64,
) -> BoxQpResult {
    let n = f.len();
    let mut x = DVector::from_fn(n, |i, _| 0.0_f64.clamp(lo[i], hi[i]));
    let value = |x: &DVector<f64>| 0.5 * x.dot(&(h * x)) + f.dot(x);
    for it in 0..max_iterations {
        let g = h * &x + f;
        if projected_gradient_norm(&x, &g, lo, hi) <= tolerance {
            return BoxQpResult { x, iterations: it, converged: true };
        }
        let span = |i: usize| 1e-12 * (1.0 + hi[i].abs().max(lo[i].abs()));
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let at_lo = x[i] <= lo[i] + span(i) && g[i] > 0.0;
                let at_hi = x[i] >= hi[i] - span(i) && g[i] < 0.0;
                !(at_lo || at_hi)
            })
            .collect();
        let mut d = DVector::zeros(n);
        if !free.is_empty() {
            let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
            let gf = DVector::from_fn(free.len(), |a, _| -g[free[a]]);
            let Some(chol) = hf.cholesky() else {
                return BoxQpResult { x, iterations: it, converged: false };
            };
            let df = chol.solve(&gf);
            for (a, &i) in free.iter().enumerate() {
                d[i] = df[a];
            }
        }
        let q0 = value(&x);
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand = DVector::from_fn(n, |i, _| (x[i] + step * d[i]).clamp(lo[i], hi[i]));
            let dx = &cand - &x;
            if value(&cand) <= q0 + 1e-4 * g.dot(&dx) {
                moved = dx.amax() > 0.0;
                x = cand;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            let g = h * &x + f;
            let done = projected_gradient_norm(&x, &g, lo, hi) <= tolerance.max(1e-9);
            return BoxQpResult { x, iterations: it + 1, converged: done };
        }
    }
    let g = h * &x + f;
    let converged = projected_gradient_norm(&x, &g, lo, hi) <= tolerance.max(1e-9);
    BoxQpResult { x, iterations: max_iterations, converged }
}

/// Lateral body velocity `(q⁻¹ ⊙ v)·e2` of a flat state with its gradient.
fn lateral_velocity(x: &StateVector) -> (f64, StateVector) {
    let (w, a, b, c) = (x[IDX_Q], x[IDX_Q + 1], x[IDX_Q + 2], x[IDX_Q + 3]);
    let v = Vector3::new(x[IDX_V], x[IDX_V + 1], x[IDX_V + 2]);
    // Second column of the rotation matrix of an (unnormalized) quaternion.
    let y = Vector3::new(
        2.0 * (a * b - w * c),
        w * w - a * a + b * b - c * c,
        2.0 * (b * c + w * a),
    );
    let mut grad = StateVector::zeros();
    grad[IDX_Q] = 2.0 * (-c * v.x + w * v.y + a * v.z);
    grad[IDX_Q + 1] = 2.0 * (b * v.x - a * v.y + w * v.z);
    grad[IDX_Q + 2] = 2.0 * (a * v.x + b * v.y + c * v.z);
    grad[IDX_Q + 3] = 2.0 * (-w * v.x - c * v.y + b * v.z);
    grad.fixed_rows_mut::<3>(IDX_V).copy_from(&y);
    (y.dot(&v), grad)
}

fn reference_vector(r: &ReferencePoint, x: &StateVector) -> StateVector {
    let mut rv = r.state.to_vector();
    if rv.fixed_rows::<4>(IDX_Q).dot(&x.fixed_rows::<4>(IDX_Q)) < 0.0 {
        let q = -rv.fixed_rows::<4>(IDX_Q).into_owned();
        rv.fixed_rows_mut::<4>(IDX_Q).copy_from(&q);
    }
    rv
}

pub struct Nmpc {
    config: NmpcConfig,
    params: PhysicalParams,
    u_min: InputVector,
    u_max: InputVector,
    state_weights: StateVector,
    xs: Vec<StateVector>,
    us: Vec<InputVector>,
    warm: bool,
}

impl Nmpc {
    pub fn new(config: NmpcConfig, params: PhysicalParams) -> Result<Self, ControlError> {
        config.validate()?;
        params.validate().map_err(|e| ControlError::InvalidConfig(e.to_string()))?;
        let (u_min, u_max) = config.input_bounds(&params);
        Ok(Self {
            state_weights: config.state_weights(),
            config,
            params,
            u_min,
            u_max,
            xs: Vec::new(),
            us: Vec::new(),
            warm: false,
        })
    }

    pub fn config(&self) -> &NmpcConfig {
        &self.config
    }

    pub fn bounds(&self) -> (InputVector, InputVector) {
        (self.u_min, self.u_max)
    }

    pub fn reset(&mut self) {
        self.warm = false;
    }

    /// Advances the warm start by `elapsed` seconds, interpolating between
    /// shooting nodes and repeating the last one.
    pub fn shift(&mut self, elapsed: f64) {
        if !self.warm || elapsed <= 0.0 {
            return;
        }
        let n = self.config.horizon;
        let s = elapsed / self.config.dt;
        let state_at = |xs: &[StateVector], k: f64| {
            let i = (k.floor() as usize).min(n);
            let j = (i + 1).min(n);
            let w = (k - i as f64).clamp(0.0, 1.0);
            xs[i] * (1.0 - w) + xs[j] * w
        };
        let input_at = |us: &[InputVector], k: f64| {
            let i = (k.floor() as usize).min(n - 1);
            let j = (i + 1).min(n - 1);
            let w = (k - i as f64).clamp(0.0, 1.0);
            us[i] * (1.0 - w) + us[j] * w
        };
        let xs: Vec<StateVector> = (0..=n)
            .map(|i| {
                let mut x = state_at(&self.xs, i as f64 + s);
                normalize_quaternion(&mut x);
                x
            })
            .collect();
        let us = (0..n).map(|i| input_at(&self.us, i as f64 + s)).collect();
        self.xs = xs;
        self.us = us;
    }

    fn cold_start(&mut self, x0: &StateVector, window: &[ReferencePoint]) {
        let n = self.config.horizon;
        self.us = (0..n)
            .map(|i| {
                let u = window[i].input.to_vector();
                u.zip_zip_map(&self.u_min, &self.u_max, |v, l, h| v.clamp(l, h))
            })
            .collect();
        self.xs = Vec::with_capacity(n + 1);
        self.xs.push(*x0);
        for i in 0..n {
            let mut next = self.step_model(&self.xs[i], &self.us[i], window[i].mode());
            normalize_quaternion(&mut next);
            self.xs.push(next);
        }
        self.warm = true;
    }

    fn step_model(&self, x: &StateVector, u: &InputVector, mode: Mode) -> StateVector {
        rk4_raw(x, [u, u, u], mode, &self.params, &ExternalWrench::default(), false, self.config.dt)
    }

    fn linearize(&self, x: &StateVector, u: &InputVector, mode: Mode) -> (StateVector, StateMatrix, InputMatrix) {
        let f0 = self.step_model(x, u, mode);
        let mut a = StateMatrix::zeros();
        let mut b = InputMatrix::zeros();
        for j in 0..NX {
            let h = 1e-6 * (1.0 + x[j].abs());
            let mut xp = *x;
            xp[j] += h;
            a.set_column(j, &((self.step_model(&xp, u, mode) - f0) / h));
        }
        for j in 0..NU {
            let h = 1e-6 * (1.0 + u[j].abs());
            let mut up = *u;
            up[j] += h;
            b.set_column(j, &((self.step_model(x, &up, mode) - f0) / h));
        }
        (f0, a, b)
    }

    /// Solves the tracking problem from `x0` over a window of `N + 1`
    /// reference points, warm-started from the current internal guess.
    pub fn solve(&mut self, x0: &FullState, window: &[ReferencePoint]) -> Result<OcpSolution, ControlError> {
        let start = Instant::now();
        if !x0.is_finite() {
            return Err(ControlError::NonFiniteState);
        }
        let n = self.config.horizon;
        if window.is_empty() {
            return Err(ControlError::EmptyReference);
        }
        if window.len() != n + 1 {
            return Err(ControlError::InvalidConfig(format!(
                "reference window has {} points, expected {}",
                window.len(),
                n + 1
            )));
        }
        let x0v = x0.to_vector();
        if !self.warm || self.xs.len() != n + 1 {
            self.cold_start(&x0v, window);
        }
        let backup = (self.xs.clone(), self.us.clone());
        let mut kkt = 0.0;
        let mut qp_iterations = 0;
        let mut degraded = false;
        for _ in 0..self.config.sqp_iterations {
            match self.gauss_newton_step(&x0v, window) {
                Some((res, iters)) => {
                    kkt = res;
                    qp_iterations += iters;
                }
                None => {
                    degraded = true;
                    break;
                }
            }
        }
        if degraded {
            self.xs = backup.0;
            self.us = backup.1;
        }
        let inputs: Vec<ControlInput> = self
            .us
            .iter()
            .map(|u| ControlInput::from_vector(&u.zip_zip_map(&self.u_min, &self.u_max, |v, l, h| v.clamp(l, h))))
            .collect();
        let mut rollout = Vec::with_capacity(n + 1);
        let mut x = x0v;
        rollout.push(*x0);
        for (i, u) in inputs.iter().enumerate() {
            x = self.step_model(&x, &u.to_vector(), window[i].mode());
            rollout.push(FullState::from_vector(&x));
        }
        Ok(OcpSolution {
            inputs,
            rollout,
            kkt_residual: kkt,
            qp_iterations,
            degraded,
            solve_time_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// One condensed Gauss-Newton step. Returns the residual at the
    /// linearization point and the QP iteration count, or `None` on failure.
    fn gauss_newton_step(&mut self, x0: &StateVector, window: &[ReferencePoint]) -> Option<(f64, usize)> {
        let n = self.config.horizon;
        let nv = NU * n;
        let w_u = InputVector::from(self.config.w_input);
        let mu = self.config.mode_penalty;

        let mut a_mats = Vec::with_capacity(n);
        let mut b_mats = Vec::with_capacity(n);
        let mut gaps = Vec::with_capacity(n);
        for i in 0..n {
            let (f, a, b) = self.linearize(&self.xs[i], &self.us[i], window[i].mode());
            gaps.push(f - self.xs[i + 1]);
            a_mats.push(a);
            b_mats.push(b);
        }

        // Γ maps input increments to state increments at nodes 1..=N and c is
        // the free response to the initial mismatch and the gaps.
        let mut gamma = DMatrix::<f64>::zeros(NX * n, nv);
        let mut c = DVector::<f64>::zeros(NX * n);
        let mut prev_c: StateVector = x0 - self.xs[0];
        for i in 0..n {
            let ci = a_mats[i] * prev_c + gaps[i];
            c.fixed_rows_mut::<NX>(NX * i).copy_from(&ci);
            prev_c = ci;
            gamma.fixed_view_mut::<NX, NU>(NX * i, NU * i).copy_from(&b_mats[i]);
            if i > 0 {
                for j in 0..i {
                    let prev = gamma.fixed_view::<NX, NU>(NX * (i - 1), NU * j).into_owned();
                    gamma.fixed_view_mut::<NX, NU>(NX * i, NU * j).copy_from(&(a_mats[i] * prev));
                }
            }
        }

        let mut mg = DMatrix::<f64>::zeros(NX * n, nv);
        let mut grad_x = DVector::<f64>::zeros(NX * n);
        for i in 1..=n {
            let x = &self.xs[i];
            let r = reference_vector(&window[i], x);
            let mut m = StateMatrix::from_diagonal(&self.state_weights);
            let mut g = self.state_weights.component_mul(&(x - r));
            if window[i].mode() == Mode::Terrestrial && mu > 0.0 {
                let (lat, jl) = lateral_velocity(x);
                m += jl * jl.transpose() * mu;
                g += jl * (mu * lat);
                m[(2, 2)] += mu;
                g[2] += mu * x[2];
            }
            let row = NX * (i - 1);
            let cols = NU * i;
            let block = m * gamma.view((row, 0), (NX, cols));
            mg.view_mut((row, 0), (NX, cols)).copy_from(&block);
            let ci: StateVector = c.fixed_rows::<NX>(row).into_owned();
            grad_x.fixed_rows_mut::<NX>(row).copy_from(&(m * ci + g));
        }
        let mut h = gamma.tr_mul(&mg);
        let mut f = gamma.tr_mul(&grad_x);
        let mut lo = DVector::zeros(nv);
        let mut hi = DVector::zeros(nv);
        for i in 0..n {
            let du = self.us[i] - window[i].input.to_vector();
            for k in 0..NU {
                let j = NU * i + k;
                h[(j, j)] += w_u[k] + self.config.regularization;
                f[j] += w_u[k] * du[k];
                lo[j] = self.u_min[k] - self.us[i][k];
                hi[j] = self.u_max[k] - self.us[i][k];
            }
        }
        h = (&h + h.transpose()) * 0.5;
        if h.iter().chain(f.iter()).any(|v| !v.is_finite()) {
            return None;
        }
        let zero = DVector::from_fn(nv, |i, _| 0.0_f64.clamp(lo[i], hi[i]));
        let gap_norm = gaps.iter().fold((x0 - self.xs[0]).amax(), |m, d| m.max(d.amax()));
        // Stationarity of the linearized problem at zero increment: gradient
        // components that point into the feasible box.
        let g0 = &h * &zero + &f;
        let stationarity = (0..nv).fold(0.0_f64, |m, j| {
            let r = if zero[j] <= lo[j] { g0[j].min(0.0) } else if zero[j] >= hi[j] { g0[j].max(0.0) } else { g0[j] };
            m.max(r.abs())
        });
        let residual = stationarity + gap_norm;

        let qp = solve_box_qp(&h, &f, &lo, &hi, self.config.qp_max_iterations, self.config.qp_tolerance);
        if !qp.x.iter().all(|v| v.is_finite()) {
            return None;
        }
        if !qp.converged && qp.iterations == 0 {
            return None;
        }
        let mut dx: StateVector = x0 - self.xs[0];
        self.xs[0] = *x0;
        for i in 0..n {
            let du: SVector<f64, NU> = qp.x.fixed_rows::<NU>(NU * i).into_owned();
            let next = a_mats[i] * dx + b_mats[i] * du + gaps[i];
            self.us[i] = (self.us[i] + du).zip_zip_map(&self.u_min, &self.u_max, |v, l, h| v.clamp(l, h));
            self.xs[i + 1] += next;
            normalize_quaternion(&mut self.xs[i + 1]);
            dx = next;
        }
        Some((residual, qp.iterations))
    }
}

/// Receding-horizon wrapper: keeps the clock of the previous solve to shift
/// the warm start by the elapsed time.
pub struct RecedingHorizon {
    pub controller: Nmpc,
    last_time: Option<f64>,
}

impl RecedingHorizon {
    pub fn new(controller: Nmpc) -> Self {
        Self { controller, last_time: None }
    }

    pub fn step(&mut self, x0: &FullState, track: &ReferenceTrack, t: f64) -> Result<(ControlInput, OcpSolution), ControlError> {
        if track.is_empty() {
            return Err(ControlError::EmptyReference);
        }
        if let Some(prev) = self.last_time {
            self.controller.shift(t - prev);
        }
        self.last_time = Some(t);
        let cfg = self.controller.config();
        let window = reference_window(track, t, cfg.horizon, cfg.dt);
        let sol = self.controller.solve(x0, &window)?;
        Ok((sol.inputs[0], sol))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::step_plant;
    use nalgebra::UnitQuaternion;

    fn params() -> PhysicalParams {
        PhysicalParams::default()
    }

    fn hover_window(n: usize) -> Vec<ReferencePoint> {
        vec![ReferencePoint::hover(Vector3::new(0.0, 0.0, 1.0), 0.0, &params()); n + 1]
    }

    #[test]
    fn box_qp_matches_unconstrained_and_clamped_solutions() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let f = DVector::from_vec(vec![-1.0, -1.0]);
        let wide = DVector::from_element(2, 10.0);
        let r = solve_box_qp(&h, &f, &(-&wide), &wide, 20, 1e-12);
        let exact = h.clone().cholesky().unwrap().solve(&(-&f));
        assert!(r.converged);
        assert!((r.x - exact).amax() < 1e-10);

        // x1 ≤ 0.1: the constrained optimum of x0 is (1 − 0.05)/2.
        let hi = DVector::from_vec(vec![10.0, 0.1]);
        let r = solve_box_qp(&h, &f, &(-&wide), &hi, 20, 1e-12);
        assert!(r.converged);
        assert!((r.x[1] - 0.1).abs() < 1e-12);
        assert!((r.x[0] - 0.475).abs() < 1e-10);
    }

    #[test]
    fn lateral_velocity_gradient_matches_differences() {
        let mut x = FullState::at_rest(Vector3::zeros(), 0.4).to_vector();
        x[IDX_Q + 1] += 0.1;
        x[IDX_V] = 0.7;
        x[IDX_V + 1] = -0.3;
        x[IDX_V + 2] = 0.2;
        let (val, g) = lateral_velocity(&x);
        let st = FullState::from_vector(&x);
        let n2 = x.fixed_rows::<4>(IDX_Q).norm_squared();
        assert!((val / n2 - st.lateral_velocity()).abs() < 1e-12);
        for j in 0..NX {
            let mut xp = x;
            let mut xm = x;
            xp[j] += 1e-6;
            xm[j] -= 1e-6;
            let fd = (lateral_velocity(&xp).0 - lateral_velocity(&xm).0) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-8, "component {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn hover_is_a_fixed_point() {
        let p = params();
        let mut mpc = Nmpc::new(NmpcConfig::default(), p).unwrap();
        let w = hover_window(20);
        for _ in 0..3 {
            let sol = mpc.solve(&w[0].state, &w).unwrap();
            assert!(!sol.degraded);
            for u in &sol.inputs {
                assert!((u.thrust - p.hover_thrust()).abs() < 1e-3);
                assert!(u.torque.norm() < 1e-3);
            }
        }
    }

    #[test]
    fn inputs_stay_within_bounds() {
        let p = params();
        let mut mpc = Nmpc::new(NmpcConfig::default(), p).unwrap();
        let (lo, hi) = mpc.bounds();
        let w = hover_window(20);
        let mut x0 = w[0].state;
        x0.position += Vector3::new(3.0, -2.0, -0.8);
        x0.attitude = UnitQuaternion::from_euler_angles(0.6, -0.4, 1.0);
        let sol = mpc.solve(&x0, &w).unwrap();
        for u in &sol.inputs {
            let v = u.to_vector();
            for k in 0..4 {
                assert!(v[k] >= lo[k] && v[k] <= hi[k], "{v:?}");
            }
        }
        assert_eq!(sol.rollout.len(), 21);
    }

    #[test]
    fn offset_hover_converges_in_closed_loop() {
        let p = params();
        let mut mpc = Nmpc::new(NmpcConfig::default(), p).unwrap();
        let target = Vector3::new(0.0, 0.0, 1.0);
        let track = ReferenceTrack::constant(ReferencePoint::hover(target, 0.0, &p));
        let mut rh = RecedingHorizon::new(Nmpc::new(NmpcConfig::default(), p).unwrap());
        let mut x = FullState::at_rest(target + Vector3::new(0.1, 0.0, 0.0), 0.0);
        let first = {
            let w = reference_window(&track, 0.0, 20, 0.07);
            mpc.solve(&x, &w).unwrap().inputs[0]
        };
        // Reducing a +x error needs a negative pitch (torque about −y).
        assert!(first.torque.y < 0.0, "{first:?}");
        let dt = 5e-3;
        for k in 0..400 {
            let (u, _) = rh.step(&x, &track, k as f64 * dt).unwrap();
            x = step_plant(&x, [&u, &u, &u], Mode::Aerial, &p, &ExternalWrench::default(), dt).unwrap();
        }
        assert!((x.position - target).norm() < 1e-3, "{:?}", x.position);
    }

    #[test]
    fn terrestrial_window_keeps_rollout_on_ground() {
        let p = params();
        let mut mpc = Nmpc::new(NmpcConfig::default(), p).unwrap();
        let window: Vec<ReferencePoint> = (0..=20)
            .map(|i| {
                let mut r = ReferencePoint::ground_rest(Vector3::new(0.5 * 0.07 * i as f64, 0.0, 0.0), 0.0, &p);
                r.state.velocity.x = 0.5;
                r
            })
            .collect();
        let mut x0 = window[0].state;
        x0.position.y = 0.2;
        let sol = mpc.solve(&x0, &window).unwrap();
        for s in &sol.rollout {
            assert!(s.position.z.abs() <= 1e-3, "{}", s.position.z);
        }
    }

    #[test]
    fn warm_start_does_not_increase_residual() {
        let p = params();
        let mut mpc = Nmpc::new(NmpcConfig::default(), p).unwrap();
        let w = hover_window(20);
        let mut x0 = w[0].state;
        x0.position.x += 0.3;
        x0.velocity.y = 0.4;
        let first = mpc.solve(&x0, &w).unwrap();
        let second = mpc.solve(&x0, &w).unwrap();
        assert!(second.kkt_residual <= first.kkt_residual, "{} > {}", second.kkt_residual, first.kkt_residual);
    }

    #[test]
    fn window_pads_with_final_reference() {
        let p = params();
        let track = ReferenceTrack::constant(ReferencePoint::hover(Vector3::new(1.0, 2.0, 3.0), 0.0, &p));
        let w = reference_window(&track, 5.0, 4, 0.1);
        assert_eq!(w.len(), 5);
        assert!(w.iter().all(|r| r.state.position == Vector3::new(1.0, 2.0, 3.0)));
    }

    #[test]
    fn rejects_non_finite_state_and_bad_config() {
        let mut mpc = Nmpc::new(NmpcConfig::default(), params()).unwrap();
        let w = hover_window(20);
        let mut x0 = w[0].state;
        x0.position.x = f64::NAN;
        assert_eq!(mpc.solve(&x0, &w).unwrap_err(), ControlError::NonFiniteState);
        let cfg = NmpcConfig { horizon: 0, ..Default::default() };
        assert!(Nmpc::new(cfg, params()).is_err());
    }
}
