//! Flat-output to full-state maps for both locomotion modes.
//!
//! Aerial flight uses the usual quadrotor construction with position and yaw
//! as flat output. On the ground the thrust is held at a constant reference
//! value and the pitch absorbs the longitudinal acceleration; the normal force
//! takes up whatever vertical load the tilted thrust leaves. In both modes the
//! heading follows the horizontal velocity.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::dynamics::{
    ControlInput, FullState, GroundContact, Mode, PhysicalParams, StateVector, step_plant,
    ExternalWrench,
};
use crate::error::FlatnessError;

/// Horizontal speed below which the heading is not defined by the velocity.
pub const YAW_SPEED_EPS: f64 = 1e-3;
/// Time step of the difference quotient used for ω̇ in torque recovery.
pub const OMEGA_DOT_STEP: f64 = 1e-4;

/// A position trajectory with per-time locomotion mode.
pub trait FlatOutput {
    fn duration(&self) -> f64;
    /// Derivative of the position of the given order at time `t`.
    fn derivative(&self, t: f64, order: usize) -> Vector3<f64>;
    fn mode_at(&self, t: f64) -> Mode;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatSample {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
    pub j: Vector3<f64>,
    pub mode: Mode,
    /// Motion direction, +1 forward.
    pub eta: f64,
    pub psi: f64,
    pub dpsi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub state: FullState,
    pub input: ControlInput,
    pub contact: GroundContact,
}

impl ReferencePoint {
    pub fn mode(&self) -> Mode {
        self.contact.mode
    }

    pub fn hover(position: Vector3<f64>, yaw: f64, params: &PhysicalParams) -> Self {
        Self {
            state: FullState::at_rest(position, yaw),
            input: ControlInput::hover(params),
            contact: GroundContact::aerial(),
        }
    }

    pub fn ground_rest(position: Vector3<f64>, yaw: f64, params: &PhysicalParams) -> Self {
        Self {
            state: FullState::at_rest(Vector3::new(position.x, position.y, 0.0), yaw),
            input: ControlInput::zero(),
            contact: GroundContact {
                mode: Mode::Terrestrial,
                normal_force: params.mass * params.gravity,
            },
        }
    }
}

/// Caller-owned heading memory for samples where the velocity is too slow to
/// define a heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YawContext {
    pub last: f64,
}

impl YawContext {
    pub fn new(initial_yaw: f64) -> Self {
        Self { last: initial_yaw }
    }

    /// Heading and heading rate for a velocity/acceleration pair, holding the
    /// last defined heading when the horizontal speed is below threshold.
    pub fn resolve(&mut self, v: &Vector3<f64>, a: &Vector3<f64>, eta: f64) -> (f64, f64) {
        match yaw_from_velocity(v, eta) {
            Ok(psi) => {
                self.last = psi;
                let s2 = v.x * v.x + v.y * v.y;
                (psi, (v.x * a.y - v.y * a.x) / s2)
            }
            Err(_) => (self.last, 0.0),
        }
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
    if w <= -std::f64::consts::PI { w + 2.0 * std::f64::consts::PI } else { w }
}

pub fn yaw_from_velocity(v: &Vector3<f64>, eta: f64) -> Result<f64, FlatnessError> {
    let speed = v.x.hypot(v.y);
    if speed < YAW_SPEED_EPS {
        return Err(FlatnessError::YawUndefined { speed });
    }
    Ok(wrap_angle((eta * v.y).atan2(eta * v.x)))
}

/// Samples position derivatives of `traj` at `t` and resolves the heading.
pub fn flat_sample<F: FlatOutput + ?Sized>(traj: &F, t: f64, yaw: &mut YawContext) -> FlatSample {
    let mode = traj.mode_at(t);
    let mut p = traj.derivative(t, 0);
    let mut v = traj.derivative(t, 1);
    let mut a = traj.derivative(t, 2);
    let mut j = traj.derivative(t, 3);
    if mode == Mode::Terrestrial {
        p.z = 0.0;
        v.z = 0.0;
        a.z = 0.0;
        j.z = 0.0;
    }
    let (psi, dpsi) = yaw.resolve(&v, &a, 1.0);
    FlatSample { p, v, a, j, mode, eta: 1.0, psi, dpsi }
}

/// Body rates from the attitude, the time derivative of z_B and the heading rate.
fn body_rates(rot: &Matrix3<f64>, dz: &Vector3<f64>, psi: f64, dpsi: f64) -> Vector3<f64> {
    let x_b = rot.column(0).into_owned();
    let y_b = rot.column(1).into_owned();
    let z_b = rot.column(2).into_owned();
    let x_c = Vector3::new(psi.cos(), psi.sin(), 0.0);
    let y_c = Vector3::new(-psi.sin(), psi.cos(), 0.0);
    let n = z_b.cross(&x_c);
    let dn = dz.cross(&x_c) + z_b.cross(&y_c) * dpsi;
    // r = −x_B·ẏ_B and x_B ⟂ n, so only the component of ṅ along x_B survives.
    let r = -x_b.dot(&dn) / n.norm();
    Vector3::new(-dz.dot(&y_b), dz.dot(&x_b), r)
}

fn frame_from_thrust_axis(z_b: &Vector3<f64>, psi: f64) -> Matrix3<f64> {
    let x_c = Vector3::new(psi.cos(), psi.sin(), 0.0);
    let y_b = z_b.cross(&x_c).normalize();
    let x_b = y_b.cross(z_b);
    Matrix3::from_columns(&[x_b, y_b, *z_b])
}

fn to_reference(
    s: &FlatSample,
    rot: Matrix3<f64>,
    omega: Vector3<f64>,
    thrust: f64,
    contact: GroundContact,
    params: &PhysicalParams,
) -> ReferencePoint {
    let attitude = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
    ReferencePoint {
        state: FullState { position: s.p, attitude, velocity: s.v, body_rate: omega },
        input: ControlInput::new(thrust, torque_for(&omega, &Vector3::zeros(), params)),
        contact,
    }
}

/// Ground map. The returned torque assumes ω̇ = 0; see [`reference_at`] for
/// the full input.
pub fn terrestrial_flat_to_state(
    s: &FlatSample,
    t_ref: f64,
    params: &PhysicalParams,
) -> Result<ReferencePoint, FlatnessError> {
    let m = params.mass;
    let (sp, cp) = s.psi.sin_cos();
    let x_c = Vector3::new(cp, sp, 0.0);
    let y_c = Vector3::new(-sp, cp, 0.0);
    // Longitudinal acceleration, written as the projection on the heading so
    // it stays defined when starting from rest.
    let a_l = s.eta * x_c.dot(&s.a);
    let da_l = s.eta * (x_c.dot(&s.j) + s.dpsi * y_c.dot(&s.a));
    let required = m * a_l;
    if required.abs() > t_ref {
        return Err(FlatnessError::InfeasiblePitch { required: required.abs(), available: t_ref });
    }
    let sin_t = required / t_ref;
    let cos_t = (1.0 - sin_t * sin_t).sqrt();
    let dtheta = if cos_t > 1e-9 { m * da_l / (t_ref * cos_t) } else { 0.0 };
    let z_b = Vector3::new(sin_t * cp, sin_t * sp, cos_t);
    let dz = Vector3::new(cos_t * cp, cos_t * sp, -sin_t) * dtheta + y_c * (sin_t * s.dpsi);
    let rot = frame_from_thrust_axis(&z_b, s.psi);
    let omega = body_rates(&rot, &dz, s.psi, s.dpsi);
    let contact = GroundContact {
        mode: Mode::Terrestrial,
        normal_force: m * params.gravity - t_ref * cos_t,
    };
    Ok(to_reference(s, rot, omega, t_ref, contact, params))
}

/// Air map. The returned torque assumes ω̇ = 0; see [`reference_at`] for the
/// full input.
pub fn aerial_flat_to_state(
    s: &FlatSample,
    params: &PhysicalParams,
) -> Result<ReferencePoint, FlatnessError> {
    let acc = s.a + Vector3::new(0.0, 0.0, params.gravity);
    let mag = acc.norm();
    if mag < 0.1 * params.gravity {
        return Err(FlatnessError::SingularThrust { magnitude: mag });
    }
    let z_b = acc / mag;
    let dz = (s.j - z_b * z_b.dot(&s.j)) / mag;
    let rot = frame_from_thrust_axis(&z_b, s.psi);
    let omega = body_rates(&rot, &dz, s.psi, s.dpsi);
    Ok(to_reference(s, rot, omega, params.mass * mag, GroundContact::aerial(), params))
}

pub fn flat_to_state(
    s: &FlatSample,
    t_ref: f64,
    params: &PhysicalParams,
) -> Result<ReferencePoint, FlatnessError> {
    match s.mode {
        Mode::Terrestrial => terrestrial_flat_to_state(s, t_ref, params),
        Mode::Aerial => aerial_flat_to_state(s, params),
    }
}

/// Body torque that realizes `omega_dot` at rate `omega`.
pub fn torque_for(omega: &Vector3<f64>, omega_dot: &Vector3<f64>, params: &PhysicalParams) -> Vector3<f64> {
    let j = params.inertia();
    j * omega_dot + omega.cross(&(j * omega))
}

fn omega_at<F: FlatOutput + ?Sized>(
    traj: &F,
    t: f64,
    yaw: &YawContext,
    t_ref: f64,
    params: &PhysicalParams,
) -> Result<Vector3<f64>, FlatnessError> {
    let mut ctx = *yaw;
    let s = flat_sample(traj, t, &mut ctx);
    Ok(flat_to_state(&s, t_ref, params)?.state.body_rate)
}

/// Full reference at time `t` including the torque. ω̇ comes from a
/// difference quotient of the recovered body rate over a short step that
/// never straddles a mode switch or leaves the trajectory.
pub fn reference_at<F: FlatOutput + ?Sized>(
    traj: &F,
    t: f64,
    yaw: &mut YawContext,
    t_ref: f64,
    params: &PhysicalParams,
) -> Result<ReferencePoint, FlatnessError> {
    let before = *yaw;
    let s = flat_sample(traj, t, yaw);
    let mut r = flat_to_state(&s, t_ref, params)?;
    let h = OMEGA_DOT_STEP;
    let total = traj.duration();
    let same = |tt: f64| tt >= 0.0 && tt <= total && traj.mode_at(tt) == s.mode;
    let w0 = r.state.body_rate;
    let omega_dot = if same(t - h) && same(t + h) {
        (omega_at(traj, t + h, &before, t_ref, params)? - omega_at(traj, t - h, &before, t_ref, params)?)
            / (2.0 * h)
    } else if same(t + 2.0 * h) {
        let w1 = omega_at(traj, t + h, &before, t_ref, params)?;
        let w2 = omega_at(traj, t + 2.0 * h, &before, t_ref, params)?;
        (-3.0 * w0 + 4.0 * w1 - w2) / (2.0 * h)
    } else if same(t - 2.0 * h) {
        let w1 = omega_at(traj, t - h, &before, t_ref, params)?;
        let w2 = omega_at(traj, t - 2.0 * h, &before, t_ref, params)?;
        (3.0 * w0 - 4.0 * w1 + w2) / (2.0 * h)
    } else {
        Vector3::zeros()
    };
    r.input.torque = torque_for(&w0, &omega_dot, params);
    Ok(r)
}

/// Uniformly sampled reference sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrack {
    pub dt: f64,
    pub times: Vec<f64>,
    pub points: Vec<ReferencePoint>,
}

impl ReferenceTrack {
    /// Single-sample track that holds `point` forever.
    pub fn constant(point: ReferencePoint) -> Self {
        Self { dt: 1.0, times: vec![0.0], points: vec![point] }
    }

    pub fn duration(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Linear interpolation in time (normalized quaternion blend for the
    /// attitude); holds the end points outside the sampled range. The mode is
    /// taken from the earlier of the two bracketing samples.
    pub fn at(&self, t: f64) -> ReferencePoint {
        let n = self.points.len();
        assert!(n > 0, "empty reference track");
        if n == 1 || t <= self.times[0] {
            return self.points[0];
        }
        if t >= self.times[n - 1] {
            return self.points[n - 1];
        }
        let mut i = ((t - self.times[0]) / self.dt).floor() as usize;
        i = i.min(n - 2);
        while i > 0 && self.times[i] > t {
            i -= 1;
        }
        while i + 2 < n && self.times[i + 1] <= t {
            i += 1;
        }
        let span = self.times[i + 1] - self.times[i];
        let w = if span > 0.0 { (t - self.times[i]) / span } else { 0.0 };
        interpolate(&self.points[i], &self.points[i + 1], w)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz",
            "thrust", "tau_x", "tau_y", "tau_z", "normal_force", "terrestrial",
        ])?;
        for (t, r) in self.times.iter().zip(&self.points) {
            let x = r.state.to_vector();
            let mut row: Vec<String> = vec![t.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            row.extend(r.input.to_vector().iter().map(|v| v.to_string()));
            row.push(r.contact.normal_force.to_string());
            row.push(r.contact.mode.label().to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn interpolate(a: &ReferencePoint, b: &ReferencePoint, w: f64) -> ReferencePoint {
    let xa = a.state.to_vector();
    let mut xb = b.state.to_vector();
    let qa = xa.fixed_rows::<4>(3);
    if qa.dot(&xb.fixed_rows::<4>(3)) < 0.0 {
        let flipped = -xb.fixed_rows::<4>(3);
        xb.fixed_rows_mut::<4>(3).copy_from(&flipped);
    }
    let x: StateVector = xa * (1.0 - w) + xb * w;
    let u = a.input.to_vector() * (1.0 - w) + b.input.to_vector() * w;
    ReferencePoint {
        state: FullState::from_vector(&x),
        input: ControlInput::from_vector(&u),
        contact: GroundContact {
            mode: a.contact.mode,
            normal_force: a.contact.normal_force * (1.0 - w) + b.contact.normal_force * w,
        },
    }
}

/// Samples references every `dt` from 0 to the trajectory end. The last
/// sample sits exactly at the end, so there are ceil(T/dt) + 1 samples.
pub fn sample_references<F: FlatOutput + ?Sized>(
    traj: &F,
    dt: f64,
    t_ref: f64,
    initial_yaw: f64,
    params: &PhysicalParams,
) -> Result<ReferenceTrack, FlatnessError> {
    let total = traj.duration();
    let n = (total / dt - 1e-9).ceil().max(0.0) as usize + 1;
    let mut yaw = YawContext::new(initial_yaw);
    let mut times = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    for k in 0..n {
        let t = (k as f64 * dt).min(total);
        let r = reference_at(traj, t, &mut yaw, t_ref, params)
            .map_err(|e| FlatnessError::AtSample { index: k, source: Box::new(e) })?;
        times.push(t);
        points.push(r);
    }
    Ok(ReferenceTrack { dt, times, points })
}

/// Integrates the plant open loop with the recovered inputs from the
/// recovered initial state and returns the largest position deviation from
/// the flat trajectory.
pub fn flatness_roundtrip_check<F: FlatOutput + ?Sized>(
    traj: &F,
    dt: f64,
    t_ref: f64,
    initial_yaw: f64,
    params: &PhysicalParams,
) -> Result<f64, FlatnessError> {
    let total = traj.duration();
    let steps = (total / dt).round() as usize;
    let mut yaw = YawContext::new(initial_yaw);
    let first = reference_at(traj, 0.0, &mut yaw, t_ref, params)?;
    let mut x = first.state;
    let mut u0 = first.input;
    let mut max_err: f64 = 0.0;
    for k in 0..steps {
        let t = k as f64 * dt;
        let mut mid_ctx = yaw;
        let um = reference_at(traj, t + 0.5 * dt, &mut mid_ctx, t_ref, params)?.input;
        let end = reference_at(traj, t + dt, &mut yaw, t_ref, params)?;
        let mode = traj.mode_at(t + 0.5 * dt);
        x = step_plant(&x, [&u0, &um, &end.input], mode, params, &ExternalWrench::default(), dt)?;
        u0 = end.input;
        max_err = max_err.max((x.position - traj.derivative(t + dt, 0)).norm());
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Sum of sinusoids per axis plus a linear drift.
    struct Wave {
        drift: Vector3<f64>,
        amp: [Vector3<f64>; 2],
        freq: [f64; 2],
        mode: Mode,
        duration: f64,
    }

    impl FlatOutput for Wave {
        fn duration(&self) -> f64 {
            self.duration
        }
        fn derivative(&self, t: f64, order: usize) -> Vector3<f64> {
            let mut out = match order {
                0 => self.drift * t,
                1 => self.drift,
                _ => Vector3::zeros(),
            };
            if order == 0 {
                out.z += 1.0;
            }
            for (amp, &w) in self.amp.iter().zip(&self.freq) {
                let phase = (w * t) + order as f64 * std::f64::consts::FRAC_PI_2;
                out += amp * (w.powi(order as i32) * phase.sin());
            }
            if self.mode == Mode::Terrestrial {
                out.z = 0.0;
            }
            out
        }
        fn mode_at(&self, _t: f64) -> Mode {
            self.mode
        }
    }

    fn random_wave(rng: &mut ChaCha8Rng, mode: Mode) -> Wave {
        let heading: f64 = rng.random_range(-3.0..3.0);
        let speed = rng.random_range(1.0..2.0);
        let mut amp = [Vector3::zeros(); 2];
        for a in &mut amp {
            *a = Vector3::new(rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15), rng.random_range(-0.2..0.2));
        }
        Wave {
            drift: Vector3::new(speed * heading.cos(), speed * heading.sin(), 0.0),
            amp,
            freq: [rng.random_range(1.0..2.5), rng.random_range(0.5..1.5)],
            mode,
            duration: 2.0,
        }
    }

    fn sample(p: Vector3<f64>, v: Vector3<f64>, a: Vector3<f64>, j: Vector3<f64>, mode: Mode) -> FlatSample {
        let mut ctx = YawContext::new(0.0);
        let (psi, dpsi) = ctx.resolve(&v, &a, 1.0);
        FlatSample { p, v, a, j, mode, eta: 1.0, psi, dpsi }
    }

    #[test]
    fn yaw_examples() {
        assert_relative_eq!(yaw_from_velocity(&Vector3::new(1.0, 0.0, 0.0), 1.0).unwrap(), 0.0);
        assert_relative_eq!(
            yaw_from_velocity(&Vector3::new(0.0, 2.0, 0.0), 1.0).unwrap(),
            std::f64::consts::FRAC_PI_2
        );
        assert_relative_eq!(
            yaw_from_velocity(&Vector3::new(1.0, 0.0, 0.0), -1.0).unwrap(),
            std::f64::consts::PI
        );
        assert!(matches!(
            yaw_from_velocity(&Vector3::new(1e-4, 0.0, 3.0), 1.0),
            Err(FlatnessError::YawUndefined { .. })
        ));
    }

    #[test]
    fn cruise_has_level_attitude() {
        let p = PhysicalParams::default();
        let t_ref = 0.45 * p.hover_thrust();
        let s = sample(Vector3::zeros(), Vector3::new(0.0, 1.5, 0.0), Vector3::zeros(), Vector3::zeros(), Mode::Terrestrial);
        let r = terrestrial_flat_to_state(&s, t_ref, &p).unwrap();
        let expect = UnitQuaternion::from_euler_angles(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        assert!(r.state.attitude.angle_to(&expect) < 1e-12);
        assert!(r.state.body_rate.norm() < 1e-12);
        assert_relative_eq!(r.contact.normal_force, p.hover_thrust() - t_ref, epsilon = 1e-12);
    }

    #[test]
    fn straight_acceleration_pitch() {
        let p = PhysicalParams::default();
        let s = sample(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::zeros(), Mode::Terrestrial);
        let r = terrestrial_flat_to_state(&s, 4.0, &p).unwrap();
        let z_b = r.state.attitude * Vector3::z();
        assert_relative_eq!(z_b.x, 0.2275, epsilon = 1e-12);
        assert_relative_eq!(z_b.x.asin(), 0.2296, epsilon = 1e-4);
        let s = sample(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), Vector3::new(5.0, 0.0, 0.0), Vector3::zeros(), Mode::Terrestrial);
        assert!(matches!(terrestrial_flat_to_state(&s, 4.0, &p), Err(FlatnessError::InfeasiblePitch { .. })));
    }

    #[test]
    fn circular_drive_yaw_rate() {
        let p = PhysicalParams::default();
        let (r0, w) = (2.0, 0.6);
        let circle = |t: f64| {
            let th = w * t;
            sample(
                Vector3::new(r0 * th.cos(), r0 * th.sin(), 0.0),
                Vector3::new(-r0 * w * th.sin(), r0 * w * th.cos(), 0.0),
                Vector3::new(-r0 * w * w * th.cos(), -r0 * w * w * th.sin(), 0.0),
                Vector3::new(r0 * w.powi(3) * th.sin(), -r0 * w.powi(3) * th.cos(), 0.0),
                Mode::Terrestrial,
            )
        };
        let t_ref = 0.45 * p.hover_thrust();
        for k in 0..10 {
            let t = k as f64 * 0.37;
            let ref_ = terrestrial_flat_to_state(&circle(t), t_ref, &p).unwrap();
            let z_b = ref_.state.attitude * Vector3::z();
            assert_relative_eq!(ref_.state.body_rate.z, w * z_b.z, epsilon = 1e-12);
            // Compare with the rate implied by neighbouring attitudes.
            let h = 1e-5;
            let qa = terrestrial_flat_to_state(&circle(t - h), t_ref, &p).unwrap().state.attitude;
            let qb = terrestrial_flat_to_state(&circle(t + h), t_ref, &p).unwrap().state.attitude;
            let fd = (qa.inverse() * qb).scaled_axis() / (2.0 * h);
            assert!((fd - ref_.state.body_rate).norm() < 1e-6);
        }
    }

    #[test]
    fn hover_sample() {
        let p = PhysicalParams::default();
        let s = sample(Vector3::new(0.0, 0.0, 1.0), Vector3::zeros(), Vector3::zeros(), Vector3::zeros(), Mode::Aerial);
        let r = aerial_flat_to_state(&s, &p).unwrap();
        assert!(r.state.attitude.angle() < 1e-12);
        assert_relative_eq!(r.input.thrust, 8.9271, epsilon = 1e-10);
        assert!(r.state.body_rate.norm() < 1e-12);
    }

    #[test]
    fn tilt_under_horizontal_acceleration() {
        let p = PhysicalParams::default();
        let s = sample(Vector3::zeros(), Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), Vector3::zeros(), Mode::Aerial);
        let r = aerial_flat_to_state(&s, &p).unwrap();
        let z_b = r.state.attitude * Vector3::z();
        assert_relative_eq!(z_b.y, 0.0, epsilon = 1e-15);
        assert_relative_eq!(z_b.x.atan2(z_b.z), (1.0f64 / 9.81).atan(), epsilon = 1e-12);
        assert_relative_eq!(r.state.attitude.angle(), 0.1016, epsilon = 1e-4);
    }

    #[test]
    fn vertical_jerk_gives_no_rate() {
        let p = PhysicalParams::default();
        let s = sample(Vector3::zeros(), Vector3::zeros(), Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), Mode::Aerial);
        let r = aerial_flat_to_state(&s, &p).unwrap();
        assert!(r.state.body_rate.norm() < 1e-15);
    }

    #[test]
    fn free_fall_is_singular() {
        let p = PhysicalParams::default();
        let s = sample(Vector3::zeros(), Vector3::zeros(), Vector3::new(0.0, 0.0, -9.5), Vector3::zeros(), Mode::Aerial);
        assert!(matches!(aerial_flat_to_state(&s, &p), Err(FlatnessError::SingularThrust { .. })));
    }

    #[test]
    fn rotations_are_proper() {
        let p = PhysicalParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v3 = |lo: f64, hi: f64| Vector3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi));
        for k in 0..1000 {
            let mode = if k % 2 == 0 { Mode::Aerial } else { Mode::Terrestrial };
            let (mut v, mut a, mut j) = (v3(-2.0, 2.0), v3(-2.0, 2.0), v3(-3.0, 3.0));
            if mode == Mode::Terrestrial {
                v.z = 0.0;
                a.z = 0.0;
                j.z = 0.0;
            }
            let s = sample(Vector3::zeros(), v, a, j, mode);
            let Ok(r) = flat_to_state(&s, 0.6 * p.hover_thrust(), &p) else { continue };
            let rot = r.state.attitude.to_rotation_matrix().into_inner();
            assert!((rot.determinant() - 1.0).abs() < 1e-9);
            assert!((rot.transpose() * rot - Matrix3::identity()).norm() < 1e-9);
            if mode == Mode::Terrestrial {
                // Zero roll: the body y axis stays horizontal.
                assert!(rot[(2, 1)].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rates_match_attitude_differences() {
        let p = PhysicalParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for mode in [Mode::Aerial, Mode::Terrestrial] {
            let w = random_wave(&mut rng, mode);
            let t_ref = 0.45 * p.hover_thrust();
            let att = |t: f64| {
                let mut c = YawContext::new(0.0);
                flat_to_state(&flat_sample(&w, t, &mut c), t_ref, &p).unwrap().state
            };
            let t = 0.9;
            let exact = att(t).body_rate;
            let err = |h: f64| {
                let fd = (att(t - h).attitude.inverse() * att(t + h).attitude).scaled_axis() / (2.0 * h);
                (fd - exact).norm()
            };
            let (e1, e2) = (err(1e-2), err(5e-3));
            assert!(e1 < 1e-3 && e1 / e2 > 3.0, "{mode:?}: {e1} {e2}");
        }
    }

    #[test]
    fn mode_switch_is_continuous() {
        struct Switch;
        impl FlatOutput for Switch {
            fn duration(&self) -> f64 {
                2.0
            }
            fn derivative(&self, t: f64, order: usize) -> Vector3<f64> {
                // Horizontal cruise that starts climbing after t = 1.
                let x = [t + 0.25 * t * t, 1.0 + 0.5 * t, 0.5, 0.0][order.min(3)];
                let d = t - 1.0;
                let z = if d <= 0.0 {
                    0.0
                } else {
                    [d.powi(4), 4.0 * d.powi(3), 12.0 * d * d, 24.0 * d][order.min(3)]
                };
                Vector3::new(x, 0.3 * x, z)
            }
            fn mode_at(&self, t: f64) -> Mode {
                if t < 1.0 { Mode::Terrestrial } else { Mode::Aerial }
            }
        }
        let p = PhysicalParams::default();
        let mut ctx = YawContext::new(0.0);
        let before = reference_at(&Switch, 1.0 - 1e-9, &mut ctx, 0.45 * p.hover_thrust(), &p).unwrap();
        let after = reference_at(&Switch, 1.0, &mut ctx, 0.45 * p.hover_thrust(), &p).unwrap();
        assert_eq!(before.mode(), Mode::Terrestrial);
        assert_eq!(after.mode(), Mode::Aerial);
        assert!((before.state.position - after.state.position).norm() < 1e-8);
        assert!((before.state.velocity - after.state.velocity).norm() < 1e-8);
        assert!((before.state.yaw() - after.state.yaw()).abs() < 1e-8);
    }

    #[test]
    fn hover_roundtrip() {
        struct Hover;
        impl FlatOutput for Hover {
            fn duration(&self) -> f64 {
                1.0
            }
            fn derivative(&self, _t: f64, order: usize) -> Vector3<f64> {
                if order == 0 { Vector3::new(1.0, 2.0, 3.0) } else { Vector3::zeros() }
            }
            fn mode_at(&self, _t: f64) -> Mode {
                Mode::Aerial
            }
        }
        let p = PhysicalParams::default();
        let err = flatness_roundtrip_check(&Hover, 1e-3, 4.0, 0.5, &p).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn wave_roundtrips() {
        let p = PhysicalParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in [Mode::Aerial, Mode::Terrestrial] {
            let w = random_wave(&mut rng, mode);
            let err = flatness_roundtrip_check(&w, 1e-3, 0.45 * p.hover_thrust(), 0.0, &p).unwrap();
            assert!(err < 1e-3, "{mode:?} {err}");
        }
    }

    #[test]
    fn sample_count_and_ground_invariants() {
        let p = PhysicalParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut w = random_wave(&mut rng, Mode::Terrestrial);
        w.duration = 1.0;
        let track = sample_references(&w, 0.07, 0.45 * p.hover_thrust(), 0.0, &p).unwrap();
        assert_eq!(track.len(), (1.0f64 / 0.07).ceil() as usize + 1);
        assert_eq!(*track.times.last().unwrap(), 1.0);
        for r in &track.points {
            assert_eq!(r.state.position.z, 0.0);
            assert!(r.state.lateral_velocity().abs() < 1e-9);
        }
        let mid = track.at(0.5 * (track.times[3] + track.times[4]));
        assert!(((mid.state.position - 0.5 * (track.points[3].state.position + track.points[4].state.position)).norm()) < 1e-12);
        let mut buf = Vec::new();
        track.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), track.len() + 1);
    }
}
