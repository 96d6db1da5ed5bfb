//! Unified rigid-body model shared by both locomotion modes.
//!
//! The vehicle is a quadrotor in an X configuration carrying a pair of
//! passive coaxial wheels. In the air it is an ordinary rigid body driven by
//! collective thrust and body torque. On the ground the same equations hold
//! with two extra constraint forces: a normal force that keeps the vertical
//! acceleration at zero and a lateral wheel force that prevents side slip.
//!
//! States are handled in two forms. [`FullState`] is the typed form used at
//! API boundaries; [`StateVector`] is the flat 13-vector
//! `[p, q(w,x,y,z), v, ω]` used by the integrator and the NMPC model.

use nalgebra::{Matrix3, Matrix4, Quaternion, SVector, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use std::f64::consts::SQRT_2;

use crate::error::DynamicsError;

pub const GRAVITY: f64 = 9.81;

/// Flat state layout `[p(3), q(4: w,x,y,z), v(3), ω(3)]`.
pub type StateVector = SVector<f64, 13>;
/// Flat input layout `[T, τx, τy, τz]`.
pub type InputVector = Vector4<f64>;

pub const IDX_P: usize = 0;
pub const IDX_Q: usize = 3;
pub const IDX_V: usize = 7;
pub const IDX_W: usize = 10;

const QUATERNION_TOLERANCE: f64 = 1e-6;

/// Physical parameters. Serialized with SI units throughout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalParams {
    /// kg
    pub mass: f64,
    /// Diagonal of the inertia matrix, kg·m².
    pub inertia_diag: [f64; 3],
    /// m
    pub arm_length: f64,
    pub thrust_coefficient: f64,
    pub torque_coefficient: f64,
    /// m/s²
    pub gravity: f64,
    /// Per-rotor thrust bounds, N.
    pub rotor_thrust_min: f64,
    pub rotor_thrust_max: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self {
            mass: 0.91,
            inertia_diag: [7.7e-3, 3.4e-3, 7.3e-3],
            arm_length: 0.23,
            thrust_coefficient: 1.7e-8,
            torque_coefficient: 3.7e-10,
            gravity: GRAVITY,
            rotor_thrust_min: 0.0,
            rotor_thrust_max: 4.5,
        }
    }
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |what: &str| Err(DynamicsError::InvalidParams(what.to_string()));
        if !(self.mass > 0.0) {
            return bad("mass must be positive");
        }
        if self.inertia_diag.iter().any(|&j| !(j > 0.0)) {
            return bad("inertia must be positive definite");
        }
        if !(self.arm_length > 0.0) {
            return bad("arm_length must be positive");
        }
        if !(self.thrust_coefficient > 0.0) || !(self.torque_coefficient > 0.0) {
            return bad("rotor coefficients must be positive");
        }
        if !(self.rotor_thrust_min >= 0.0) || !(self.rotor_thrust_max > self.rotor_thrust_min) {
            return bad("rotor thrust bounds must satisfy 0 <= min < max");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, DynamicsError> {
        let params: Self = serde_json::from_str(text)
            .map_err(|e| DynamicsError::InvalidParams(e.to_string()))?;
        params.validate()?;
        Ok(params)
    }

    pub fn inertia(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.inertia_diag))
    }

    pub fn inertia_inv(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(
            1.0 / self.inertia_diag[0],
            1.0 / self.inertia_diag[1],
            1.0 / self.inertia_diag[2],
        ))
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }

    /// Ratio c_m / c_t, the yaw-torque arm of a rotor.
    pub fn yaw_moment_ratio(&self) -> f64 {
        self.torque_coefficient / self.thrust_coefficient
    }

    /// X-configuration allocation matrix mapping rotor thrusts to `[T, τ]`.
    pub fn allocation_matrix(&self) -> Matrix4<f64> {
        let l = self.arm_length / SQRT_2;
        let k = self.yaw_moment_ratio();
        Matrix4::new(
            1.0, 1.0, 1.0, 1.0, //
            -l, l, l, -l, //
            -l, l, -l, l, //
            -k, -k, k, k,
        )
    }

    /// Box bounds on `[T, τx, τy, τz]` implied by the rotor limits.
    pub fn input_bounds(&self) -> (InputVector, InputVector) {
        let tau_xy = SQRT_2 * self.arm_length * self.rotor_thrust_max;
        let tau_z = 2.0 * self.yaw_moment_ratio() * self.rotor_thrust_max;
        (
            InputVector::new(4.0 * self.rotor_thrust_min, -tau_xy, -tau_xy, -tau_z),
            InputVector::new(4.0 * self.rotor_thrust_max, tau_xy, tau_xy, tau_z),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Terrestrial,
    Aerial,
}

impl Mode {
    /// The μ_g flag: 1 on the ground, 0 in the air.
    pub fn ground_flag(self) -> f64 {
        match self {
            Mode::Terrestrial => 1.0,
            Mode::Aerial => 0.0,
        }
    }

    pub fn label(self) -> u8 {
        match self {
            Mode::Terrestrial => 1,
            Mode::Aerial => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundContact {
    pub mode: Mode,
    /// Normal force magnitude, N. Zero in the air.
    pub normal_force: f64,
}

impl GroundContact {
    pub fn aerial() -> Self {
        Self { mode: Mode::Aerial, normal_force: 0.0 }
    }

    pub fn terrestrial() -> Self {
        Self { mode: Mode::Terrestrial, normal_force: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub position: Vector3<f64>,
    pub attitude: UnitQuaternion<f64>,
    pub velocity: Vector3<f64>,
    pub body_rate: Vector3<f64>,
}

impl Default for FullState {
    fn default() -> Self {
        Self {
            position: Vector3::zeros(),
            attitude: UnitQuaternion::identity(),
            velocity: Vector3::zeros(),
            body_rate: Vector3::zeros(),
        }
    }
}

impl FullState {
    pub fn at_rest(position: Vector3<f64>, yaw: f64) -> Self {
        Self {
            position,
            attitude: UnitQuaternion::from_euler_angles(0.0, 0.0, yaw),
            ..Default::default()
        }
    }

    pub fn to_vector(&self) -> StateVector {
        let q = self.attitude.quaternion();
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(IDX_P).copy_from(&self.position);
        x[IDX_Q] = q.w;
        x[IDX_Q + 1] = q.i;
        x[IDX_Q + 2] = q.j;
        x[IDX_Q + 3] = q.k;
        x.fixed_rows_mut::<3>(IDX_V).copy_from(&self.velocity);
        x.fixed_rows_mut::<3>(IDX_W).copy_from(&self.body_rate);
        x
    }

    /// Builds a state from a flat vector, renormalizing the quaternion.
    pub fn from_vector(x: &StateVector) -> Self {
        Self {
            position: x.fixed_rows::<3>(IDX_P).into_owned(),
            attitude: UnitQuaternion::from_quaternion(quaternion_of(x)),
            velocity: x.fixed_rows::<3>(IDX_V).into_owned(),
            body_rate: x.fixed_rows::<3>(IDX_W).into_owned(),
        }
    }

    pub fn yaw(&self) -> f64 {
        heading_of(&self.attitude.to_rotation_matrix().into_inner())
    }

    /// Lateral body velocity `(q⁻¹ ⊙ v)·e2`.
    pub fn lateral_velocity(&self) -> f64 {
        (self.attitude.inverse() * self.velocity).y
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

pub fn quaternion_of(x: &StateVector) -> Quaternion<f64> {
    Quaternion::new(x[IDX_Q], x[IDX_Q + 1], x[IDX_Q + 2], x[IDX_Q + 3])
}

/// Heading angle of the body x axis projected onto the ground plane.
pub fn heading_of(rot: &Matrix3<f64>) -> f64 {
    rot[(1, 0)].atan2(rot[(0, 0)])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Collective thrust, N.
    pub thrust: f64,
    /// Body torque, N·m.
    pub torque: Vector3<f64>,
}

impl ControlInput {
    pub fn new(thrust: f64, torque: Vector3<f64>) -> Self {
        Self { thrust, torque }
    }

    pub fn zero() -> Self {
        Self::new(0.0, Vector3::zeros())
    }

    pub fn hover(params: &PhysicalParams) -> Self {
        Self::new(params.hover_thrust(), Vector3::zeros())
    }

    pub fn to_vector(&self) -> InputVector {
        InputVector::new(self.thrust, self.torque.x, self.torque.y, self.torque.z)
    }

    pub fn from_vector(u: &InputVector) -> Self {
        Self::new(u[0], Vector3::new(u[1], u[2], u[3]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotorThrusts(pub [f64; 4]);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocationResult {
    pub rotors: RotorThrusts,
    pub saturated: bool,
}

/// External force and torque acting on the body (inertial force, body torque).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExternalWrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

/// Time derivative of the state together with the contact force that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative {
    pub position: Vector3<f64>,
    pub attitude: Quaternion<f64>,
    pub velocity: Vector3<f64>,
    pub body_rate: Vector3<f64>,
    pub normal_force: f64,
}

/// `[T, τ] = 𝓜 t`.
pub fn allocate_from_rotors(t: &RotorThrusts, params: &PhysicalParams) -> ControlInput {
    ControlInput::from_vector(&(params.allocation_matrix() * Vector4::from(t.0)))
}

/// `t = 𝓜⁻¹ [T, τ]`, clamped to the rotor limits.
pub fn rotors_from_input(u: &ControlInput, params: &PhysicalParams) -> AllocationResult {
    let inv = params
        .allocation_matrix()
        .try_inverse()
        .expect("allocation matrix is invertible for positive geometry");
    let raw = inv * u.to_vector();
    let mut saturated = false;
    let mut out = [0.0; 4];
    for (o, &r) in out.iter_mut().zip(raw.iter()) {
        let c = r.clamp(params.rotor_thrust_min, params.rotor_thrust_max);
        // Round-off around the bounds is not saturation.
        if (c - r).abs() > 1e-12 {
            saturated = true;
        }
        *o = c;
    }
    AllocationResult { rotors: RotorThrusts(out), saturated }
}

/// Unconstrained normal force that cancels vertical acceleration on the ground.
pub fn required_normal_force(
    x: &FullState,
    u: &ControlInput,
    params: &PhysicalParams,
    ext: &ExternalWrench,
) -> f64 {
    let z_b = x.attitude * Vector3::z();
    params.mass * params.gravity - u.thrust * z_b.z - ext.force.z
}

/// Continuous dynamics on the flat state vector.
///
/// `clamp_normal` selects between the plant behaviour (a normal force can only
/// push) and the prediction-model behaviour (the ground holds the vehicle
/// unconditionally while the mode flag says terrestrial).
pub(crate) fn state_derivative(
    x: &StateVector,
    u: &InputVector,
    mode: Mode,
    params: &PhysicalParams,
    ext: &ExternalWrench,
    clamp_normal: bool,
) -> (StateVector, f64) {
    let q = quaternion_of(x);
    let v = x.fixed_rows::<3>(IDX_V).into_owned();
    let w = x.fixed_rows::<3>(IDX_W).into_owned();
    let rot = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
    let z_b = rot.column(2).into_owned();

    let mut acc = z_b * (u[0] / params.mass) + ext.force / params.mass
        - Vector3::new(0.0, 0.0, params.gravity);
    let mut normal = 0.0;
    if mode == Mode::Terrestrial {
        let fn_raw = -params.mass * acc.z;
        normal = if clamp_normal { fn_raw.max(0.0) } else { fn_raw };
        acc.z += normal / params.mass;
        apply_lateral_constraint(&rot, &v, &w, &mut acc);
    }

    let dq = q * Quaternion::new(0.0, w.x, w.y, w.z) * 0.5;
    let inertia = params.inertia();
    let torque = Vector3::new(u[1], u[2], u[3]) + ext.torque;
    let dw = params.inertia_inv() * (torque - w.cross(&(inertia * w)));

    let mut dx = StateVector::zeros();
    dx.fixed_rows_mut::<3>(IDX_P).copy_from(&v);
    dx[IDX_Q] = dq.w;
    dx[IDX_Q + 1] = dq.i;
    dx[IDX_Q + 2] = dq.j;
    dx[IDX_Q + 3] = dq.k;
    dx.fixed_rows_mut::<3>(IDX_V).copy_from(&acc);
    dx.fixed_rows_mut::<3>(IDX_W).copy_from(&dw);
    (dx, normal)
}

/// Unit horizontal direction of the wheel axle (the horizontal part of y_B).
pub(crate) fn axle_direction(rot: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let y = rot.column(1);
    let h = Vector3::new(y.x, y.y, 0.0);
    let n = h.norm();
    (n > 1e-6).then(|| h / n)
}

/// Replaces the along-axle acceleration with the value that keeps the
/// along-axle velocity constant while the body yaws (ideal rolling wheels).
fn apply_lateral_constraint(
    rot: &Matrix3<f64>,
    v: &Vector3<f64>,
    w: &Vector3<f64>,
    acc: &mut Vector3<f64>,
) {
    let y = rot.column(1).into_owned();
    let h = Vector3::new(y.x, y.y, 0.0);
    let n = h.norm();
    if n < 1e-6 {
        return;
    }
    let axle = h / n;
    // ẏ_B = R (ω × e2) = −r x_B + p z_B
    let dy = rot.column(0) * (-w.z) + rot.column(2) * w.x;
    let dh = Vector3::new(dy.x, dy.y, 0.0);
    let daxle = (dh - axle * axle.dot(&dh)) / n;
    let target = -v.dot(&daxle);
    *acc += axle * (target - acc.dot(&axle));
}

/// Public continuous dynamics with validity checks.
pub fn continuous_dynamics(
    x: &FullState,
    u: &ControlInput,
    contact: &GroundContact,
    params: &PhysicalParams,
) -> Result<StateDerivative, DynamicsError> {
    let qn = x.attitude.quaternion().norm();
    if (qn - 1.0).abs() > QUATERNION_TOLERANCE || !x.is_finite() {
        return Err(DynamicsError::InvalidState(format!("quaternion norm {qn}")));
    }
    let ext = ExternalWrench::default();
    if contact.mode == Mode::Terrestrial {
        let fn_raw = required_normal_force(x, u, params, &ext);
        if fn_raw < 0.0 {
            return Err(DynamicsError::Liftoff { normal_force: fn_raw });
        }
    }
    let (dx, normal) =
        state_derivative(&x.to_vector(), &u.to_vector(), contact.mode, params, &ext, true);
    Ok(StateDerivative {
        position: dx.fixed_rows::<3>(IDX_P).into_owned(),
        attitude: quaternion_of(&dx),
        velocity: dx.fixed_rows::<3>(IDX_V).into_owned(),
        body_rate: dx.fixed_rows::<3>(IDX_W).into_owned(),
        normal_force: normal,
    })
}

/// One classical RK4 step where the input may vary across the step: `inputs`
/// holds the values at the start, midpoint and end.
pub(crate) fn rk4_raw(
    x: &StateVector,
    inputs: [&InputVector; 3],
    mode: Mode,
    params: &PhysicalParams,
    ext: &ExternalWrench,
    clamp_normal: bool,
    dt: f64,
) -> StateVector {
    let f = |s: &StateVector, u: &InputVector| state_derivative(s, u, mode, params, ext, clamp_normal).0;
    let k1 = f(x, inputs[0]);
    let k2 = f(&(x + k1 * (0.5 * dt)), inputs[1]);
    let k3 = f(&(x + k2 * (0.5 * dt)), inputs[1]);
    let k4 = f(&(x + k3 * dt), inputs[2]);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

pub(crate) fn normalize_quaternion(x: &mut StateVector) {
    let n = x.fixed_rows::<4>(IDX_Q).norm();
    if n > 0.0 {
        x.fixed_rows_mut::<4>(IDX_Q).unscale_mut(n);
    }
}

/// Snaps a terrestrial state onto the ground plane with zero slip.
pub fn project_to_ground(x: &mut FullState) {
    x.position.z = 0.0;
    x.velocity.z = 0.0;
    let rot = x.attitude.to_rotation_matrix().into_inner();
    if let Some(axle) = axle_direction(&rot) {
        x.velocity -= axle * x.velocity.dot(&axle);
    }
}

/// Plant step used by the simulator and by open-loop checks: RK4 with an
/// input that may vary over the step, an external wrench, quaternion
/// renormalization and ground re-projection.
pub fn step_plant(
    x: &FullState,
    inputs: [&ControlInput; 3],
    mode: Mode,
    params: &PhysicalParams,
    ext: &ExternalWrench,
    dt: f64,
) -> Result<FullState, DynamicsError> {
    if !(dt > 0.0) {
        return Err(DynamicsError::InvalidState(format!("non-positive step {dt}")));
    }
    if mode == Mode::Terrestrial {
        let fn_raw = required_normal_force(x, inputs[0], params, ext);
        if fn_raw < 0.0 {
            return Err(DynamicsError::Liftoff { normal_force: fn_raw });
        }
    }
    let u = inputs.map(|u| u.to_vector());
    let mut next = rk4_raw(&x.to_vector(), [&u[0], &u[1], &u[2]], mode, params, ext, true, dt);
    normalize_quaternion(&mut next);
    let mut out = FullState::from_vector(&next);
    if mode == Mode::Terrestrial {
        project_to_ground(&mut out);
    }
    if !out.is_finite() {
        return Err(DynamicsError::InvalidState("non-finite state after step".into()));
    }
    Ok(out)
}

/// Classical RK4 step with a constant input.
pub fn integrate_rk4(
    x: &FullState,
    u: &ControlInput,
    contact: &GroundContact,
    params: &PhysicalParams,
    dt: f64,
) -> Result<FullState, DynamicsError> {
    step_plant(x, [u, u, u], contact.mode, params, &ExternalWrench::default(), dt)
}
