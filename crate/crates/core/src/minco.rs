//! Minimum-jerk piecewise quintics parameterized by waypoints and durations.
//!
//! For fixed intermediate waypoints `q` and durations `T` the jerk-optimal
//! trajectory is the unique solution of a banded linear system: boundary
//! conditions on (p, v, a) at both ends, interpolation of each waypoint, and
//! continuity of derivatives 0..=4 at each junction. The system is solved by
//! banded LU in O(M); the same factorization gives the adjoint used to
//! propagate cost gradients from coefficients back to (q, T).

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::Mode;
use crate::error::TrajectoryError;
use crate::flatness::FlatOutput;

pub const COEFFS: usize = 6;
const BAND: usize = 6;

/// Position, velocity and acceleration at a trajectory end.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundaryCondition {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
}

impl BoundaryCondition {
    pub fn rest(p: Vector3<f64>) -> Self {
        Self { p, ..Default::default() }
    }

    fn get(&self, order: usize) -> Vector3<f64> {
        [self.p, self.v, self.a][order]
    }
}

/// Row vector β⁽ᵏ⁾(t) of the monomial basis 1, t, …, t⁵.
pub fn basis(t: f64, order: usize) -> [f64; COEFFS] {
    let mut out = [0.0; COEFFS];
    for (n, o) in out.iter_mut().enumerate().skip(order) {
        let mut factor = 1.0;
        for m in 0..order {
            factor *= (n - m) as f64;
        }
        *o = factor * t.powi((n - order) as i32);
    }
    out
}

/// Square banded matrix stored by diagonals, factorized in place without
/// pivoting. The MINCO system is well conditioned enough that this is safe
/// for positive durations.
#[derive(Debug, Clone)]
struct BandedLu {
    n: usize,
    data: Vec<f64>,
}

impl BandedLu {
    const WIDTH: usize = 2 * BAND + 1;

    fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * Self::WIDTH] }
    }

    // Row-major band storage: row i holds columns i-BAND ..= i+BAND.
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * Self::WIDTH + j + BAND - i]
    }

    fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert!(i + BAND >= j && j + BAND >= i);
        &mut self.data[i * Self::WIDTH + j + BAND - i]
    }

    fn factorize(&mut self) {
        let n = self.n;
        let w = Self::WIDTH;
        for k in 0..n {
            let pivot = self.data[k * w + BAND];
            let end = (k + BAND + 1).min(n);
            let (head, tail) = self.data.split_at_mut((k + 1) * w);
            // Pivot row entries k+1 .. end.
            let urow = &head[k * w + BAND + 1..k * w + BAND + 1 + (end - k - 1)];
            for i in k + 1..end {
                let row = &mut tail[(i - k - 1) * w..(i - k) * w];
                let lik = row[k + BAND - i] / pivot;
                row[k + BAND - i] = lik;
                if lik == 0.0 {
                    continue;
                }
                let off = k + 1 + BAND - i;
                for (dst, u) in row[off..off + urow.len()].iter_mut().zip(urow) {
                    *dst -= lik * u;
                }
            }
        }
    }

    /// Solves A x = b in place.
    fn solve(&self, b: &mut [Vector3<f64>]) {
        let n = self.n;
        for j in 0..n {
            let bj = b[j];
            for i in j + 1..(j + BAND + 1).min(n) {
                b[i] -= bj * self.at(i, j);
            }
        }
        for j in (0..n).rev() {
            b[j] /= self.at(j, j);
            let bj = b[j];
            for i in j.saturating_sub(BAND)..j {
                b[i] -= bj * self.at(i, j);
            }
        }
    }

    /// Solves Aᵀ x = b in place.
    fn solve_transpose(&self, b: &mut [Vector3<f64>]) {
        let n = self.n;
        for j in 0..n {
            let mut acc = b[j];
            for i in j.saturating_sub(BAND)..j {
                acc -= b[i] * self.at(i, j);
            }
            b[j] = acc / self.at(j, j);
        }
        for j in (0..n).rev() {
            let mut acc = b[j];
            for i in j + 1..(j + BAND + 1).min(n) {
                acc -= b[i] * self.at(i, j);
            }
            b[j] = acc;
        }
    }
}

/// For rows that depend on a duration: the piece and the derivative order
/// evaluated at that piece's end.
fn row_order(row: usize, pieces: usize) -> Option<(usize, usize)> {
    let n = COEFFS * pieces;
    if row < 3 || row >= n {
        return None;
    }
    if row >= n - 3 {
        return Some((pieces - 1, row - (n - 3)));
    }
    let i = (row - 3) / COEFFS;
    let order = [3, 4, 0, 0, 1, 2][(row - 3) % COEFFS];
    Some((i, order))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MincoRecord", into = "MincoRecord")]
pub struct MincoTrajectory {
    pub head: BoundaryCondition,
    pub tail: BoundaryCondition,
    /// Intermediate waypoints, one per junction.
    pub waypoints: Vec<Vector3<f64>>,
    pub durations: Vec<f64>,
    pub modes: Vec<Mode>,
    /// Per-piece coefficients `c_0..c_5` of `p(t) = Σ c_k t^k`.
    pub coeffs: Vec<[Vector3<f64>; COEFFS]>,
    starts: Vec<f64>,
    lu: Option<BandedLu>,
}

/// Serialized form. Coefficients are written for consumers but recomputed
/// from the waypoints and durations when read back.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MincoRecord {
    pub head: BoundaryCondition,
    pub tail: BoundaryCondition,
    pub waypoints: Vec<Vector3<f64>>,
    pub durations: Vec<f64>,
    pub modes: Vec<Mode>,
    #[serde(default)]
    pub coeffs: Vec<[Vector3<f64>; COEFFS]>,
}

impl From<MincoTrajectory> for MincoRecord {
    fn from(t: MincoTrajectory) -> Self {
        Self {
            head: t.head,
            tail: t.tail,
            waypoints: t.waypoints,
            durations: t.durations,
            modes: t.modes,
            coeffs: t.coeffs,
        }
    }
}

impl TryFrom<MincoRecord> for MincoTrajectory {
    type Error = TrajectoryError;
    fn try_from(r: MincoRecord) -> Result<Self, Self::Error> {
        Self::solve(r.head, r.tail, r.waypoints, r.durations, r.modes)
    }
}

/// Evaluation result; `clamped` marks a request outside `[0, total]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub value: Vector3<f64>,
    pub clamped: bool,
}

impl MincoTrajectory {
    /// Solves for the coefficients. `modes` may be empty, meaning all aerial.
    pub fn solve(
        head: BoundaryCondition,
        tail: BoundaryCondition,
        waypoints: Vec<Vector3<f64>>,
        durations: Vec<f64>,
        modes: Vec<Mode>,
    ) -> Result<Self, TrajectoryError> {
        let m = durations.len();
        if m == 0 {
            return Err(TrajectoryError::Empty);
        }
        if waypoints.len() + 1 != m {
            return Err(TrajectoryError::Shape(format!(
                "{} waypoints for {} pieces",
                waypoints.len(),
                m
            )));
        }
        let modes = if modes.is_empty() { vec![Mode::Aerial; m] } else { modes };
        if modes.len() != m {
            return Err(TrajectoryError::Shape(format!("{} modes for {} pieces", modes.len(), m)));
        }
        for (index, &d) in durations.iter().enumerate() {
            if !(d > 0.0) || !d.is_finite() {
                return Err(TrajectoryError::NonPositiveDuration { index, duration: d });
            }
        }
        let n = COEFFS * m;
        let mut a = BandedLu::zeros(n);
        let mut b = vec![Vector3::zeros(); n];
        for k in 0..3 {
            *a.at_mut(k, k) = basis(0.0, k)[k];
            b[k] = head.get(k);
        }
        for i in 0..m - 1 {
            let t = durations[i];
            let row0 = COEFFS * i + 3;
            for (off, order) in [3usize, 4, 0, 0, 1, 2].into_iter().enumerate() {
                let row = row0 + off;
                let beta = basis(t, order);
                for (c, &v) in beta.iter().enumerate() {
                    if v != 0.0 {
                        *a.at_mut(row, COEFFS * i + c) = v;
                    }
                }
                if off != 2 {
                    // Continuity rows subtract the next piece at its start.
                    *a.at_mut(row, COEFFS * (i + 1) + order) = -basis(0.0, order)[order];
                }
            }
            b[row0 + 2] = waypoints[i];
        }
        let t = durations[m - 1];
        for k in 0..3 {
            let row = n - 3 + k;
            for (c, &v) in basis(t, k).iter().enumerate() {
                if v != 0.0 {
                    *a.at_mut(row, COEFFS * (m - 1) + c) = v;
                }
            }
            b[row] = tail.get(k);
        }
        a.factorize();
        a.solve(&mut b);
        let coeffs = b.chunks(COEFFS).map(|c| std::array::from_fn(|k| c[k])).collect();
        let mut starts = Vec::with_capacity(m);
        let mut acc = 0.0;
        for &d in &durations {
            starts.push(acc);
            acc += d;
        }
        Ok(Self { head, tail, waypoints, durations, modes, coeffs, starts, lu: Some(a) })
    }

    pub fn pieces(&self) -> usize {
        self.durations.len()
    }

    pub fn total_duration(&self) -> f64 {
        self.durations.iter().sum()
    }

    /// Start time of each piece.
    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    /// Piece index and local time for a global time inside the trajectory.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let m = self.pieces();
        let idx = match self.starts.binary_search_by(|s| s.partial_cmp(&t).expect("finite time")) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let idx = idx.min(m - 1);
        (idx, t - self.starts[idx])
    }

    pub fn eval_piece(&self, piece: usize, tau: f64, order: usize) -> Vector3<f64> {
        if order >= COEFFS {
            return Vector3::zeros();
        }
        let c = &self.coeffs[piece];
        let mut acc = Vector3::zeros();
        for n in (order..COEFFS).rev() {
            let mut factor = 1.0;
            for m in 0..order {
                factor *= (n - m) as f64;
            }
            acc = acc * tau + c[n] * factor;
        }
        acc
    }

    /// Position and derivatives up to snap at local time `tau`.
    pub fn eval_all(&self, piece: usize, tau: f64) -> [Vector3<f64>; 5] {
        let c = &self.coeffs[piece];
        let t2 = tau * tau;
        let t3 = t2 * tau;
        let t4 = t3 * tau;
        let t5 = t4 * tau;
        [
            c[0] + c[1] * tau + c[2] * t2 + c[3] * t3 + c[4] * t4 + c[5] * t5,
            c[1] + c[2] * (2.0 * tau) + c[3] * (3.0 * t2) + c[4] * (4.0 * t3) + c[5] * (5.0 * t4),
            c[2] * 2.0 + c[3] * (6.0 * tau) + c[4] * (12.0 * t2) + c[5] * (20.0 * t3),
            c[3] * 6.0 + c[4] * (24.0 * tau) + c[5] * (60.0 * t2),
            c[4] * 24.0 + c[5] * (120.0 * tau),
        ]
    }

    pub fn eval(&self, t: f64, order: usize) -> Evaluation {
        let total = self.total_duration();
        let clamped = !(0.0..=total).contains(&t);
        let (piece, tau) = self.locate(t.clamp(0.0, total));
        Evaluation { value: self.eval_piece(piece, tau, order), clamped }
    }

    /// ∫|p⁽³⁾|² over the whole trajectory.
    pub fn jerk_energy(&self) -> f64 {
        self.coeffs
            .iter()
            .zip(&self.durations)
            .map(|(c, &t)| {
                let (t2, t3, t4, t5) = (t * t, t * t * t, t.powi(4), t.powi(5));
                36.0 * c[3].norm_squared() * t
                    + 144.0 * c[3].dot(&c[4]) * t2
                    + 240.0 * c[3].dot(&c[5]) * t3
                    + 192.0 * c[4].norm_squared() * t3
                    + 720.0 * c[4].dot(&c[5]) * t4
                    + 720.0 * c[5].norm_squared() * t5
            })
            .sum()
    }

    /// Maps a cost gradient with respect to the coefficients (plus any
    /// explicit duration dependence) to gradients with respect to the
    /// waypoints and durations.
    pub fn backprop_gradients(
        &self,
        grad_c: &[[Vector3<f64>; COEFFS]],
        grad_t_direct: &[f64],
    ) -> (Vec<Vector3<f64>>, Vec<f64>) {
        let m = self.pieces();
        let lu = self.lu.as_ref().expect("trajectory built by solve");
        let mut adj: Vec<Vector3<f64>> = grad_c.iter().flat_map(|c| c.iter().copied()).collect();
        lu.solve_transpose(&mut adj);
        let grad_q = (0..m - 1).map(|i| adj[COEFFS * i + 5]).collect();
        let mut grad_t = grad_t_direct.to_vec();
        for (row, lambda) in adj.iter().enumerate() {
            let Some((piece, order)) = row_order(row, m) else { continue };
            let d = self.eval_piece(piece, self.durations[piece], order + 1);
            grad_t[piece] -= lambda.dot(&d);
        }
        (grad_q, grad_t)
    }
}

impl FlatOutput for MincoTrajectory {
    fn duration(&self) -> f64 {
        self.total_duration()
    }

    fn derivative(&self, t: f64, order: usize) -> Vector3<f64> {
        self.eval(t, order).value
    }

    fn mode_at(&self, t: f64) -> Mode {
        self.modes[self.locate(t.clamp(0.0, self.total_duration())).0]
    }
}
