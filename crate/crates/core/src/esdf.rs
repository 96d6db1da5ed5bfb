//! Occupancy grids and exact Euclidean distance fields.
//!
//! Distances come from the separable lower-envelope transform: squared
//! distances are propagated one axis at a time with a 1D parabola envelope,
//! which is exact for the Euclidean metric on cell centers. Queries between
//! cell centers use bi/trilinear interpolation with the analytic gradient of
//! the interpolant.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::error::MapError;

/// Grid placement. `origin` is the world position of the center of cell
/// (0, 0, 0); cell `(i, j, k)` is stored at `i + nx * (j + ny * k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub resolution: f64,
    pub origin: Vector3<f64>,
    pub dims: [usize; 3],
}

impl GridGeometry {
    pub fn new(resolution: f64, origin: Vector3<f64>, dims: [usize; 3]) -> Result<Self, MapError> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(MapError::InvalidGrid(format!("resolution {resolution}")));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(MapError::InvalidGrid(format!("dims {dims:?}")));
        }
        Ok(Self { resolution, origin, dims })
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_planar(&self) -> bool {
        self.dims[2] == 1
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.resolution
    }

    /// Cell containing `p`, or `None` outside the grid.
    pub fn cell_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        let axes = if self.is_planar() { 2 } else { 3 };
        for a in 0..axes {
            let u = ((p[a] - self.origin[a]) / self.resolution + 0.5).floor();
            if u < 0.0 || u >= self.dims[a] as f64 {
                return None;
            }
            out[a] = u as usize;
        }
        Some(out)
    }

    /// Lower and upper corners of the covered region (cell faces).
    pub fn extent(&self) -> (Vector3<f64>, Vector3<f64>) {
        let half = Vector3::repeat(0.5 * self.resolution);
        let size = Vector3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64)
            * self.resolution;
        (self.origin - half, self.origin - half + size)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let (lo, hi) = self.extent();
        let axes = if self.is_planar() { 2 } else { 3 };
        (0..axes).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
    }

    pub fn diagonal(&self) -> f64 {
        let (lo, hi) = self.extent();
        (hi - lo).norm()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub geometry: GridGeometry,
    pub cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn empty(geometry: GridGeometry) -> Self {
        Self { cells: vec![false; geometry.len()], geometry }
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.cells[self.geometry.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, occupied: bool) {
        let idx = self.geometry.index(i, j, k);
        self.cells[idx] = occupied;
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Single-layer grid whose cell is occupied when any selected layer is.
    pub fn flatten_layers(&self, layers: std::ops::Range<usize>) -> Self {
        let g = self.geometry;
        let mut geometry = g;
        geometry.dims[2] = 1;
        let mut out = Self::empty(geometry);
        for k in layers.filter(|&k| k < g.dims[2]) {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    if self.get(i, j, k) {
                        out.set(i, j, 0, true);
                    }
                }
            }
        }
        out
    }

    /// ASCII form: three header lines then one row of 0/1 characters per
    /// (layer, y) pair, layers separated by a blank line.
    pub fn to_ascii(&self) -> String {
        let g = &self.geometry;
        let mut s = String::new();
        let _ = writeln!(s, "resolution {}", g.resolution);
        let _ = writeln!(s, "origin {} {} {}", g.origin.x, g.origin.y, g.origin.z);
        let _ = writeln!(s, "dims {} {} {}", g.dims[0], g.dims[1], g.dims[2]);
        for k in 0..g.dims[2] {
            s.push('\n');
            for j in 0..g.dims[1] {
                s.extend((0..g.dims[0]).map(|i| if self.get(i, j, k) { '1' } else { '0' }));
                s.push('\n');
            }
        }
        s
    }

    pub fn from_ascii(text: &str) -> Result<Self, MapError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut header = |key: &str, count: usize| -> Result<Vec<f64>, MapError> {
            let (n, line) = lines
                .next()
                .ok_or(MapError::Parse { line: 0, message: format!("missing `{key}` header") })?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(MapError::Parse { line: n + 1, message: format!("expected `{key}`") });
            }
            let values: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let values = values.map_err(|e| MapError::Parse { line: n + 1, message: e.to_string() })?;
            if values.len() != count {
                return Err(MapError::Parse {
                    line: n + 1,
                    message: format!("`{key}` needs {count} values"),
                });
            }
            Ok(values)
        };
        let res = header("resolution", 1)?[0];
        let o = header("origin", 3)?;
        let d = header("dims", 3)?;
        if d.iter().any(|&v| v < 1.0 || v.fract() != 0.0) {
            return Err(MapError::InvalidGrid(format!("dims {d:?}")));
        }
        let geometry =
            GridGeometry::new(res, Vector3::new(o[0], o[1], o[2]), [d[0] as usize, d[1] as usize, d[2] as usize])?;
        let mut cells = Vec::with_capacity(geometry.len());
        for (n, line) in lines {
            let row = line.trim();
            if row.len() != geometry.dims[0] {
                return Err(MapError::Parse {
                    line: n + 1,
                    message: format!("row has {} cells, expected {}", row.len(), geometry.dims[0]),
                });
            }
            for c in row.chars() {
                match c {
                    '0' => cells.push(false),
                    '1' => cells.push(true),
                    other => {
                        return Err(MapError::Parse { line: n + 1, message: format!("bad cell `{other}`") })
                    }
                }
            }
        }
        if cells.len() != geometry.len() {
            return Err(MapError::Parse {
                line: 0,
                message: format!("{} cells read, expected {}", cells.len(), geometry.len()),
            });
        }
        Ok(Self { geometry, cells })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsdfGrid {
    pub geometry: GridGeometry,
    /// Distance to the nearest occupied cell center, meters.
    pub dist: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceQuery {
    pub distance: f64,
    pub gradient: Vector3<f64>,
    pub out_of_bounds: bool,
}

/// Squared-distance transform of one line in place (lower envelope of
/// parabolas rooted at finite samples). `v` and `z` are scratch buffers.
fn edt_1d(f: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out.push(d * d + f[v[k]]);
    }
    f.copy_from_slice(out);
}

pub fn build_esdf(grid: &OccupancyGrid) -> Result<EsdfGrid, MapError> {
    let g = grid.geometry;
    if grid.cells.len() != g.len() {
        return Err(MapError::InvalidGrid("cell count does not match dims".into()));
    }
    if grid.cells.iter().all(|&c| c) {
        return Err(MapError::AllOccupied);
    }
    let mut f: Vec<f64> = grid.cells.iter().map(|&c| if c { 0.0 } else { f64::INFINITY }).collect();
    let [nx, ny, nz] = g.dims;
    let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::with_capacity(nx.max(ny).max(nz));
    for k in 0..nz {
        for j in 0..ny {
            let start = g.index(0, j, k);
            edt_1d(&mut f[start..start + nx], &mut v, &mut z, &mut out);
        }
    }
    if ny > 1 {
        for k in 0..nz {
            for i in 0..nx {
                line.clear();
                line.extend((0..ny).map(|j| f[g.index(i, j, k)]));
                edt_1d(&mut line, &mut v, &mut z, &mut out);
                for (j, &d) in line.iter().enumerate() {
                    f[g.index(i, j, k)] = d;
                }
            }
        }
    }
    if nz > 1 {
        for j in 0..ny {
            for i in 0..nx {
                line.clear();
                line.extend((0..nz).map(|k| f[g.index(i, j, k)]));
                edt_1d(&mut line, &mut v, &mut z, &mut out);
                for (k, &d) in line.iter().enumerate() {
                    f[g.index(i, j, k)] = d;
                }
            }
        }
    }
    let cap = g.diagonal();
    let dist = f
        .into_iter()
        .map(|d| if d.is_finite() { (d.sqrt() * g.resolution).min(cap) } else { cap })
        .collect();
    Ok(EsdfGrid { geometry: g, dist })
}

impl EsdfGrid {
    pub fn at_cell(&self, i: usize, j: usize, k: usize) -> f64 {
        self.dist[self.geometry.index(i, j, k)]
    }

    /// Interpolated distance and its gradient. Planar grids ignore z. Points
    /// outside the grid are clamped onto it; the gradient component along a
    /// clamped axis is zero and the result is flagged.
    pub fn query(&self, p: &Vector3<f64>) -> DistanceQuery {
        let g = &self.geometry;
        let axes = if g.is_planar() { 2 } else { 3 };
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut live = [false; 3];
        let mut out_of_bounds = false;
        for a in 0..axes {
            let n = g.dims[a];
            let u = (p[a] - g.origin[a]) / g.resolution;
            if !(-0.5..=n as f64 - 0.5).contains(&u) {
                out_of_bounds = true;
            }
            if n == 1 {
                continue;
            }
            let hi = (n - 1) as f64;
            if u <= 0.0 || u >= hi {
                base[a] = if u <= 0.0 { 0 } else { n - 2 };
                frac[a] = if u <= 0.0 { 0.0 } else { 1.0 };
            } else {
                let b = (u.floor() as usize).min(n - 2);
                base[a] = b;
                frac[a] = u - b as f64;
                live[a] = true;
            }
        }
        let step = |a: usize| usize::from(g.dims[a] > 1 && a < axes);
        let mut value = 0.0;
        let mut grad = Vector3::zeros();
        for corner in 0..(1usize << axes) {
            let bit = |a: usize| (corner >> a) & 1;
            let idx = [
                base[0] + bit(0) * step(0),
                base[1] + bit(1) * step(1),
                if axes == 3 { base[2] + bit(2) * step(2) } else { 0 },
            ];
            let d = self.at_cell(idx[0], idx[1], idx[2]);
            let w: [f64; 3] = std::array::from_fn(|a| {
                if a >= axes {
                    1.0
                } else if bit(a) == 1 {
                    frac[a]
                } else {
                    1.0 - frac[a]
                }
            });
            value += d * w[0] * w[1] * w[2];
            for a in 0..axes {
                if !live[a] {
                    continue;
                }
                let dw = if bit(a) == 1 { 1.0 } else { -1.0 };
                let others: f64 = (0..3).filter(|&b| b != a).map(|b| w[b]).product();
                grad[a] += d * dw * others;
            }
        }
        DistanceQuery { distance: value, gradient: grad / g.resolution, out_of_bounds }
    }

    /// Interpolated distance only; same value as [`EsdfGrid::query`].
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let g = &self.geometry;
        let axes = if g.is_planar() { 2 } else { 3 };
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..axes {
            let n = g.dims[a];
            if n == 1 {
                continue;
            }
            let u = ((p[a] - g.origin[a]) / g.resolution).clamp(0.0, (n - 1) as f64);
            let b = (u as usize).min(n - 2);
            base[a] = b;
            frac[a] = u - b as f64;
        }
        let [nx, ny, nz] = g.dims;
        let sx = usize::from(nx > 1);
        let sy = if ny > 1 { nx } else { 0 };
        let i0 = g.index(base[0], base[1], base[2]);
        let (fx, fy) = (frac[0], frac[1]);
        let bilinear = |i: usize| {
            let d = &self.dist;
            (d[i] * (1.0 - fx) + d[i + sx] * fx) * (1.0 - fy) + (d[i + sy] * (1.0 - fx) + d[i + sy + sx] * fx) * fy
        };
        if axes == 2 || nz == 1 {
            bilinear(i0)
        } else {
            let fz = frac[2];
            bilinear(i0) * (1.0 - fz) + bilinear(i0 + nx * ny) * fz
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn planar(n: usize, res: f64) -> OccupancyGrid {
        OccupancyGrid::empty(GridGeometry::new(res, Vector3::zeros(), [n, n, 1]).unwrap())
    }

    fn brute_force(grid: &OccupancyGrid) -> Vec<f64> {
        let g = grid.geometry;
        let occupied: Vec<[usize; 3]> = (0..g.dims[2])
            .flat_map(|k| (0..g.dims[1]).flat_map(move |j| (0..g.dims[0]).map(move |i| [i, j, k])))
            .filter(|&[i, j, k]| grid.get(i, j, k))
            .collect();
        let mut out = vec![0.0; g.len()];
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    let best = occupied
                        .iter()
                        .map(|&[a, b, c]| {
                            let d = |x: usize, y: usize| (x as f64 - y as f64).powi(2);
                            d(a, i) + d(b, j) + d(c, k)
                        })
                        .fold(f64::INFINITY, f64::min);
                    out[g.index(i, j, k)] = best.sqrt() * g.resolution;
                }
            }
        }
        out
    }

    #[test]
    fn empty_grid_is_capped() {
        let grid = planar(10, 0.1);
        let esdf = build_esdf(&grid).unwrap();
        let cap = grid.geometry.diagonal();
        assert!(esdf.dist.iter().all(|&d| d == cap));
    }

    #[test]
    fn all_occupied_is_an_error() {
        let mut grid = planar(3, 1.0);
        grid.cells.fill(true);
        assert_eq!(build_esdf(&grid), Err(MapError::AllOccupied));
    }

    #[test]
    fn single_site() {
        let mut grid = planar(9, 0.5);
        grid.set(4, 4, 0, true);
        let esdf = build_esdf(&grid).unwrap();
        assert_relative_eq!(esdf.at_cell(0, 0, 0), 0.5 * 32f64.sqrt(), epsilon = 1e-12);
        assert_eq!(esdf.at_cell(4, 4, 0), 0.0);
    }

    #[test]
    fn matches_brute_force_2d_and_3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dims in [[40, 33, 1], [12, 9, 7]] {
            let g = GridGeometry::new(0.2, Vector3::zeros(), dims).unwrap();
            let mut grid = OccupancyGrid::empty(g);
            for c in &mut grid.cells {
                *c = rng.random_bool(0.05);
            }
            let esdf = build_esdf(&grid).unwrap();
            for (a, b) in esdf.dist.iter().zip(brute_force(&grid)) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn interpolation_examples() {
        let mut grid = OccupancyGrid::empty(GridGeometry::new(1.0, Vector3::zeros(), [4, 1, 1]).unwrap());
        grid.set(0, 0, 0, true);
        let esdf = build_esdf(&grid).unwrap();
        assert_eq!(esdf.distance(&Vector3::new(2.0, 0.0, 0.0)), 2.0);
        let q = esdf.query(&Vector3::new(1.5, 0.0, 0.0));
        assert_relative_eq!(q.distance, 1.5);
        assert!(q.gradient.x > 0.0);
        assert!(!q.out_of_bounds);
        assert!(esdf.query(&Vector3::new(9.0, 0.0, 0.0)).out_of_bounds);
    }

    #[test]
    fn ascii_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = GridGeometry::new(0.25, Vector3::new(-1.0, 2.0, -0.5), [7, 5, 3]).unwrap();
        let mut grid = OccupancyGrid::empty(g);
        for c in &mut grid.cells {
            *c = rng.random_bool(0.3);
        }
        let back = OccupancyGrid::from_ascii(&grid.to_ascii()).unwrap();
        assert_eq!(back, grid);
        assert!(matches!(
            OccupancyGrid::from_ascii("resolution 1\norigin 0 0 0\ndims 2 1 1\n0x\n"),
            Err(MapError::Parse { line: 4, .. })
        ));
    }

    fn random_field(seed: u64, dims: [usize; 3]) -> EsdfGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GridGeometry::new(0.3, Vector3::new(0.1, -0.2, 0.0), dims).unwrap();
        let mut grid = OccupancyGrid::empty(g);
        for c in &mut grid.cells {
            *c = rng.random_bool(0.08);
        }
        grid.cells[0] = true;
        build_esdf(&grid).unwrap()
    }

    proptest! {
        #[test]
        fn value_path_matches_query(seed in 0u64..50, x in -0.2f64..1.2, y in -0.2f64..1.2, z in -0.2f64..1.2, planar in any::<bool>()) {
            let esdf = random_field(seed, if planar { [9, 6, 1] } else { [8, 7, 5] });
            let (lo, hi) = esdf.geometry.extent();
            let p = Vector3::new(lo.x + x * (hi.x - lo.x), lo.y + y * (hi.y - lo.y), lo.z + z * (hi.z - lo.z));
            prop_assert!((esdf.distance(&p) - esdf.query(&p).distance).abs() < 1e-12);
        }

        #[test]
        fn continuous_and_lipschitz(seed in 0u64..50, x in 0.0f64..1.0, y in 0.0f64..1.0, z in 0.0f64..1.0) {
            let esdf = random_field(seed, [8, 7, 5]);
            let (lo, hi) = esdf.geometry.extent();
            let p = lo + (hi - lo).component_mul(&Vector3::new(x, y, z)) * 0.999;
            let d = Vector3::new(1.0, -0.5, 0.7).normalize() * 1e-6;
            let diff = (esdf.distance(&p) - esdf.distance(&(p + d))).abs();
            prop_assert!(diff <= 1e-5 * (1.0 + 3f64.sqrt()));
        }

        #[test]
        fn gradient_matches_differences(seed in 0u64..50, x in 0.05f64..0.95, y in 0.05f64..0.95, z in 0.05f64..0.95, planar in any::<bool>()) {
            let dims = if planar { [9, 8, 1] } else { [8, 7, 5] };
            let esdf = random_field(seed, dims);
            let g = esdf.geometry;
            // Stay inside the interpolation region and off the cell faces.
            let u = Vector3::new(x, y, z).component_mul(&Vector3::new(
                (g.dims[0] - 1) as f64, (g.dims[1] - 1) as f64, (g.dims[2].max(2) - 1) as f64));
            prop_assume!((0..3).all(|a| (u[a] - u[a].round()).abs() > 1e-3));
            let p = g.origin + u * g.resolution;
            let q = esdf.query(&p);
            let h = 1e-7;
            for a in 0..if planar { 2 } else { 3 } {
                let mut e = Vector3::zeros();
                e[a] = h;
                let fd = (esdf.distance(&(p + e)) - esdf.distance(&(p - e))) / (2.0 * h);
                prop_assert!((fd - q.gradient[a]).abs() < 1e-6);
            }
            if planar {
                prop_assert_eq!(q.gradient.z, 0.0);
            }
        }
    }

    #[test]
    fn stored_field_is_lipschitz() {
        let esdf = random_field(4, [10, 10, 6]);
        let g = esdf.geometry;
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] - 1 {
                    assert!((esdf.at_cell(i, j, k) - esdf.at_cell(i + 1, j, k)).abs() <= g.resolution + 1e-12);
                }
            }
        }
    }
}
