//! Worlds: a 3D occupancy grid plus one distance field per locomotion mode.
//!
//! The ground field is built from the layers the rolling vehicle sweeps, so
//! an obstacle blocks driving whenever it reaches into that band. The flight
//! field uses every layer, with obstacle columns continued below the ground
//! plane so distances near the ground are horizontal rather than pulled
//! toward an artificial floor.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dynamics::Mode;
use crate::esdf::{build_esdf, DistanceQuery, EsdfGrid, GridGeometry, OccupancyGrid};
use crate::error::MapError;

/// Height band swept by the vehicle while rolling, m.
pub const GROUND_BAND: f64 = 0.3;
/// Depth the grid extends below the ground plane, m.
pub const BELOW_GROUND: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cylinder {
    pub center: [f64; 2],
    pub radius: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxObstacle {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub obstacles: usize,
    pub radius: [f64; 2],
    /// Share of obstacles that reach the ceiling; the rest are short.
    pub tall_fraction: f64,
    pub short_height: [f64; 2],
    /// Discs kept free of obstacles (typically start and goal).
    pub clear: Vec<[f64; 2]>,
    pub clear_radius: f64,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            obstacles: 160,
            radius: [0.3, 0.8],
            tall_fraction: 0.7,
            short_height: [0.5, 1.2],
            clear: vec![],
            clear_radius: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WorldSpec {
    /// Obstacle lists rasterized onto the grid.
    Shapes {
        size: [f64; 2],
        height: f64,
        resolution: f64,
        #[serde(default)]
        cylinders: Vec<Cylinder>,
        #[serde(default)]
        boxes: Vec<BoxObstacle>,
    },
    Forest {
        size: [f64; 2],
        height: f64,
        resolution: f64,
        #[serde(default)]
        forest: ForestParams,
    },
    /// Grid file in the ASCII format of [`OccupancyGrid::to_ascii`].
    File { path: String },
}

impl WorldSpec {
    pub fn empty(size: [f64; 2], height: f64, resolution: f64) -> Self {
        Self::Shapes { size, height, resolution, cylinders: vec![], boxes: vec![] }
    }

    /// A wall across the whole width at `x`, too high to drive through but
    /// low enough to fly over.
    pub fn fence(size: [f64; 2], height: f64, resolution: f64, x: f64, fence_height: f64) -> Self {
        Self::Shapes {
            size,
            height,
            resolution,
            cylinders: vec![],
            boxes: vec![BoxObstacle { min: [x - 0.2, -1.0], max: [x + 0.2, size[1] + 1.0], height: fence_height }],
        }
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub occupancy: OccupancyGrid,
    pub ground: EsdfGrid,
    pub air: EsdfGrid,
    /// Highest allowed flight altitude, m.
    pub ceiling: f64,
}

/// Grid covering `[0, size]` horizontally and `[-BELOW_GROUND, height]` vertically.
pub fn world_geometry(size: [f64; 2], height: f64, resolution: f64) -> Result<GridGeometry, MapError> {
    if !(size[0] > 0.0 && size[1] > 0.0 && height > 0.0) {
        return Err(MapError::InvalidGrid(format!("size {size:?}, height {height}")));
    }
    let below = (BELOW_GROUND / resolution).ceil();
    let n = |len: f64| (len / resolution).round().max(1.0) as usize;
    GridGeometry::new(
        resolution,
        Vector3::new(0.5 * resolution, 0.5 * resolution, -below * resolution),
        [n(size[0]), n(size[1]), below as usize + (height / resolution).ceil() as usize + 1],
    )
}

fn rasterize(grid: &mut OccupancyGrid, inside: impl Fn(&Vector3<f64>) -> bool) {
    let g = grid.geometry;
    for k in 0..g.dims[2] {
        for j in 0..g.dims[1] {
            for i in 0..g.dims[0] {
                if inside(&g.cell_center(i, j, k)) {
                    grid.set(i, j, k, true);
                }
            }
        }
    }
}

fn rasterize_cylinder(grid: &mut OccupancyGrid, c: &Cylinder) {
    let g = grid.geometry;
    let r = g.resolution;
    let lo = |v: f64| (((v - c.radius) / r).floor().max(0.0)) as usize;
    let hi = |v: f64, n: usize| ((((v + c.radius) / r).ceil()) as usize + 1).min(n);
    for k in 0..g.dims[2] {
        for j in lo(c.center[1])..hi(c.center[1], g.dims[1]) {
            for i in lo(c.center[0])..hi(c.center[0], g.dims[0]) {
                let p = g.cell_center(i, j, k);
                if p.z <= c.height && (p.x - c.center[0]).hypot(p.y - c.center[1]) <= c.radius {
                    grid.set(i, j, k, true);
                }
            }
        }
    }
}

pub fn generate_forest(size: [f64; 2], height: f64, f: &ForestParams) -> Vec<Cylinder> {
    let mut rng = ChaCha8Rng::seed_from_u64(f.seed);
    let mut out = Vec::with_capacity(f.obstacles);
    let mut attempts = 0;
    while out.len() < f.obstacles && attempts < 100 * f.obstacles.max(1) {
        attempts += 1;
        let radius = rng.random_range(f.radius[0]..=f.radius[1]);
        let center = [rng.random_range(0.0..size[0]), rng.random_range(0.0..size[1])];
        let tall = rng.random_bool(f.tall_fraction.clamp(0.0, 1.0));
        let short = rng.random_range(f.short_height[0]..=f.short_height[1]);
        let blocked = f
            .clear
            .iter()
            .any(|c| (center[0] - c[0]).hypot(center[1] - c[1]) < f.clear_radius + radius);
        if blocked {
            continue;
        }
        out.push(Cylinder { center, radius, height: if tall { height + 1.0 } else { short } });
    }
    out
}

impl World {
    pub fn from_spec(spec: &WorldSpec, base_dir: Option<&Path>) -> Result<Self, MapError> {
        match spec {
            WorldSpec::Shapes { size, height, resolution, cylinders, boxes } => {
                let mut grid = OccupancyGrid::empty(world_geometry(*size, *height, *resolution)?);
                for c in cylinders {
                    rasterize_cylinder(&mut grid, c);
                }
                for b in boxes {
                    rasterize(&mut grid, |p| {
                        p.x >= b.min[0] && p.x <= b.max[0] && p.y >= b.min[1] && p.y <= b.max[1] && p.z <= b.height
                    });
                }
                Self::from_occupancy(grid)
            }
            WorldSpec::Forest { size, height, resolution, forest } => {
                let mut grid = OccupancyGrid::empty(world_geometry(*size, *height, *resolution)?);
                for c in generate_forest(*size, *height, forest) {
                    rasterize_cylinder(&mut grid, &c);
                }
                Self::from_occupancy(grid)
            }
            WorldSpec::File { path } => {
                let full = match base_dir {
                    Some(dir) => dir.join(path),
                    None => Path::new(path).to_path_buf(),
                };
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| MapError::Io(format!("{}: {e}", full.display())))?;
                Self::from_occupancy(OccupancyGrid::from_ascii(&text)?)
            }
        }
    }

    /// Builds both fields. Planar grids serve as both the ground and the
    /// flight field.
    pub fn from_occupancy(occupancy: OccupancyGrid) -> Result<Self, MapError> {
        let g = occupancy.geometry;
        if g.is_planar() {
            let field = build_esdf(&occupancy)?;
            return Ok(Self { ground: field.clone(), air: field, ceiling: f64::INFINITY, occupancy });
        }
        let layer_z = |k: usize| g.origin.z + k as f64 * g.resolution;
        let first = (0..g.dims[2]).find(|&k| layer_z(k) >= -0.5 * g.resolution).unwrap_or(0);
        let last = (0..g.dims[2]).rev().find(|&k| layer_z(k) <= GROUND_BAND).unwrap_or(first);
        let ground_grid = occupancy.flatten_layers(first..last + 1);
        // A fully blocked ground still leaves the flight field usable.
        let ground = match build_esdf(&ground_grid) {
            Ok(f) => f,
            Err(_) => EsdfGrid { geometry: ground_grid.geometry, dist: vec![0.0; ground_grid.cells.len()] },
        };
        let air = build_esdf(&occupancy)?;
        let ceiling = layer_z(g.dims[2] - 1) - g.resolution;
        Ok(Self { occupancy, ground, air, ceiling })
    }

    pub fn field(&self, mode: Mode) -> &EsdfGrid {
        match mode {
            Mode::Terrestrial => &self.ground,
            Mode::Aerial => &self.air,
        }
    }

    pub fn query(&self, mode: Mode, p: &Vector3<f64>) -> DistanceQuery {
        self.field(mode).query(p)
    }

    pub fn distance(&self, mode: Mode, p: &Vector3<f64>) -> f64 {
        self.field(mode).distance(p)
    }

    /// Horizontal extent of the world.
    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let (lo, hi) = self.occupancy.geometry.extent();
        ([lo.x, lo.y], [hi.x, hi.y])
    }

    pub fn in_bounds(&self, p: &Vector3<f64>, mode: Mode) -> bool {
        let (lo, hi) = self.bounds();
        let planar = p.x >= lo[0] && p.x <= hi[0] && p.y >= lo[1] && p.y <= hi[1];
        match mode {
            Mode::Terrestrial => planar,
            Mode::Aerial => planar && p.z >= 0.0 && p.z <= self.ceiling,
        }
    }

    /// Writes the grid file and a JSON metadata sidecar.
    pub fn save(&self, grid_path: &Path, metadata: &serde_json::Value) -> Result<(), MapError> {
        std::fs::write(grid_path, self.occupancy.to_ascii()).map_err(|e| MapError::Io(e.to_string()))?;
        let meta_path = grid_path.with_extension("json");
        let g = self.occupancy.geometry;
        let doc = serde_json::json!({
            "grid_file": grid_path.file_name().map(|n| n.to_string_lossy().into_owned()),
            "resolution": g.resolution,
            "origin": [g.origin.x, g.origin.y, g.origin.z],
            "dims": g.dims,
            "occupied_cells": self.occupancy.occupied_count(),
            "source": metadata,
        });
        let text = serde_json::to_string_pretty(&doc).map_err(|e| MapError::Io(e.to_string()))?;
        std::fs::write(meta_path, text).map_err(|e| MapError::Io(e.to_string()))
    }
}
