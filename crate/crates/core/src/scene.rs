//! Physical environment: axis-aligned buildings and vehicles on a flat ground
//! plane, the road network between them, and the transceivers and user
//! trajectories placed in it.
//!
//! Scenes are immutable once built. Both the ray tracer and the depth renderer
//! read them, so everything here is plain data plus validation.

use std::fs;
use std::path::Path;

use glam::DVec3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Version tag written into every scene file.
pub const SCENE_FORMAT_VERSION: u32 = 1;

/// Default receiver (user) antenna height in meters.
pub const USER_HEIGHT: f64 = 1.5;

/// Mast height of the base station above the roof it stands on.
pub const BS_MAST_HEIGHT: f64 = 2.0;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("scene file parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported scene file version {0}")]
    Version(u32),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("could not place vehicle {placed} of {requested} after {attempts} attempts")]
    PlacementFailed {
        placed: usize,
        requested: usize,
        attempts: usize,
    },
    #[error("invalid antenna array: {0}")]
    InvalidArray(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("trajectory path is {deficit:.6} m too short for the requested slots")]
    PathTooShort { deficit: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned rectangle in the ground plane, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect {
            min: [x0.min(x1), y0.min(y1)],
            max: [x0.max(x1), y0.max(y1)],
        }
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    /// Closed containment test.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.min[0] >= self.min[0]
            && other.min[1] >= self.min[1]
            && other.max[0] <= self.max[0]
            && other.max[1] <= self.max[1]
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.max[0].min(other.max[0]) - self.min[0].max(other.min[0]);
        let h = self.max[1].min(other.max[1]) - self.min[1].max(other.min[1]);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn expanded(&self, margin: f64) -> Rect {
        Rect {
            min: [self.min[0] - margin, self.min[1] - margin],
            max: [self.max[0] + margin, self.max[1] + margin],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceClass {
    Building,
    Vehicle,
}

/// A box standing on the ground plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub footprint: Rect,
    pub height: f64,
    pub surface_class: SurfaceClass,
}

impl Cuboid {
    pub fn new(footprint: Rect, height: f64, surface_class: SurfaceClass) -> Self {
        Cuboid {
            footprint,
            height,
            surface_class,
        }
    }

    pub fn min_corner(&self) -> DVec3 {
        DVec3::new(self.footprint.min[0], self.footprint.min[1], 0.0)
    }

    pub fn max_corner(&self) -> DVec3 {
        DVec3::new(self.footprint.max[0], self.footprint.max[1], self.height)
    }

    /// Strict interior test.
    pub fn contains_point(&self, p: DVec3) -> bool {
        p.x > self.footprint.min[0]
            && p.x < self.footprint.max[0]
            && p.y > self.footprint.min[1]
            && p.y < self.footprint.max[1]
            && p.z > 0.0
            && p.z < self.height
    }
}

/// One complex reflection coefficient per surface class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Materials {
    pub building: Complex64,
    pub vehicle: Complex64,
    pub ground: Complex64,
}

impl Default for Materials {
    fn default() -> Self {
        Materials {
            building: Complex64::new(0.6, 0.0),
            vehicle: Complex64::new(0.4, 0.0),
            ground: Complex64::new(0.3, 0.0),
        }
    }
}

impl Materials {
    pub fn for_class(&self, class: SurfaceClass) -> Complex64 {
        match class {
            SurfaceClass::Building => self.building,
            SurfaceClass::Vehicle => self.vehicle,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub bounds: Rect,
    pub buildings: Vec<Cuboid>,
    pub vehicles: Vec<Cuboid>,
    pub roads: Vec<Rect>,
    pub materials: Materials,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    version: u32,
    bounds: Rect,
    buildings: Vec<Cuboid>,
    roads: Vec<Rect>,
    vehicles: Vec<Cuboid>,
    materials: Materials,
}

impl Scene {
    /// A scene with no obstacles: only the ground plane.
    pub fn empty(bounds: Rect) -> Self {
        Scene {
            bounds,
            buildings: Vec::new(),
            vehicles: Vec::new(),
            roads: Vec::new(),
            materials: Materials::default(),
        }
    }

    /// Buildings followed by vehicles; surface ids in the ray tracer follow this order.
    pub fn boxes(&self) -> impl Iterator<Item = &Cuboid> {
        self.buildings.iter().chain(self.vehicles.iter())
    }

    pub fn diagonal(&self) -> f64 {
        self.bounds.diagonal()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let mut problems = Vec::new();
        if !(self.bounds.width() > 0.0 && self.bounds.height() > 0.0) {
            problems.push("bounds are empty".to_string());
        }
        for (label, list) in [("building", &self.buildings), ("vehicle", &self.vehicles)] {
            for (i, b) in list.iter().enumerate() {
                if !(b.height > 0.0) || !b.height.is_finite() {
                    problems.push(format!("{label} {i}: height {} is not positive", b.height));
                }
                if !(b.footprint.area() > 0.0) {
                    problems.push(format!("{label} {i}: footprint has zero area"));
                }
                if !self.bounds.contains_rect(&b.footprint) {
                    problems.push(format!("{label} {i}: footprint lies outside bounds"));
                }
            }
        }
        for i in 0..self.buildings.len() {
            for j in (i + 1)..self.buildings.len() {
                if self.buildings[i]
                    .footprint
                    .intersection_area(&self.buildings[j].footprint)
                    > 0.0
                {
                    problems.push(format!("buildings {i} and {j} overlap"));
                }
            }
        }
        for (i, r) in self.roads.iter().enumerate() {
            if !self.bounds.contains_rect(r) {
                problems.push(format!("road {i}: strip lies outside bounds"));
            }
        }
        for (name, r) in [
            ("building", self.materials.building),
            ("vehicle", self.materials.vehicle),
            ("ground", self.materials.ground),
        ] {
            if r.norm() > 1.0 {
                problems.push(format!("{name} reflectivity magnitude exceeds 1"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SceneError::Validation(problems))
        }
    }

    pub fn to_json(&self) -> String {
        let file = SceneFile {
            version: SCENE_FORMAT_VERSION,
            bounds: self.bounds,
            buildings: self.buildings.clone(),
            roads: self.roads.clone(),
            vehicles: self.vehicles.clone(),
            materials: self.materials,
        };
        serde_json::to_string_pretty(&file).expect("scene serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let file: SceneFile = serde_json::from_str(text).map_err(|e| SceneError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if file.version != SCENE_FORMAT_VERSION {
            return Err(SceneError::Version(file.version));
        }
        let scene = Scene {
            bounds: file.bounds,
            buildings: file.buildings,
            vehicles: file.vehicles,
            roads: file.roads,
            materials: file.materials,
        };
        scene.validate()?;
        Ok(scene)
    }

    /// Short content hash used as a provenance id in manifests and reports.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The building whose footprint center is closest to the scene center.
    pub fn central_building(&self) -> Option<&Cuboid> {
        let c = self.bounds.center();
        self.buildings.iter().min_by(|a, b| {
            let da = dist2(a.footprint.center(), c);
            let db = dist2(b.footprint.center(), c);
            da.total_cmp(&db)
        })
    }

    /// Rooftop base-station site: the corner of the central building nearest
    /// the scene center, inset 1 m, raised a mast height above the roof.
    pub fn rooftop_site(&self) -> Option<DVec3> {
        let b = self.central_building()?;
        let c = self.bounds.center();
        let fp = &b.footprint;
        let inset = 1.0_f64.min(0.25 * fp.width()).min(0.25 * fp.height());
        let x = if (fp.min[0] - c[0]).abs() < (fp.max[0] - c[0]).abs() {
            fp.min[0] + inset
        } else {
            fp.max[0] - inset
        };
        let y = if (fp.min[1] - c[1]).abs() < (fp.max[1] - c[1]).abs() {
            fp.min[1] + inset
        } else {
            fp.max[1] - inset
        };
        Some(DVec3::new(x, y, b.height + BS_MAST_HEIGHT))
    }

    /// True if the point is outside every box and at or above the ground.
    pub fn is_free(&self, p: DVec3) -> bool {
        p.z >= 0.0 && self.boxes().all(|b| !b.contains_point(p))
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<(), SceneError> {
    fs::write(path, scene.to_json())?;
    Ok(())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, SceneError> {
    let text = fs::read_to_string(path)?;
    Scene::from_json(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayKind {
    Single,
    Upa,
}

/// Antenna array at the base station. Element spacing is in wavelengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AntennaArray {
    pub kind: ArrayKind,
    pub rows: usize,
    pub cols: usize,
    pub element_spacing: f64,
}

impl AntennaArray {
    pub fn single() -> Self {
        AntennaArray {
            kind: ArrayKind::Single,
            rows: 1,
            cols: 1,
            element_spacing: 0.5,
        }
    }

    pub fn upa(rows: usize, cols: usize, element_spacing: f64) -> Result<Self, SceneError> {
        let a = AntennaArray {
            kind: ArrayKind::Upa,
            rows,
            cols,
            element_spacing,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.element_spacing > 0.0) {
            return Err(SceneError::InvalidArray("spacing must be positive".into()));
        }
        match self.kind {
            ArrayKind::Single if self.rows != 1 || self.cols != 1 => Err(SceneError::InvalidArray(
                "single antenna must be 1x1".into(),
            )),
            ArrayKind::Upa if self.rows * self.cols < 2 => Err(SceneError::InvalidArray(
                "UPA needs at least two elements".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn n_elements(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transceiver {
    pub position: DVec3,
    pub array: AntennaArray,
    pub tx_power_dbm: f64,
}

/// Piecewise-linear user path traversed at constant speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<DVec3>,
    pub speed: f64,
    pub slot_duration: f64,
}

impl Trajectory {
    pub fn new(waypoints: Vec<DVec3>, speed: f64, slot_duration: f64) -> Result<Self, SceneError> {
        let t = Trajectory {
            waypoints,
            speed,
            slot_duration,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.waypoints.len() < 2 {
            return Err(SceneError::InvalidTrajectory(
                "at least two waypoints are required".into(),
            ));
        }
        if !(self.speed > 0.0) || !(self.slot_duration > 0.0) {
            return Err(SceneError::InvalidTrajectory(
                "speed and slot duration must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| (w[1] - w[0]).length())
            .sum()
    }

    /// Distance covered between consecutive slots.
    pub fn step(&self) -> f64 {
        self.speed * self.slot_duration
    }

    /// Point at arc length `s` along the waypoint polyline (clamped to the end).
    pub fn point_at(&self, s: f64) -> DVec3 {
        let mut remaining = s.max(0.0);
        for w in self.waypoints.windows(2) {
            let seg = w[1] - w[0];
            let len = seg.length();
            if remaining <= len {
                if len == 0.0 {
                    return w[0];
                }
                return w[0] + seg * (remaining / len);
            }
            remaining -= len;
        }
        *self.waypoints.last().expect("validated trajectory")
    }
}

/// Positions at successive slots, spaced `speed * slot_duration` apart in arc
/// length and starting at the first waypoint.
pub fn sample_trajectory(traj: &Trajectory, n_slots: usize) -> Result<Vec<DVec3>, SceneError> {
    traj.validate()?;
    if n_slots == 0 {
        return Ok(Vec::new());
    }
    let needed = traj.step() * (n_slots - 1) as f64;
    let length = traj.length();
    // Allow round-off in the accumulated segment lengths.
    if needed > length * (1.0 + 1e-12) + 1e-12 {
        return Err(SceneError::PathTooShort {
            deficit: needed - length,
        });
    }
    Ok((0..n_slots)
        .map(|i| traj.point_at(traj.step() * i as f64))
        .collect())
}

/// Parameters of the procedural urban layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub bounds: Rect,
    pub groups: usize,
    pub roads: usize,
    pub road_width: f64,
    /// Inclusive range of vehicle counts.
    pub vehicles: [usize; 2],
    /// Building lots per group, as columns x rows.
    pub lots_per_group: [usize; 2],
    pub lot_occupancy: f64,
    pub alley_width: f64,
    pub sidewalk: f64,
    pub building_height: [f64; 2],
    /// Length, width, height of every vehicle box.
    pub vehicle_size: [f64; 3],
    pub materials: Materials,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            bounds: Rect::new(-100.0, -100.0, 100.0, 100.0),
            groups: 4,
            roads: 4,
            road_width: 16.0,
            vehicles: [6, 12],
            lots_per_group: [2, 2],
            lot_occupancy: 0.8,
            alley_width: 4.0,
            sidewalk: 2.0,
            building_height: [10.0, 40.0],
            vehicle_size: [4.5, 1.8, 1.5],
            materials: Materials::default(),
        }
    }
}

/// Street layout derived from a spec: group cells, road strips, and the
/// intersection squares between them.
#[derive(Debug, Clone)]
pub struct StreetGrid {
    pub columns: usize,
    pub rows: usize,
    /// x of each vertical road centerline.
    pub vertical: Vec<f64>,
    /// y of each horizontal road centerline.
    pub horizontal: Vec<f64>,
    pub road_width: f64,
    pub bounds: Rect,
}

impl StreetGrid {
    pub fn from_spec(spec: &SceneSpec) -> Result<Self, SceneError> {
        if spec.groups == 0 {
            return Err(SceneError::InvalidSpec("at least one building group".into()));
        }
        if !(spec.bounds.area() > 0.0) {
            return Err(SceneError::InvalidSpec("bounds are empty".into()));
        }
        let columns = (spec.groups as f64).sqrt().ceil() as usize;
        let rows = spec.groups.div_ceil(columns);
        let b = spec.bounds;
        let vertical: Vec<f64> = (1..columns)
            .map(|i| b.min[0] + b.width() * i as f64 / columns as f64)
            .collect();
        let horizontal: Vec<f64> = (1..rows)
            .map(|j| b.min[1] + b.height() * j as f64 / rows as f64)
            .collect();
        let grid = StreetGrid {
            columns,
            rows,
            vertical,
            horizontal,
            road_width: spec.road_width,
            bounds: b,
        };
        let expected = grid.road_segments().len();
        if expected != spec.roads {
            return Err(SceneError::InvalidSpec(format!(
                "{} groups lay out as {}x{} blocks separated by {} road segments, not {}",
                spec.groups, columns, rows, expected, spec.roads
            )));
        }
        let cell_w = b.width() / columns as f64 - spec.road_width - 2.0 * spec.sidewalk;
        let cell_h = b.height() / rows as f64 - spec.road_width - 2.0 * spec.sidewalk;
        if cell_w <= 0.0 || cell_h <= 0.0 {
            return Err(SceneError::InvalidSpec(
                "roads leave no room for buildings".into(),
            ));
        }
        Ok(grid)
    }

    /// Road strips between consecutive crossings (or the scene edge).
    pub fn road_segments(&self) -> Vec<Rect> {
        let hw = 0.5 * self.road_width;
        let b = self.bounds;
        let mut out = Vec::new();
        for &x in &self.vertical {
            let mut cuts = vec![b.min[1]];
            cuts.extend(self.horizontal.iter().copied());
            cuts.push(b.max[1]);
            for w in cuts.windows(2) {
                out.push(Rect::new(x - hw, w[0], x + hw, w[1]));
            }
        }
        for &y in &self.horizontal {
            let mut cuts = vec![b.min[0]];
            cuts.extend(self.vertical.iter().copied());
            cuts.push(b.max[0]);
            for w in cuts.windows(2) {
                out.push(Rect::new(w[0], y - hw, w[1], y + hw));
            }
        }
        out
    }

    pub fn intersections(&self) -> Vec<Rect> {
        let hw = 0.5 * self.road_width;
        let mut out = Vec::new();
        for &x in &self.vertical {
            for &y in &self.horizontal {
                out.push(Rect::new(x - hw, y - hw, x + hw, y + hw));
            }
        }
        out
    }

    /// Building block area of group cell (column, row), excluding roads and sidewalks.
    pub fn cell(&self, column: usize, row: usize, sidewalk: f64) -> Rect {
        let b = self.bounds;
        let cw = b.width() / self.columns as f64;
        let ch = b.height() / self.rows as f64;
        let hw = 0.5 * self.road_width;
        let x0 = b.min[0] + cw * column as f64;
        let y0 = b.min[1] + ch * row as f64;
        let left = if column == 0 { sidewalk } else { hw + sidewalk };
        let right = if column + 1 == self.columns {
            sidewalk
        } else {
            hw + sidewalk
        };
        let bottom = if row == 0 { sidewalk } else { hw + sidewalk };
        let top = if row + 1 == self.rows {
            sidewalk
        } else {
            hw + sidewalk
        };
        Rect::new(x0 + left, y0 + bottom, x0 + cw - right, y0 + ch - top)
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 2000;

/// Procedurally generates a box-world urban block layout. Pure in `(seed, spec)`.
pub fn generate_urban_scene(seed: u64, spec: &SceneSpec) -> Result<Scene, SceneError> {
    if spec.vehicles[0] > spec.vehicles[1] {
        return Err(SceneError::InvalidSpec("vehicle range is reversed".into()));
    }
    if !(spec.building_height[0] > 0.0 && spec.building_height[1] >= spec.building_height[0]) {
        return Err(SceneError::InvalidSpec("building height range".into()));
    }
    let [lots_x, lots_y] = spec.lots_per_group;
    if lots_x == 0 || lots_y == 0 {
        return Err(SceneError::InvalidSpec("lots per group must be positive".into()));
    }
    let grid = StreetGrid::from_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut buildings = Vec::new();
    for g in 0..spec.groups {
        let cell = grid.cell(g % grid.columns, g / grid.columns, spec.sidewalk);
        let lot_w = (cell.width() - spec.alley_width * (lots_x - 1) as f64) / lots_x as f64;
        let lot_h = (cell.height() - spec.alley_width * (lots_y - 1) as f64) / lots_y as f64;
        if lot_w <= 1.0 || lot_h <= 1.0 {
            return Err(SceneError::InvalidSpec("building lots are too small".into()));
        }
        let mut group = Vec::new();
        for ly in 0..lots_y {
            for lx in 0..lots_x {
                let occupied = rng.random::<f64>() < spec.lot_occupancy;
                let x0 = cell.min[0] + lx as f64 * (lot_w + spec.alley_width);
                let y0 = cell.min[1] + ly as f64 * (lot_h + spec.alley_width);
                // Draw the shape unconditionally so every lot consumes the same randomness.
                let max_inset_x = 0.2 * lot_w;
                let max_inset_y = 0.2 * lot_h;
                let insets: [f64; 4] = [
                    rng.random_range(0.0..=max_inset_x),
                    rng.random_range(0.0..=max_inset_x),
                    rng.random_range(0.0..=max_inset_y),
                    rng.random_range(0.0..=max_inset_y),
                ];
                let height = rng.random_range(spec.building_height[0]..=spec.building_height[1]);
                if occupied {
                    group.push(Cuboid::new(
                        Rect::new(
                            x0 + insets[0],
                            y0 + insets[2],
                            x0 + lot_w - insets[1],
                            y0 + lot_h - insets[3],
                        ),
                        height,
                        SurfaceClass::Building,
                    ));
                }
            }
        }
        if group.is_empty() {
            // Every group keeps at least one building: fill the lot nearest the scene center.
            let c = spec.bounds.center();
            let mut best: Option<(f64, Rect)> = None;
            for ly in 0..lots_y {
                for lx in 0..lots_x {
                    let x0 = cell.min[0] + lx as f64 * (lot_w + spec.alley_width);
                    let y0 = cell.min[1] + ly as f64 * (lot_h + spec.alley_width);
                    let r = Rect::new(x0, y0, x0 + lot_w, y0 + lot_h);
                    let d = dist2(r.center(), c);
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, r));
                    }
                }
            }
            let height = rng.random_range(spec.building_height[0]..=spec.building_height[1]);
            group.push(Cuboid::new(
                best.expect("at least one lot").1,
                height,
                SurfaceClass::Building,
            ));
        }
        buildings.extend(group);
    }

    let roads = grid.road_segments();
    let n_vehicles = rng.random_range(spec.vehicles[0]..=spec.vehicles[1]);
    let vehicles = place_vehicles(&mut rng, &grid, &roads, n_vehicles, spec)?;

    let scene = Scene {
        bounds: spec.bounds,
        buildings,
        vehicles,
        roads,
        materials: spec.materials,
    };
    scene.validate()?;
    Ok(scene)
}

fn place_vehicles(
    rng: &mut ChaCha8Rng,
    grid: &StreetGrid,
    roads: &[Rect],
    count: usize,
    spec: &SceneSpec,
) -> Result<Vec<Cuboid>, SceneError> {
    let [len, wid, hgt] = spec.vehicle_size;
    let crossings = grid.intersections();
    let mut placed: Vec<Cuboid> = Vec::with_capacity(count);
    if count == 0 {
        return Ok(placed);
    }
    if roads.is_empty() {
        return Err(SceneError::PlacementFailed {
            placed: 0,
            requested: count,
            attempts: 0,
        });
    }
    let mut attempts = 0;
    while placed.len() < count {
        if attempts >= MAX_PLACEMENT_ATTEMPTS * count {
            return Err(SceneError::PlacementFailed {
                placed: placed.len(),
                requested: count,
                attempts,
            });
        }
        attempts += 1;
        let road = roads[rng.random_range(0..roads.len())];
        let vertical = road.height() > road.width();
        // Vehicles keep to the two lanes either side of the centerline.
        let lane = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let along = rng.random::<f64>();
        let c = road.center();
        let offset = lane * 0.25 * spec.road_width;
        let fp = if vertical {
            let y = road.min[1] + 0.5 * len + along * (road.height() - len);
            Rect::new(
                c[0] + offset - 0.5 * wid,
                y - 0.5 * len,
                c[0] + offset + 0.5 * wid,
                y + 0.5 * len,
            )
        } else {
            let x = road.min[0] + 0.5 * len + along * (road.width() - len);
            Rect::new(
                x - 0.5 * len,
                c[1] + offset - 0.5 * wid,
                x + 0.5 * len,
                c[1] + offset + 0.5 * wid,
            )
        };
        if !road.contains_rect(&fp) || !spec.bounds.contains_rect(&fp) {
            continue;
        }
        if crossings.iter().any(|x| x.intersection_area(&fp) > 0.0) {
            continue;
        }
        if placed
            .iter()
            .any(|v| v.footprint.expanded(0.5).intersection_area(&fp) > 0.0)
        {
            continue;
        }
        placed.push(Cuboid::new(fp, hgt, SurfaceClass::Vehicle));
    }
    Ok(placed)
}

/// `n` receiver positions at user height drawn uniformly over the road
/// area, skipping points inside vehicles. Pure in `(scene, n, seed)`.
pub fn road_positions(scene: &Scene, n: usize, seed: u64) -> Result<Vec<DVec3>, SceneError> {
    let total: f64 = scene.roads.iter().map(Rect::area).sum();
    if n > 0 && !(total > 0.0) {
        return Err(SceneError::InvalidSpec("scene has no road area".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS * n.max(1) {
            return Err(SceneError::PlacementFailed {
                placed: out.len(),
                requested: n,
                attempts,
            });
        }
        let mut pick = rng.random::<f64>() * total;
        let mut road = scene.roads[scene.roads.len() - 1];
        for r in &scene.roads {
            if pick < r.area() {
                road = *r;
                break;
            }
            pick -= r.area();
        }
        let p = DVec3::new(
            rng.random_range(road.min[0]..=road.max[0]),
            rng.random_range(road.min[1]..=road.max[1]),
            USER_HEIGHT,
        );
        if scene.is_free(p) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Polyline through the given ground-plane points at user height.
pub fn street_route(points: &[[f64; 2]]) -> Vec<DVec3> {
    points
        .iter()
        .map(|p| DVec3::new(p[0], p[1], USER_HEIGHT))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scene_has_four_groups_and_roads() {
        let spec = SceneSpec::default();
        let scene = generate_urban_scene(7, &spec).unwrap();
        assert_eq!(scene.roads.len(), 4);
        let grid = StreetGrid::from_spec(&spec).unwrap();
        for g in 0..4 {
            let cell = grid.cell(g % 2, g / 2, spec.sidewalk);
            let n = scene
                .buildings
                .iter()
                .filter(|b| cell.contains_rect(&b.footprint))
                .count();
            assert!(n >= 1, "group {g} is empty");
        }
        let in_groups: usize = (0..4)
            .map(|g| {
                let cell = grid.cell(g % 2, g / 2, spec.sidewalk);
                scene
                    .buildings
                    .iter()
                    .filter(|b| cell.contains_rect(&b.footprint))
                    .count()
            })
            .sum();
        assert_eq!(in_groups, scene.buildings.len());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::default();
        let a = generate_urban_scene(7, &spec).unwrap();
        let b = generate_urban_scene(7, &spec).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = generate_urban_scene(8, &spec).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn zero_vehicles() {
        let spec = SceneSpec {
            vehicles: [0, 0],
            ..SceneSpec::default()
        };
        assert!(generate_urban_scene(7, &spec).unwrap().vehicles.is_empty());
    }

    #[test]
    fn vehicles_sit_on_roads_without_overlap() {
        for seed in 0..20 {
            let scene = generate_urban_scene(seed, &SceneSpec::default()).unwrap();
            for v in &scene.vehicles {
                assert!(scene.roads.iter().any(|r| r.contains_rect(&v.footprint)));
            }
            for i in 0..scene.vehicles.len() {
                for j in (i + 1)..scene.vehicles.len() {
                    assert_eq!(
                        scene.vehicles[i]
                            .footprint
                            .intersection_area(&scene.vehicles[j].footprint),
                        0.0
                    );
                }
            }
        }
    }

    #[test]
    fn too_many_vehicles_fails_placement() {
        let spec = SceneSpec {
            vehicles: [5000, 5000],
            ..SceneSpec::default()
        };
        assert!(matches!(
            generate_urban_scene(1, &spec),
            Err(SceneError::PlacementFailed { .. })
        ));
    }

    #[test]
    fn inconsistent_road_count_is_rejected() {
        let spec = SceneSpec {
            roads: 3,
            ..SceneSpec::default()
        };
        assert!(matches!(
            generate_urban_scene(1, &spec),
            Err(SceneError::InvalidSpec(_))
        ));
    }

    #[test]
    fn trajectory_straight_line() {
        let t = Trajectory::new(
            vec![DVec3::ZERO, DVec3::new(100.0, 0.0, 0.0)],
            10.0,
            0.1,
        )
        .unwrap();
        let pts = sample_trajectory(&t, 3).unwrap();
        assert_eq!(pts.len(), 3);
        for (i, p) in pts.iter().enumerate() {
            assert!((p.x - i as f64).abs() < 1e-12);
        }
        assert_eq!(sample_trajectory(&t, 1).unwrap(), vec![DVec3::ZERO]);
    }

    #[test]
    fn trajectory_l_shape_past_corner() {
        // 10 m east then north; arc length 13 lands 3 m up the second leg.
        let t = Trajectory::new(
            vec![
                DVec3::ZERO,
                DVec3::new(10.0, 0.0, 0.0),
                DVec3::new(10.0, 10.0, 0.0),
            ],
            13.0,
            1.0,
        )
        .unwrap();
        let pts = sample_trajectory(&t, 2).unwrap();
        assert!((pts[1] - DVec3::new(10.0, 3.0, 0.0)).length() < 1e-12);
    }

    #[test]
    fn trajectory_too_short_names_deficit() {
        let t = Trajectory::new(vec![DVec3::ZERO, DVec3::new(5.0, 0.0, 0.0)], 1.0, 1.0).unwrap();
        match sample_trajectory(&t, 8) {
            Err(SceneError::PathTooShort { deficit }) => assert!((deficit - 2.0).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_arrays() {
        assert!(AntennaArray::upa(1, 1, 0.5).is_err());
        assert!(AntennaArray::upa(2, 2, 0.0).is_err());
        let bad = AntennaArray {
            kind: ArrayKind::Single,
            rows: 2,
            cols: 1,
            element_spacing: 0.5,
        };
        assert!(bad.validate().is_err());
        assert_eq!(AntennaArray::upa(4, 4, 0.5).unwrap().n_elements(), 16);
    }

    #[test]
    fn building_outside_bounds_fails_validation() {
        let mut scene = Scene::empty(Rect::new(0.0, 0.0, 50.0, 50.0));
        scene.buildings.push(Cuboid::new(
            Rect::new(40.0, 40.0, 60.0, 45.0),
            10.0,
            SurfaceClass::Building,
        ));
        match Scene::from_json(&scene.to_json()) {
            Err(SceneError::Validation(v)) => assert!(v[0].contains("building 0")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_file_reports_position() {
        let err = Scene::from_json("{\n  \"version\": 1,\n  \"bounds\": 3\n}").unwrap_err();
        match err {
            SceneError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_scene_round_trips() {
        let scene = Scene::empty(Rect::new(0.0, 0.0, 10.0, 10.0));
        assert_eq!(Scene::from_json(&scene.to_json()).unwrap(), scene);
    }

    #[test]
    fn rooftop_site_is_above_central_building() {
        let scene = generate_urban_scene(7, &SceneSpec::default()).unwrap();
        let b = scene.central_building().unwrap();
        let site = scene.rooftop_site().unwrap();
        assert!((site.z - b.height - BS_MAST_HEIGHT).abs() < 1e-12);
        assert!(b.footprint.contains_point(site.x, site.y));
    }
}
