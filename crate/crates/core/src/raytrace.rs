//! Deterministic geometric channel simulation.
//!
//! Line-of-sight and specular reflection paths up to second order are found
//! with the image method: the source is mirrored across candidate face planes,
//! reflection points are recovered by back-projection from the receiver, and
//! each candidate is kept only if every reflection point lies on its face and
//! every leg is unobstructed. Paths are then summed into an OFDM channel
//! frequency response per transmit element.

use std::f64::consts::PI;

use glam::DVec3;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{sample_trajectory, AntennaArray, Scene, SceneError, Trajectory, Transceiver};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Highest reflection order the tracer supports.
pub const MAX_REFLECTION_ORDER: usize = 2;

/// Minimum parametric overlap for a segment to count as passing through a box.
const OCCLUSION_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("reflection order {0} is not supported (maximum {MAX_REFLECTION_ORDER})")]
    UnsupportedOrder(usize),
    #[error("transmitter and receiver coincide")]
    CoincidentEndpoints,
    #[error("invalid radio configuration: {0}")]
    InvalidRadio(String),
    #[error("position {0:?} lies outside the scene bounds")]
    OutOfBounds(DVec3),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioConfig {
    pub carrier_freq: f64,
    pub subcarrier_spacing: f64,
    pub n_subcarriers: usize,
    pub noise_figure_db: f64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig {
            carrier_freq: 3.5e9,
            subcarrier_spacing: 30e3,
            n_subcarriers: 69,
            noise_figure_db: 7.0,
        }
    }
}

impl RadioConfig {
    pub fn validate(&self) -> Result<(), TraceError> {
        if !(self.carrier_freq > 0.0) {
            return Err(TraceError::InvalidRadio("carrier frequency must be positive".into()));
        }
        if !(self.subcarrier_spacing > 0.0) {
            return Err(TraceError::InvalidRadio("subcarrier spacing must be positive".into()));
        }
        if self.n_subcarriers == 0 {
            return Err(TraceError::InvalidRadio("at least one subcarrier".into()));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }

    /// Offset of subcarrier `k` from the carrier; the grid is centered on it.
    pub fn subcarrier_offset(&self, k: usize) -> f64 {
        (k as f64 - (self.n_subcarriers as f64 - 1.0) / 2.0) * self.subcarrier_spacing
    }

    pub fn subcarrier_freq(&self, k: usize) -> f64 {
        self.carrier_freq + self.subcarrier_offset(k)
    }

    pub fn bandwidth(&self) -> f64 {
        self.subcarrier_spacing * self.n_subcarriers as f64
    }

    /// Thermal noise over the occupied band plus the receiver noise figure.
    pub fn noise_power_dbm(&self) -> f64 {
        -174.0 + 10.0 * self.bandwidth().log10() + self.noise_figure_db
    }
}

/// Azimuth (from +x toward +y) and elevation (above the horizontal), radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub azimuth: f64,
    pub elevation: f64,
}

impl Direction {
    pub fn from_vector(v: DVec3) -> Self {
        let len = v.length();
        Direction {
            azimuth: v.y.atan2(v.x),
            elevation: (v.z / len).clamp(-1.0, 1.0).asin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub surface: u32,
    pub point: DVec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationPath {
    pub delay: f64,
    pub length: f64,
    pub gain: Complex64,
    pub aod: Direction,
    pub aoa: Direction,
    pub interactions: Vec<Interaction>,
}

impl PropagationPath {
    pub fn order(&self) -> usize {
        self.interactions.len()
    }
}

/// Horizontal pointing of a planar array's broadside.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ArrayOrientation {
    pub azimuth: f64,
}

/// Spatial frequencies of a departure direction in the array frame: the
/// direction cosine along the array's horizontal axis and the vertical one.
pub fn direction_cosines(dir: Direction, orientation: ArrayOrientation) -> (f64, f64) {
    (
        dir.elevation.cos() * (dir.azimuth - orientation.azimuth).sin(),
        dir.elevation.sin(),
    )
}

/// Element phase responses of the array for given direction cosines,
/// element `m = row * cols + col`. Unit magnitude per element.
pub fn steering_from_cosines(array: &AntennaArray, u: f64, v: f64) -> Vec<Complex64> {
    let d = array.element_spacing;
    let c0 = (array.cols as f64 - 1.0) / 2.0;
    let r0 = (array.rows as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(array.n_elements());
    for r in 0..array.rows {
        for c in 0..array.cols {
            let phase = 2.0 * PI * d * ((c as f64 - c0) * u + (r as f64 - r0) * v);
            out.push(Complex64::from_polar(1.0, phase));
        }
    }
    out
}

pub fn steering_vector(
    array: &AntennaArray,
    orientation: ArrayOrientation,
    dir: Direction,
) -> Vec<Complex64> {
    if array.n_elements() == 1 {
        return vec![Complex64::new(1.0, 0.0)];
    }
    let (u, v) = direction_cosines(dir, orientation);
    steering_from_cosines(array, u, v)
}

/// Channel frequency response, row-major `[n_tx, n_subcarriers]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cfr {
    pub n_tx: usize,
    pub n_subcarriers: usize,
    pub data: Vec<Complex64>,
}

impl Cfr {
    pub fn zeros(n_tx: usize, n_subcarriers: usize) -> Self {
        Cfr {
            n_tx,
            n_subcarriers,
            data: vec![Complex64::new(0.0, 0.0); n_tx * n_subcarriers],
        }
    }

    pub fn get(&self, m: usize, k: usize) -> Complex64 {
        self.data[m * self.n_subcarriers + k]
    }

    /// Values across transmit elements at subcarrier `k`.
    pub fn subcarrier(&self, k: usize) -> Vec<Complex64> {
        (0..self.n_tx).map(|m| self.get(m, k)).collect()
    }

    /// Interleaved `[re, im]` flattening in `(element, subcarrier)` order.
    pub fn to_features(&self) -> Vec<f64> {
        self.data.iter().flat_map(|z| [z.re, z.im]).collect()
    }

    pub fn from_features(n_tx: usize, n_subcarriers: usize, features: &[f64]) -> Self {
        assert_eq!(features.len(), 2 * n_tx * n_subcarriers, "feature width");
        Cfr {
            n_tx,
            n_subcarriers,
            data: features
                .chunks_exact(2)
                .map(|p| Complex64::new(p[0], p[1]))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSnapshot {
    pub cfr: Cfr,
    pub rx_position: DVec3,
    pub slot_index: usize,
    pub paths: Vec<PropagationPath>,
}

/// A planar face of a box or the ground, with its outward normal along one axis.
#[derive(Debug, Clone, Copy)]
struct Face {
    id: u32,
    axis: usize,
    coord: f64,
    normal_sign: f64,
    lo: [f64; 2],
    hi: [f64; 2],
    reflectivity: Complex64,
}

impl Face {
    fn other_axes(&self) -> [usize; 2] {
        match self.axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    fn side(&self, p: DVec3) -> f64 {
        (p[self.axis] - self.coord) * self.normal_sign
    }

    fn mirror(&self, p: DVec3) -> DVec3 {
        let mut q = p;
        q[self.axis] = 2.0 * self.coord - p[self.axis];
        q
    }

    fn contains(&self, p: DVec3) -> bool {
        let [a, b] = self.other_axes();
        p[a] >= self.lo[0] && p[a] <= self.hi[0] && p[b] >= self.lo[1] && p[b] <= self.hi[1]
    }

    /// Point where the segment `from -> to` crosses this face's plane.
    fn cross(&self, from: DVec3, to: DVec3) -> Option<DVec3> {
        let denom = to[self.axis] - from[self.axis];
        if denom == 0.0 {
            return None;
        }
        let t = (self.coord - from[self.axis]) / denom;
        if !(t > 0.0 && t < 1.0) {
            return None;
        }
        let mut p = from + (to - from) * t;
        p[self.axis] = self.coord;
        Some(p)
    }
}

/// Precomputed face and obstacle lists for one scene.
#[derive(Debug, Clone)]
pub struct Tracer<'a> {
    scene: &'a Scene,
    faces: Vec<Face>,
    boxes: Vec<(DVec3, DVec3)>,
}

/// Surface id of the ground plane; box faces follow as `1 + 5 * box + face`.
pub const GROUND_SURFACE: u32 = 0;

impl<'a> Tracer<'a> {
    pub fn new(scene: &'a Scene) -> Self {
        let mut faces = vec![Face {
            id: GROUND_SURFACE,
            axis: 2,
            coord: 0.0,
            normal_sign: 1.0,
            lo: scene.bounds.min,
            hi: scene.bounds.max,
            reflectivity: scene.materials.ground,
        }];
        let mut boxes = Vec::new();
        for (b, cuboid) in scene.boxes().enumerate() {
            let lo = cuboid.min_corner();
            let hi = cuboid.max_corner();
            boxes.push((lo, hi));
            let r = scene.materials.for_class(cuboid.surface_class);
            let base = 1 + 5 * b as u32;
            let fp = cuboid.footprint;
            let h = cuboid.height;
            // -x, +x, -y, +y, roof
            faces.push(Face {
                id: base,
                axis: 0,
                coord: lo.x,
                normal_sign: -1.0,
                lo: [fp.min[1], 0.0],
                hi: [fp.max[1], h],
                reflectivity: r,
            });
            faces.push(Face {
                id: base + 1,
                axis: 0,
                coord: hi.x,
                normal_sign: 1.0,
                lo: [fp.min[1], 0.0],
                hi: [fp.max[1], h],
                reflectivity: r,
            });
            faces.push(Face {
                id: base + 2,
                axis: 1,
                coord: lo.y,
                normal_sign: -1.0,
                lo: [fp.min[0], 0.0],
                hi: [fp.max[0], h],
                reflectivity: r,
            });
            faces.push(Face {
                id: base + 3,
                axis: 1,
                coord: hi.y,
                normal_sign: 1.0,
                lo: [fp.min[0], 0.0],
                hi: [fp.max[0], h],
                reflectivity: r,
            });
            faces.push(Face {
                id: base + 4,
                axis: 2,
                coord: h,
                normal_sign: 1.0,
                lo: fp.min,
                hi: fp.max,
                reflectivity: r,
            });
        }
        Tracer {
            scene,
            faces,
            boxes,
        }
    }

    pub fn scene(&self) -> &Scene {
        self.scene
    }

    /// True if the open segment passes through the interior of any box.
    pub fn occluded(&self, p: DVec3, q: DVec3) -> bool {
        let d = q - p;
        self.boxes.iter().any(|(lo, hi)| {
            let mut t0: f64 = 0.0;
            let mut t1: f64 = 1.0;
            for axis in 0..3 {
                if d[axis] == 0.0 {
                    if p[axis] <= lo[axis] || p[axis] >= hi[axis] {
                        return false;
                    }
                } else {
                    let a = (lo[axis] - p[axis]) / d[axis];
                    let b = (hi[axis] - p[axis]) / d[axis];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
            }
            t1 - t0 > OCCLUSION_EPS
        })
    }

    /// First hit distance along a ray against boxes and the bounded ground.
    pub fn ray_hit(&self, origin: DVec3, dir: DVec3) -> Option<f64> {
        let mut best: Option<f64> = None;
        for (lo, hi) in &self.boxes {
            let mut t0 = 0.0_f64;
            let mut t1 = f64::INFINITY;
            let mut hit = true;
            for axis in 0..3 {
                if dir[axis] == 0.0 {
                    if origin[axis] < lo[axis] || origin[axis] > hi[axis] {
                        hit = false;
                        break;
                    }
                } else {
                    let a = (lo[axis] - origin[axis]) / dir[axis];
                    let b = (hi[axis] - origin[axis]) / dir[axis];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
            }
            if hit && t1 >= t0 && best.is_none_or(|bt| t0 < bt) {
                best = Some(t0);
            }
        }
        if dir.z < 0.0 {
            let t = -origin.z / dir.z;
            let p = origin + dir * t;
            if self.scene.bounds.contains_point(p.x, p.y) && best.is_none_or(|bt| t < bt) {
                best = Some(t);
            }
        }
        best.map(|t| t * dir.length())
    }

    pub fn trace(
        &self,
        tx: DVec3,
        rx: DVec3,
        max_order: usize,
        wavelength: f64,
    ) -> Result<Vec<PropagationPath>, TraceError> {
        if max_order > MAX_REFLECTION_ORDER {
            return Err(TraceError::UnsupportedOrder(max_order));
        }
        if tx == rx {
            return Err(TraceError::CoincidentEndpoints);
        }
        let mut paths = Vec::new();
        if !self.occluded(tx, rx) {
            paths.push(make_path(tx, rx, &[], &[], wavelength));
        }
        if max_order >= 1 {
            for f in &self.faces {
                if let Some(p) = self.first_order(f, tx, rx) {
                    paths.push(make_path(tx, rx, &[(f.id, p)], &[f.reflectivity], wavelength));
                }
            }
        }
        if max_order >= 2 {
            for f1 in &self.faces {
                if !(f1.side(tx) > 0.0) {
                    continue;
                }
                let img1 = f1.mirror(tx);
                for f2 in &self.faces {
                    if f2.id == f1.id {
                        continue;
                    }
                    if let Some((p1, p2)) = self.second_order(f1, f2, tx, img1, rx) {
                        paths.push(make_path(
                            tx,
                            rx,
                            &[(f1.id, p1), (f2.id, p2)],
                            &[f1.reflectivity, f2.reflectivity],
                            wavelength,
                        ));
                    }
                }
            }
        }
        sort_paths(&mut paths);
        Ok(paths)
    }

    fn first_order(&self, f: &Face, tx: DVec3, rx: DVec3) -> Option<DVec3> {
        if !(f.side(tx) > 0.0 && f.side(rx) > 0.0) {
            return None;
        }
        let img = f.mirror(tx);
        let p = f.cross(rx, img)?;
        if !f.contains(p) || self.occluded(tx, p) || self.occluded(p, rx) {
            return None;
        }
        Some(p)
    }

    fn second_order(
        &self,
        f1: &Face,
        f2: &Face,
        tx: DVec3,
        img1: DVec3,
        rx: DVec3,
    ) -> Option<(DVec3, DVec3)> {
        if !(f2.side(img1) > 0.0 && f2.side(rx) > 0.0) {
            return None;
        }
        let img2 = f2.mirror(img1);
        let p2 = f2.cross(rx, img2)?;
        if !f2.contains(p2) || !(f1.side(p2) > 0.0) {
            return None;
        }
        let p1 = f1.cross(p2, img1)?;
        if !f1.contains(p1) || !(f2.side(p1) > 0.0) {
            return None;
        }
        if self.occluded(tx, p1) || self.occluded(p1, p2) || self.occluded(p2, rx) {
            return None;
        }
        Some((p1, p2))
    }
}

fn make_path(
    tx: DVec3,
    rx: DVec3,
    hops: &[(u32, DVec3)],
    reflectivities: &[Complex64],
    wavelength: f64,
) -> PropagationPath {
    let mut points = Vec::with_capacity(hops.len() + 2);
    points.push(tx);
    points.extend(hops.iter().map(|h| h.1));
    points.push(rx);
    let length: f64 = points.windows(2).map(|w| (w[1] - w[0]).length()).sum();
    let coeff: Complex64 = reflectivities.iter().product();
    let amplitude = wavelength / (4.0 * PI * length);
    let phase = Complex64::from_polar(1.0, -2.0 * PI * length / wavelength);
    PropagationPath {
        delay: length / SPEED_OF_LIGHT,
        length,
        gain: coeff * amplitude * phase,
        aod: Direction::from_vector(points[1] - tx),
        aoa: Direction::from_vector(points[points.len() - 2] - rx),
        interactions: hops
            .iter()
            .map(|&(surface, point)| Interaction { surface, point })
            .collect(),
    }
}

/// Canonical path order: reflection order, then delay, then surface ids.
pub fn sort_paths(paths: &mut [PropagationPath]) {
    paths.sort_by(|a, b| {
        a.order()
            .cmp(&b.order())
            .then(a.delay.total_cmp(&b.delay))
            .then_with(|| {
                let ia = a.interactions.iter().map(|i| i.surface);
                let ib = b.interactions.iter().map(|i| i.surface);
                ia.cmp(ib)
            })
    });
}

/// LOS plus every specular path of order up to `max_order` between two points.
pub fn trace_paths(
    scene: &Scene,
    tx: DVec3,
    rx: DVec3,
    max_order: usize,
    radio: &RadioConfig,
) -> Result<Vec<PropagationPath>, TraceError> {
    radio.validate()?;
    Tracer::new(scene).trace(tx, rx, max_order, radio.wavelength())
}

/// Sums paths into a frequency response. The path gain already carries the
/// carrier phase, so each subcarrier adds only its baseband offset rotation.
pub fn paths_to_cfr(
    paths: &[PropagationPath],
    radio: &RadioConfig,
    array: &AntennaArray,
    orientation: ArrayOrientation,
) -> Cfr {
    let n_tx = array.n_elements();
    let k_count = radio.n_subcarriers;
    let mut cfr = Cfr::zeros(n_tx, k_count);
    for path in paths {
        let a = steering_vector(array, orientation, path.aod);
        let rot: Vec<Complex64> = (0..k_count)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * radio.subcarrier_offset(k) * path.delay))
            .collect();
        for (m, am) in a.iter().enumerate() {
            let g = path.gain * am;
            let row = &mut cfr.data[m * k_count..(m + 1) * k_count];
            for (h, r) in row.iter_mut().zip(&rot) {
                *h += g * r;
            }
        }
    }
    cfr
}

/// Ray-traces every slot of a trajectory. Slots are independent and may run
/// in parallel; output order and values do not depend on the thread count.
pub fn simulate_along_trajectory(
    scene: &Scene,
    tx: &Transceiver,
    orientation: ArrayOrientation,
    traj: &Trajectory,
    n_slots: usize,
    radio: &RadioConfig,
    max_order: usize,
) -> Result<Vec<ChannelSnapshot>, TraceError> {
    let positions = sample_trajectory(traj, n_slots)?;
    simulate_at_positions(scene, tx, orientation, &positions, radio, max_order)
}

/// One snapshot per receiver position, `slot_index` following input order.
pub fn simulate_at_positions(
    scene: &Scene,
    tx: &Transceiver,
    orientation: ArrayOrientation,
    positions: &[DVec3],
    radio: &RadioConfig,
    max_order: usize,
) -> Result<Vec<ChannelSnapshot>, TraceError> {
    radio.validate()?;
    tx.array.validate()?;
    if let Some(p) = positions
        .iter()
        .find(|p| !scene.bounds.contains_point(p.x, p.y) || p.z < 0.0)
    {
        return Err(TraceError::OutOfBounds(*p));
    }
    let tracer = Tracer::new(scene);
    let wavelength = radio.wavelength();
    positions
        .par_iter()
        .enumerate()
        .map(|(slot_index, &rx)| {
            let paths = tracer.trace(tx.position, rx, max_order, wavelength)?;
            let cfr = paths_to_cfr(&paths, radio, &tx.array, orientation);
            Ok(ChannelSnapshot {
                cfr,
                rx_position: rx,
                slot_index,
                paths,
            })
        })
        .collect()
}
