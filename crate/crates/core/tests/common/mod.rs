//! Shared test oracles.
#![allow(dead_code)]

use dtclab::scene::{Cuboid, Rect, Scene, SurfaceClass};
use glam::DVec3;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use std::f64::consts::PI;

pub const C: f64 = 299_792_458.0;

/// Up to `max_boxes` random buildings in a 100 m square, with random
/// reflectivities.
pub fn random_scene<R: Rng>(rng: &mut R, max_boxes: usize) -> Scene {
    let mut scene = Scene::empty(Rect::new(-50.0, -50.0, 50.0, 50.0));
    let n = rng.random_range(0..=max_boxes);
    for _ in 0..n {
        let x0 = rng.random_range(-45.0..35.0);
        let y0 = rng.random_range(-45.0..35.0);
        let w = rng.random_range(3.0..12.0);
        let d = rng.random_range(3.0..12.0);
        let h = rng.random_range(4.0..30.0);
        let fp = Rect::new(x0, y0, (x0 + w).min(49.0), (y0 + d).min(49.0));
        scene.buildings.push(Cuboid::new(fp, h, SurfaceClass::Building));
    }
    scene.materials.building = Complex64::from_polar(rng.random_range(0.2..0.9), rng.random_range(-PI..PI));
    scene.materials.ground = Complex64::from_polar(rng.random_range(0.2..0.9), rng.random_range(-PI..PI));
    scene
}

/// A point inside the bounds and outside every box, at a random height.
pub fn free_point<R: Rng>(rng: &mut R, scene: &Scene) -> DVec3 {
    loop {
        let p = DVec3::new(
            rng.random_range(-48.0..48.0),
            rng.random_range(-48.0..48.0),
            rng.random_range(1.0..35.0),
        );
        if !scene.boxes().any(|b| inside(b, p, 0.5)) {
            return p;
        }
    }
}

fn inside(b: &Cuboid, p: DVec3, margin: f64) -> bool {
    p.x > b.footprint.min[0] - margin
        && p.x < b.footprint.max[0] + margin
        && p.y > b.footprint.min[1] - margin
        && p.y < b.footprint.max[1] + margin
        && p.z < b.height + margin
}

/// Bounded reflecting plane: `axis` coordinate fixed at `coord`, reflecting
/// towards `normal_sign`, spanning `lo..hi` in the two remaining axes.
#[derive(Debug, Clone, Copy)]
pub struct Plane {
    axis: usize,
    coord: f64,
    normal_sign: f64,
    lo: [f64; 2],
    hi: [f64; 2],
    r: Complex64,
}

impl Plane {
    /// The two in-plane axes, ascending.
    fn free_axes(&self) -> [usize; 2] {
        match self.axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    fn front(&self, p: DVec3) -> bool {
        (p[self.axis] - self.coord) * self.normal_sign > 1e-9
    }

    fn within(&self, p: DVec3) -> bool {
        let [a, b] = self.free_axes();
        p[a] >= self.lo[0] && p[a] <= self.hi[0] && p[b] >= self.lo[1] && p[b] <= self.hi[1]
    }
}

/// Ground plus five faces per box; bounds follow [`Plane::free_axes`].
pub fn planes(scene: &Scene) -> Vec<Plane> {
    let b = scene.bounds;
    let mut out = vec![Plane {
        axis: 2,
        coord: 0.0,
        normal_sign: 1.0,
        lo: b.min,
        hi: b.max,
        r: scene.materials.ground,
    }];
    for c in scene.boxes() {
        let r = scene.materials.for_class(c.surface_class);
        let f = c.footprint;
        for (axis, coord, sign) in [(0, f.min[0], -1.0), (0, f.max[0], 1.0)] {
            out.push(Plane { axis, coord, normal_sign: sign, lo: [f.min[1], 0.0], hi: [f.max[1], c.height], r });
        }
        for (axis, coord, sign) in [(1, f.min[1], -1.0), (1, f.max[1], 1.0)] {
            out.push(Plane { axis, coord, normal_sign: sign, lo: [f.min[0], 0.0], hi: [f.max[0], c.height], r });
        }
        out.push(Plane { axis: 2, coord: c.height, normal_sign: 1.0, lo: f.min, hi: f.max, r });
    }
    out
}

/// True when the open segment crosses the interior of a box.
fn blocked(scene: &Scene, p: DVec3, q: DVec3) -> bool {
    scene.boxes().any(|c| {
        // Clip against the slabs, then confirm the overlap midpoint is interior.
        let lo = DVec3::new(c.footprint.min[0], c.footprint.min[1], 0.0);
        let hi = DVec3::new(c.footprint.max[0], c.footprint.max[1], c.height);
        let d = q - p;
        let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
        for a in 0..3 {
            if d[a].abs() < 1e-300 {
                if p[a] <= lo[a] || p[a] >= hi[a] {
                    return false;
                }
                continue;
            }
            let (u, v) = ((lo[a] - p[a]) / d[a], (hi[a] - p[a]) / d[a]);
            t0 = t0.max(u.min(v));
            t1 = t1.min(u.max(v));
        }
        if t1 - t0 <= 1e-9 {
            return false;
        }
        let m = p + d * (0.5 * (t0 + t1));
        (0..3).all(|a| m[a] > lo[a] && m[a] < hi[a])
    })
}

/// Reflection points on `seq` minimizing the total length tx -> ... -> rx
/// (Fermat's principle). The length is convex but not smooth where two
/// consecutive points meet, so damped Newton is restarted from several
/// interior points until it reaches a smooth stationary point.
pub fn fermat_points(seq: &[Plane], tx: DVec3, rx: DVec3) -> Option<Vec<DVec3>> {
    const STARTS: [(f64, f64); 7] = [(0.5, 0.5), (0.25, 0.25), (0.75, 0.75), (0.25, 0.75), (0.75, 0.25), (0.1, 0.9), (0.9, 0.1)];
    STARTS.iter().enumerate().find_map(|(n, &(fa, fb))| {
        let x0: Vec<f64> = seq
            .iter()
            .enumerate()
            .flat_map(|(i, pl)| {
                // Alternate the start pattern between hops so they do not coincide.
                let (u, v) = if (i + n) % 2 == 0 { (fa, fb) } else { (fb, fa) };
                [pl.lo[0] + u * (pl.hi[0] - pl.lo[0]), pl.lo[1] + v * (pl.hi[1] - pl.lo[1])]
            })
            .collect();
        newton(seq, tx, rx, DVector::from_vec(x0))
    })
}

fn chain_points(seq: &[Plane], tx: DVec3, rx: DVec3, x: &DVector<f64>) -> Vec<DVec3> {
    let mut v = vec![tx];
    for (i, pl) in seq.iter().enumerate() {
        let [a, b] = pl.free_axes();
        let mut p = DVec3::ZERO;
        p[pl.axis] = pl.coord;
        p[a] = x[2 * i];
        p[b] = x[2 * i + 1];
        v.push(p);
    }
    v.push(rx);
    v
}

fn newton(seq: &[Plane], tx: DVec3, rx: DVec3, mut x: DVector<f64>) -> Option<Vec<DVec3>> {
    let k = seq.len();
    let length = |x: &DVector<f64>| chain_points(seq, tx, rx, x).windows(2).map(|w| (w[1] - w[0]).length()).sum::<f64>();
    let coord_axis = |i: usize, j: usize| seq[i].free_axes()[j];
    for _ in 0..100 {
        let p = chain_points(seq, tx, rx, &x);
        if p.windows(2).any(|w| (w[1] - w[0]).length() < 1e-9) {
            return None;
        }
        let mut g = DVector::<f64>::zeros(2 * k);
        let mut h = DMatrix::<f64>::zeros(2 * k, 2 * k);
        for s in 0..=k {
            let d = p[s + 1] - p[s];
            let r = d.length();
            let u = d / r;
            // Point s is hop s-1 and point s+1 is hop s.
            let ends = [(s.checked_sub(1), -1.0), (if s < k { Some(s) } else { None }, 1.0)];
            for &(hop, si) in &ends {
                let Some(i) = hop else { continue };
                for j in 0..2 {
                    g[2 * i + j] += si * u[coord_axis(i, j)];
                }
                for &(hop2, sj) in &ends {
                    let Some(i2) = hop2 else { continue };
                    for a1 in 0..2 {
                        for a2 in 0..2 {
                            let (c1, c2) = (coord_axis(i, a1), coord_axis(i2, a2));
                            let m = (if c1 == c2 { 1.0 } else { 0.0 } - u[c1] * u[c2]) / r;
                            h[(2 * i + a1, 2 * i2 + a2)] += si * sj * m;
                        }
                    }
                }
            }
        }
        if g.norm() < 1e-12 {
            return Some(p[1..=k].to_vec());
        }
        let step = h.lu().solve(&g)?;
        let l0 = length(&x);
        let mut t = 1.0;
        while t > 1e-12 && length(&(&x - &step * t)) > l0 {
            t *= 0.5;
        }
        if t <= 1e-12 {
            return None;
        }
        x -= &step * t;
    }
    None
}

/// One path found by exhaustive enumeration.
#[derive(Debug, Clone)]
pub struct OraclePath {
    pub order: usize,
    pub delay: f64,
    pub gain: Complex64,
}

/// Every face sequence of length `0..=max_order` solved by Fermat's
/// principle and kept when the stationary points lie on the faces, each hop
/// sees both neighbours from the reflecting side, and no leg is blocked.
pub fn brute_force_paths(scene: &Scene, tx: DVec3, rx: DVec3, max_order: usize, wavelength: f64) -> Vec<OraclePath> {
    let faces = planes(scene);
    let mut seqs: Vec<Vec<usize>> = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_order {
        let mut next = Vec::new();
        for s in &frontier {
            for f in 0..faces.len() {
                if s.last() != Some(&f) {
                    let mut t = s.clone();
                    t.push(f);
                    next.push(t);
                }
            }
        }
        seqs.extend(next.iter().cloned());
        frontier = next;
    }
    let mut out = Vec::new();
    for seq in seqs {
        let planes: Vec<Plane> = seq.iter().map(|&i| faces[i]).collect();
        let hops = match fermat_points(&planes, tx, rx) {
            Some(h) => h,
            None => continue,
        };
        let mut chain = vec![tx];
        chain.extend(hops.iter().copied());
        chain.push(rx);
        let ok = planes.iter().enumerate().all(|(i, pl)| {
            pl.within(chain[i + 1]) && pl.front(chain[i]) && pl.front(chain[i + 2])
        }) && chain.windows(2).all(|w| !blocked(scene, w[0], w[1]));
        if !ok {
            continue;
        }
        let length: f64 = chain.windows(2).map(|w| (w[1] - w[0]).length()).sum();
        let coeff: Complex64 = planes.iter().map(|p| p.r).product();
        let gain = coeff * (wavelength / (4.0 * PI * length)) * Complex64::from_polar(1.0, -2.0 * PI * length / wavelength);
        out.push(OraclePath { order: seq.len(), delay: length / C, gain });
    }
    out.sort_by(|a, b| a.order.cmp(&b.order).then(a.delay.total_cmp(&b.delay)));
    out
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
