//! Procedural indoor scenes and overlapping fragment pairs.
//!
//! A scene is a box room (floor and four walls) with table-like horizontal
//! rectangles, a row of identical wall panels, and ellipsoidal blobs. Its
//! surfaces are densely sampled once; every dense point carries a random
//! priority and two fixed noise vectors. A fragment is the `points`
//! highest-priority dense points inside a ball, so two fragments share
//! points where their balls intersect, and the overlap varies smoothly with
//! the distance between ball centers.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::with_synth_aux;
use crate::geom::{apply_transform, Point, PointCloud, RigidTransform, SpatialIndex};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSceneConfig {
    /// Edge of the cubic room (m).
    pub room: f64,
    /// Horizontal rectangles placed at random.
    pub planes: usize,
    pub blobs: usize,
    /// Identical panels in a row along one wall.
    pub repeats: usize,
    /// Points per fragment.
    pub points: usize,
    /// Target overlap in `(0, 1]`.
    pub overlap: f64,
    /// Gaussian noise σ (m).
    pub noise: f64,
    pub max_rotation_deg: f64,
    /// Per-axis translation bound (m).
    pub max_translation: f64,
    /// Fragment ball radius (m).
    pub crop_radius: f64,
    /// Dense samples per square meter.
    pub density: f64,
    /// Residual bound used to measure overlap (m).
    pub tau_pos: f64,
}

impl SynthSceneConfig {
    pub fn desk() -> Self {
        Self {
            room: 3.0,
            planes: 3,
            blobs: 4,
            repeats: 4,
            points: 2048,
            overlap: 0.6,
            noise: 0.005,
            max_rotation_deg: 20.0,
            max_translation: 0.5,
            crop_radius: 1.4,
            density: 1500.0,
            tau_pos: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.room, self.crop_radius, self.density, self.tau_pos];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.points == 0 {
            return Err(Error::InvalidArgument(
                "room, crop radius, density, tau_pos and points must be positive".into(),
            ));
        }
        if !(self.overlap > 0.0 && self.overlap <= 1.0) {
            return Err(Error::InvalidArgument(format!("overlap {} outside (0, 1]", self.overlap)));
        }
        let non_negative = [self.noise, self.max_rotation_deg, self.max_translation];
        if non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.max_rotation_deg > 180.0 {
            return Err(Error::InvalidArgument("noise and motion bounds must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for SynthSceneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Overlap regimes of generated datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Match,
    Lomatch,
}

impl Preset {
    pub fn overlap_range(self) -> (f64, f64) {
        match self {
            Self::Match => (0.4, 0.8),
            Self::Lomatch => (0.1, 0.3),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "match" => Ok(Self::Match),
            "lomatch" => Ok(Self::Lomatch),
            _ => Err(Error::InvalidArgument(format!("unknown preset `{s}` (expected match or lomatch)"))),
        }
    }
}

#[derive(Clone, Debug)]
enum Surface {
    /// `origin + a·u + b·v`, `a, b ∈ [0, 1]`.
    Rect { origin: Point, u: Vector3<f64>, v: Vector3<f64> },
    Ellipsoid { center: Point, axes: Vector3<f64> },
}

impl Surface {
    fn area(&self) -> f64 {
        match self {
            Self::Rect { u, v, .. } => u.cross(v).norm(),
            Self::Ellipsoid { axes, .. } => {
                // Thomsen's approximation.
                let p = 1.6075;
                let (a, b, c) = (axes.x.powf(p), axes.y.powf(p), axes.z.powf(p));
                4.0 * PI * ((a * b + a * c + b * c) / 3.0).powf(1.0 / p)
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        match self {
            Self::Rect { origin, u, v } => origin + u * rng.random::<f64>() + v * rng.random::<f64>(),
            Self::Ellipsoid { center, axes } => {
                let d: [f64; 3] = UnitSphere.sample(rng);
                center + Vector3::new(d[0] * axes.x, d[1] * axes.y, d[2] * axes.z)
            }
        }
    }
}

fn build_surfaces(cfg: &SynthSceneConfig, rng: &mut ChaCha8Rng) -> Vec<Surface> {
    let l = cfg.room;
    let (x, y, z) = (Vector3::x() * l, Vector3::y() * l, Vector3::z() * l);
    let o = Point::zeros();
    let mut s = vec![
        Surface::Rect { origin: o, u: x, v: y },
        Surface::Rect { origin: o, u: y, v: z },
        Surface::Rect { origin: o + x, u: y, v: z },
        Surface::Rect { origin: o, u: x, v: z },
        Surface::Rect { origin: o + y, u: x, v: z },
    ];
    for _ in 0..cfg.planes {
        let (w, d) = (rng.random_range(0.4..1.0), rng.random_range(0.4..1.0));
        let origin = Point::new(
            rng.random_range(0.0..(l - w).max(1e-3)),
            rng.random_range(0.0..(l - d).max(1e-3)),
            rng.random_range(0.4..1.1f64).min(l),
        );
        s.push(Surface::Rect {
            origin,
            u: Vector3::x() * w,
            v: Vector3::y() * d,
        });
    }
    // Identical panels standing off the x = 0 wall.
    let pitch = l / (cfg.repeats.max(1) as f64 + 1.0);
    let (pw, ph) = ((0.5 * pitch).min(0.35), 0.5f64.min(0.4 * l));
    for k in 0..cfg.repeats {
        let origin = Point::new(0.08, pitch * (k as f64 + 1.0) - pw / 2.0, 0.3 * l);
        s.push(Surface::Rect {
            origin,
            u: Vector3::y() * pw,
            v: Vector3::z() * ph,
        });
    }
    for _ in 0..cfg.blobs {
        let m = (0.3f64).min(l / 4.0);
        let center = Point::new(
            rng.random_range(m..l - m),
            rng.random_range(m..l - m),
            rng.random_range(0.2..1.2f64).min(l - m),
        );
        let axes = Vector3::new(
            rng.random_range(0.1..0.35),
            rng.random_range(0.1..0.35),
            rng.random_range(0.1..0.35),
        );
        s.push(Surface::Ellipsoid { center, axes });
    }
    s
}

struct DenseScene {
    points: Vec<Point>,
    priority: Vec<u64>,
    noise: [Vec<Vector3<f64>>; 2],
}

fn dense_scene(cfg: &SynthSceneConfig, rng: &mut ChaCha8Rng) -> Result<DenseScene> {
    let surfaces = build_surfaces(cfg, rng);
    let mut points = Vec::new();
    for s in &surfaces {
        let n = (s.area() * cfg.density).ceil() as usize;
        points.extend((0..n).map(|_| s.sample(rng)));
    }
    let priority = (0..points.len()).map(|_| rng.next_u64()).collect();
    let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::Generation(e.to_string()))?;
    let mut noise_vec = || -> Vec<Vector3<f64>> {
        (0..points.len())
            .map(|_| Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng)))
            .collect()
    };
    let noise = [noise_vec(), noise_vec()];
    Ok(DenseScene { points, priority, noise })
}

impl DenseScene {
    /// Top-`k` dense ids by priority within `radius` of `center`.
    fn crop(&self, center: &Point, radius: f64, k: usize) -> Vec<usize> {
        let r2 = radius * radius;
        let mut ids: Vec<usize> = (0..self.points.len())
            .filter(|&i| (self.points[i] - center).norm_squared() <= r2)
            .collect();
        ids.sort_unstable_by(|&a, &b| self.priority[b].cmp(&self.priority[a]).then(a.cmp(&b)));
        ids.truncate(k);
        ids
    }

    fn noisy(&self, ids: &[usize], side: usize) -> Vec<Point> {
        ids.iter().map(|&i| self.points[i] + self.noise[side][i]).collect()
    }
}

/// Fraction of `src` points with a `dst` point within `tau` under `t_gt`.
pub fn measured_overlap(src: &[Point], dst: &[Point], t_gt: &RigidTransform, tau: f64) -> f64 {
    if src.is_empty() || dst.is_empty() {
        return 0.0;
    }
    let index = SpatialIndex::new(dst);
    let hits = crate::par::map_range(src.len(), |i| {
        index.nearest(&t_gt.apply(&src[i])).is_some_and(|(_, d2)| d2.sqrt() <= tau)
    });
    hits.into_iter().filter(|&h| h).count() as f64 / src.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub src: PointCloud,
    pub dst: PointCloud,
    /// Maps `src` into the frame of `dst`.
    pub t_gt: RigidTransform,
    pub overlap: f64,
}

const ATTEMPTS: usize = 12;
const GOOD_ENOUGH: f64 = 0.03;
const ACCEPT: f64 = 0.1;

/// Generates one fragment pair whose measured overlap is near
/// `cfg.overlap`. Both fragments carry the synthetic color field evaluated
/// in the scene frame.
pub fn gen_pair(cfg: &SynthSceneConfig, seed: u64) -> Result<SynthPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = dense_scene(cfg, &mut rng)?;
    let color_seed = rng.next_u64();
    let r = cfg.crop_radius;
    let mid_lo = (0.4 * cfg.room).min(cfg.room / 2.0);
    let k = cfg.points;

    let fragments = |m: &Point, u: &Vector3<f64>, d: f64| {
        let a = scene.crop(&(m - u * (d / 2.0)), r, k);
        let b = scene.crop(&(m + u * (d / 2.0)), r, k);
        let (pa, pb) = (scene.noisy(&a, 0), scene.noisy(&b, 1));
        let o = measured_overlap(&pa, &pb, &RigidTransform::identity(), cfg.tau_pos);
        (pa, pb, o)
    };

    let mut best: Option<(f64, Vec<Point>, Vec<Point>)> = None;
    for _ in 0..ATTEMPTS {
        let m = Point::new(
            rng.random_range(mid_lo..=cfg.room - mid_lo),
            rng.random_range(mid_lo..=cfg.room - mid_lo),
            rng.random_range(0.8..1.4f64).min(cfg.room / 2.0),
        );
        let phi = rng.random_range(0.0..2.0 * PI);
        let u = Vector3::new(phi.cos(), phi.sin(), 0.0);
        let (mut pa, mut pb, mut o) = fragments(&m, &u, 0.0);
        if o > cfg.overlap {
            // Overlap falls as the centers separate.
            let (mut lo, mut hi) = (0.0, 2.0 * r);
            for _ in 0..24 {
                let mid = 0.5 * (lo + hi);
                let (a, b, om) = fragments(&m, &u, mid);
                if om > cfg.overlap {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if (om - cfg.overlap).abs() < (o - cfg.overlap).abs() {
                    (pa, pb, o) = (a, b, om);
                }
            }
        }
        if pa.len() < 3 || pb.len() < 3 {
            continue;
        }
        let err = (o - cfg.overlap).abs();
        if best.as_ref().is_none_or(|b| err < (b.0 - cfg.overlap).abs()) {
            best = Some((o, pa, pb));
        }
        if err <= GOOD_ENOUGH {
            break;
        }
    }
    let Some((overlap, pa, pb)) = best.filter(|b| (b.0 - cfg.overlap).abs() <= ACCEPT) else {
        return Err(Error::Generation(format!(
            "overlap {} not reached within {ATTEMPTS} attempts",
            cfg.overlap
        )));
    };

    let axis: [f64; 3] = UnitSphere.sample(&mut rng);
    let angle = rng.random_range(0.0..=cfg.max_rotation_deg.to_radians());
    let mut shift = || {
        if cfg.max_translation > 0.0 {
            rng.random_range(-cfg.max_translation..=cfg.max_translation)
        } else {
            0.0
        }
    };
    let t = Vector3::new(shift(), shift(), shift());
    let t_gt = RigidTransform::from_axis_angle(Vector3::from(axis), angle, t);
    t_gt.check(1e-9)?;

    let src = with_synth_aux(&PointCloud::new(pa), color_seed)?;
    let dst_world = with_synth_aux(&PointCloud::new(pb), color_seed)?;
    Ok(SynthPair {
        src,
        dst: apply_transform(&dst_world, &t_gt),
        t_gt,
        overlap,
    })
}

/// Per-pair seed and overlap target of pair `k` in a dataset.
pub fn pair_plan(preset: Preset, seed: u64, k: usize) -> (u64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64 + 1);
    let (lo, hi) = preset.overlap_range();
    (rng.next_u64(), rng.random_range(lo..=hi))
}

/// `pairs` independent pairs, generated in parallel and returned in order.
pub fn gen_dataset(base: &SynthSceneConfig, preset: Preset, pairs: usize, seed: u64) -> Result<Vec<SynthPair>> {
    crate::par::map_range(pairs, |k| {
        let (s, overlap) = pair_plan(preset, seed, k);
        gen_pair(&SynthSceneConfig { overlap, ..base.clone() }, s)
    })
    .into_iter()
    .collect()
}
