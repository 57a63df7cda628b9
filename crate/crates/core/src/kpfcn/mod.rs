//! Kernel-point convolution encoder.
//!
//! Geometry only enters through offsets `y - x` between a center and its
//! neighbors, so the features are invariant to any translation that keeps
//! the subsampling grids aligned.

mod kernel;

pub use kernel::KernelDisposition;

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{voxel_downsample, Point, PointCloud, SpatialIndex};
use crate::nn;
use crate::tensor::params::Bound;
use crate::tensor::{KernelMap, ParamStore, Real, Tape, Tensor, Var};

pub const PREFIX: &str = "kpfcn";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KpfcnConfig {
    /// Subsampling cell of level 0; level `ℓ` uses `dl · 2^ℓ`.
    pub dl: f64,
    pub widths: Vec<usize>,
    /// Neighborhood radius in units of the level's cell size.
    pub rho: f64,
    pub max_neighbors: usize,
    pub kernel_points: usize,
}

impl KpfcnConfig {
    pub fn desk() -> Self {
        Self {
            dl: 0.05,
            widths: vec![16, 32, 32],
            rho: 2.5,
            max_neighbors: 40,
            kernel_points: 15,
        }
    }

    pub fn full() -> Self {
        Self {
            dl: 0.025,
            widths: vec![32, 64, 128],
            ..Self::desk()
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn d_kp(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad kpfcn widths {:?}", self.widths)));
        }
        if !(self.dl > 0.0) || !(self.rho > 0.0) || self.max_neighbors == 0 || self.kernel_points == 0 {
            return Err(Error::InvalidArgument("kpfcn dl, rho, neighbor cap and kernel size must be positive".into()));
        }
        Ok(())
    }
}

/// One level of the subsampling pyramid.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub points: Vec<Point>,
    /// Cell size of this level.
    pub dl: f64,
    /// Same-level neighbors within `rho · dl`, closest first.
    pub neighbors: Vec<Vec<usize>>,
    /// For levels above 0: neighbors in the previous level within that
    /// level's radius, closest first.
    pub pool: Vec<Vec<usize>>,
    /// For every point, its nearest point in the next coarser level (empty
    /// on the last level).
    pub assign: Vec<usize>,
}

/// `k` closest ids within `radius`, ordered by distance then id.
fn capped_neighbors(index: &SpatialIndex, q: &Point, radius: f64, cap: usize) -> Vec<usize> {
    let mut hits = index.radius_search_with_distances(q, radius);
    hits.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    hits.truncate(cap);
    hits.into_iter().map(|(i, _)| i).collect()
}

pub fn build_pyramid(cloud: &PointCloud, dl: f64, levels: usize, rho: f64, cap: usize) -> Result<Vec<PyramidLevel>> {
    if levels == 0 || !(dl > 0.0) {
        return Err(Error::InvalidArgument(format!("pyramid needs dl > 0 and levels ≥ 1, got {dl}, {levels}")));
    }
    if cloud.is_empty() {
        return Err(Error::EmptyInput("pyramid of an empty cloud"));
    }
    let mut out: Vec<PyramidLevel> = Vec::with_capacity(levels);
    let mut prev_index: Option<SpatialIndex> = None;
    for l in 0..levels {
        let cell = dl * (1u64 << l) as f64;
        let points = voxel_downsample(&cloud.clone().strip_aux(), cell)?.points;
        if points.is_empty() {
            return Err(Error::EmptyInput("empty pyramid level"));
        }
        let index = SpatialIndex::new(&points);
        let r = rho * cell;
        let neighbors = crate::par::map_slice(&points, |p| capped_neighbors(&index, p, r, cap));
        let pool = match (&prev_index, out.last()) {
            (Some(prev), Some(prev_level)) => {
                let pr = rho * prev_level.dl;
                crate::par::map_slice(&points, |p| capped_neighbors(prev, p, pr, cap))
            }
            _ => Vec::new(),
        };
        if let Some(prev_level) = out.last_mut() {
            prev_level.assign = crate::par::map_slice(&prev_level.points, |p| {
                index.nearest(p).expect("level is non-empty").0
            });
        }
        out.push(PyramidLevel {
            points,
            dl: cell,
            neighbors,
            pool,
            assign: Vec::new(),
        });
        prev_index = Some(index);
    }
    Ok(out)
}

/// Entries `(y, x, k, h)` with influence `h = max(0, 1 − ‖(y−x) − k̃‖/σ)`
/// for every neighbor `y` of center `x` and kernel point `k̃`.
pub fn kpconv_map(
    centers: &[Point],
    support: &[Point],
    neighbors: &[Vec<usize>],
    kernel: &[Point],
    sigma: f64,
) -> Result<KernelMap> {
    if neighbors.len() != centers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} neighbor lists for {} centers",
            neighbors.len(),
            centers.len()
        )));
    }
    if let Some(bad) = neighbors.iter().flatten().find(|&&j| j >= support.len()) {
        return Err(Error::InvalidArgument(format!("neighbor id {bad} out of range")));
    }
    let rows = crate::par::map_range(centers.len(), |o| {
        let mut v = Vec::new();
        for &j in &neighbors[o] {
            let d = support[j] - centers[o];
            for (k, kp) in kernel.iter().enumerate() {
                let h = 1.0 - (d - kp).norm() / sigma;
                if h > 0.0 {
                    v.push((j, o, k, h));
                }
            }
        }
        v
    });
    KernelMap::new(support.len(), centers.len(), kernel.len(), rows.concat())
}

/// Tape-free kernel-point convolution with weights `(K × C_in × C_out)`.
pub fn kpconv<T: Real>(features: &Tensor<T>, map: Arc<KernelMap>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let w = tape.constant(weights.clone());
    let y = tape.kernel_conv(x, w, map)?;
    Ok(tape.value(y).clone())
}

/// Pyramid and convolution maps of one cloud.
#[derive(Clone, Debug)]
pub struct KpGeometry {
    pub levels: Vec<PyramidLevel>,
    same: Vec<Arc<KernelMap>>,
    down: Vec<Arc<KernelMap>>,
}

impl KpGeometry {
    pub fn build(cloud: &PointCloud, cfg: &KpfcnConfig, kernel: &KernelDisposition) -> Result<Self> {
        cfg.validate()?;
        if kernel.len() != cfg.kernel_points {
            return Err(Error::InvalidArgument(format!(
                "kernel has {} points, config {}",
                kernel.len(),
                cfg.kernel_points
            )));
        }
        let levels = build_pyramid(cloud, cfg.dl, cfg.levels(), cfg.rho, cfg.max_neighbors)?;
        let mut same = Vec::with_capacity(levels.len());
        let mut down = Vec::with_capacity(levels.len());
        for (l, lv) in levels.iter().enumerate() {
            let r = cfg.rho * lv.dl;
            same.push(Arc::new(kpconv_map(&lv.points, &lv.points, &lv.neighbors, &kernel.scaled(r), lv.dl)?));
            if l > 0 {
                let prev = &levels[l - 1];
                let pr = cfg.rho * prev.dl;
                down.push(Arc::new(kpconv_map(&lv.points, &prev.points, &lv.pool, &kernel.scaled(pr), prev.dl)?));
            }
        }
        Ok(Self { levels, same, down })
    }

    pub fn coarse_len(&self) -> usize {
        self.levels.last().map_or(0, |l| l.points.len())
    }

    pub fn coarse_points(&self) -> &[Point] {
        self.levels.last().map_or(&[], |l| l.points.as_slice())
    }
}

pub fn init_params(cfg: &KpfcnConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let (k, w) = (cfg.kernel_points, &cfg.widths);
    for l in 0..w.len() {
        let c_in = if l == 0 { 1 } else { w[l - 1] };
        nn::add_kernel(store, rng, &format!("{PREFIX}.conv{l}"), k, c_in, w[l])?;
        nn::add_norm(store, &format!("{PREFIX}.norm{l}"), w[l])?;
        nn::add_kernel(store, rng, &format!("{PREFIX}.block{l}.conv"), k, w[l], w[l])?;
        nn::add_norm(store, &format!("{PREFIX}.block{l}.norm"), w[l])?;
    }
    Ok(())
}

/// Features of the coarsest pyramid level (N′_kp × D_kp) from all-ones input.
pub fn kpfcn_encode<T: Real>(tape: &mut Tape<T>, p: &Bound, geom: &KpGeometry, cfg: &KpfcnConfig) -> Result<Var> {
    if geom.levels.len() != cfg.levels() {
        return Err(Error::InvalidArgument(format!(
            "pyramid has {} levels, network {}",
            geom.levels.len(),
            cfg.levels()
        )));
    }
    let mut x = tape.constant(Tensor::full(&[geom.levels[0].points.len(), 1], T::one()));
    for l in 0..cfg.levels() {
        let map = if l == 0 { geom.same[0].clone() } else { geom.down[l - 1].clone() };
        let h = tape.kernel_conv(x, p.get(&format!("{PREFIX}.conv{l}.weight"))?, map)?;
        let h = nn::norm(tape, p, &format!("{PREFIX}.norm{l}"), h)?;
        let h = tape.relu(h)?;
        let r = tape.kernel_conv(h, p.get(&format!("{PREFIX}.block{l}.conv.weight"))?, geom.same[l].clone())?;
        let r = nn::norm(tape, p, &format!("{PREFIX}.block{l}.norm"), r)?;
        let sum = tape.add(r, h)?;
        x = tape.relu(sum)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_params, GradCheckConfig};
    use rand::{Rng, SeedableRng};

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Point::new(
                        rng.random_range(0.0..0.8),
                        rng.random_range(0.0..0.8),
                        rng.random_range(0.0..0.2),
                    )
                })
                .collect(),
        )
    }

    fn setup(cfg: &KpfcnConfig) -> (ParamStore<f32>, KernelDisposition) {
        let mut s = ParamStore::new();
        init_params(cfg, &mut s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        (s, KernelDisposition::generate(cfg.kernel_points, 7))
    }

    fn encode(cfg: &KpfcnConfig, s: &ParamStore<f32>, k: &KernelDisposition, c: &PointCloud) -> Tensor<f32> {
        let g = KpGeometry::build(c, cfg, k).unwrap();
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let out = kpfcn_encode(&mut tape, &p, &g, cfg).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn single_point_pyramid_is_self_neighborhood() {
        let c = PointCloud::new(vec![Point::new(0.3, 0.2, 0.1)]);
        let levels = build_pyramid(&c, 0.05, 3, 2.5, 40).unwrap();
        for (l, lv) in levels.iter().enumerate() {
            assert_eq!(lv.points.len(), 1);
            assert_eq!(lv.neighbors, vec![vec![0]]);
            if l > 0 {
                assert_eq!(lv.pool, vec![vec![0]]);
            }
        }
        assert_eq!(levels[0].assign, vec![0]);
    }

    #[test]
    fn neighbors_match_brute_force() {
        let c = cloud(400, 1);
        let levels = build_pyramid(&c, 0.05, 3, 2.5, usize::MAX).unwrap();
        for lv in &levels {
            let r = 2.5 * lv.dl;
            for (i, p) in lv.points.iter().enumerate() {
                let mut got = lv.neighbors[i].clone();
                got.sort_unstable();
                let want: Vec<usize> = (0..lv.points.len())
                    .filter(|&j| (lv.points[j] - p).norm() <= r)
                    .collect();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn cap_keeps_the_closest() {
        let c = cloud(600, 2);
        let levels = build_pyramid(&c, 0.05, 1, 2.5, 5).unwrap();
        let lv = &levels[0];
        for (i, p) in lv.points.iter().enumerate() {
            let mut all: Vec<(f64, usize)> = (0..lv.points.len())
                .map(|j| ((lv.points[j] - p).norm(), j))
                .filter(|&(d, _)| d <= 2.5 * lv.dl)
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all.into_iter().take(5).map(|x| x.1).collect();
            assert_eq!(lv.neighbors[i], want);
        }
    }

    #[test]
    fn coarser_cells_never_add_points() {
        let c = cloud(500, 3);
        let a = build_pyramid(&c, 0.04, 3, 2.5, 40).unwrap();
        let b = build_pyramid(&c, 0.08, 3, 2.5, 40).unwrap();
        for (la, lb) in a.iter().zip(&b) {
            assert!(lb.points.len() <= la.points.len());
        }
    }

    #[test]
    fn neighbor_on_a_kernel_point_has_unit_influence() {
        let kernel = vec![Point::zeros(), Point::new(0.125, 0.0, 0.0)];
        let centers = [Point::new(1.0, 1.0, 1.0)];
        let support = [Point::new(1.125, 1.0, 1.0)];
        let map = Arc::new(kpconv_map(&centers, &support, &[vec![0]], &kernel, 0.05).unwrap());
        assert_eq!(map.row(0), &[(0, 1, 1.0)]);
        let f = Tensor::<f64>::matrix(1, 2, vec![2.0, -1.0]).unwrap();
        let w = Tensor::<f64>::new(vec![2, 2, 1], vec![9.0, 9.0, 0.5, 3.0]).unwrap();
        let y = kpconv(&f, map, &w).unwrap();
        assert_eq!(y.data(), &[2.0 * 0.5 - 3.0]);
    }

    #[test]
    fn far_or_missing_neighbors_contribute_nothing() {
        let kernel = KernelDisposition::generate(15, 1).scaled(0.1);
        let centers = [Point::zeros(), Point::new(5.0, 0.0, 0.0)];
        let support = [Point::new(1.0, 0.0, 0.0)];
        let map = Arc::new(kpconv_map(&centers, &support, &[vec![0], vec![]], &kernel, 0.05).unwrap());
        assert!(map.is_empty());
        let y = kpconv(&Tensor::<f64>::full(&[1, 1], 1.0), map, &Tensor::full(&[15, 1, 2], 1.0)).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);
    }

    #[test]
    fn influences_are_in_unit_interval() {
        let cfg = KpfcnConfig::desk();
        let k = KernelDisposition::generate(15, 2);
        let g = KpGeometry::build(&cloud(300, 4), &cfg, &k).unwrap();
        for m in g.same.iter().chain(&g.down) {
            for o in 0..m.n_out() {
                assert!(m.row(o).iter().all(|&(_, _, h)| h > 0.0 && h <= 1.0));
            }
        }
    }

    #[test]
    fn encode_is_deterministic_and_coarse_sized() {
        let cfg = KpfcnConfig::desk();
        let (s, k) = setup(&cfg);
        let c = cloud(300, 5);
        let a = encode(&cfg, &s, &k, &c);
        assert_eq!(a, encode(&cfg, &s, &k, &c));
        let g = KpGeometry::build(&c, &cfg, &k).unwrap();
        assert_eq!(a.shape(), &[g.coarse_len(), 32]);
    }

    #[test]
    fn encode_is_translation_invariant_on_aligned_shifts() {
        let cfg = KpfcnConfig {
            dl: 0.0625,
            ..KpfcnConfig::desk()
        };
        let (s, k) = setup(&cfg);
        let c = cloud(300, 6);
        let t = Point::new(3.0, -2.0, 1.0) * (4.0 * cfg.dl);
        let a = encode(&cfg, &s, &k, &c);
        let b = encode(&cfg, &s, &k, &c.translated(&t));
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn permuting_points_keeps_outputs() {
        let cfg = KpfcnConfig::desk();
        let (s, k) = setup(&cfg);
        let c = cloud(300, 7);
        let mut rev = c.clone();
        rev.points.reverse();
        let a = encode(&cfg, &s, &k, &c);
        let b = encode(&cfg, &s, &k, &rev);
        // Levels are ordered by voxel key, so rows line up.
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = KpfcnConfig {
            dl: 0.1,
            widths: vec![3, 4],
            ..KpfcnConfig::desk()
        };
        let (s, k) = setup(&cfg);
        let g = KpGeometry::build(&cloud(30, 8), &cfg, &k).unwrap();
        let report = check_params(
            &s.cast::<f64>(),
            |tape, p| kpfcn_encode(tape, p, &g, &cfg),
            &GradCheckConfig {
                max_entries_per_tensor: Some(6),
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
