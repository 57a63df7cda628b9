//! Descriptor matching, RANSAC over correspondences, and pair registration.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Network;
use crate::geom::{kabsch, Point, PointCloud, RigidTransform};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Nearest,
    Mutual,
}

impl std::str::FromStr for MatchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "mutual" => Ok(Self::Mutual),
            _ => Err(Error::InvalidArgument(format!("unknown match mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub src: usize,
    pub dst: usize,
    /// Descriptor distance.
    pub distance: f64,
}

/// Index and distance of the nearest row of `b` to every row of `a`;
/// ties go to the lower index.
fn nearest_rows(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<(usize, f64)> {
    crate::par::map_range(a.rows(), |i| {
        let q = a.row(i);
        let mut best = (usize::MAX, f64::INFINITY);
        for j in 0..b.rows() {
            let d: f64 = q
                .iter()
                .zip(b.row(j))
                .map(|(&x, &y)| {
                    let t = x as f64 - y as f64;
                    t * t
                })
                .sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        (best.0, best.1.sqrt())
    })
}

/// Nearest-neighbor matching in descriptor space, source to target. In
/// mutual mode a pair survives only if the source row is also the target's
/// nearest.
pub fn match_features(f_src: &Tensor<f32>, f_dst: &Tensor<f32>, mode: MatchMode) -> Result<Vec<Correspondence>> {
    if f_src.rows() == 0 || f_dst.rows() == 0 || f_src.is_empty() || f_dst.is_empty() {
        return Err(Error::EmptyInput("match_features"));
    }
    if f_src.cols() != f_dst.cols() {
        return Err(Error::shape("match_features", f_src.shape(), f_dst.shape()));
    }
    let forward = nearest_rows(f_src, f_dst);
    let backward = match mode {
        MatchMode::Nearest => None,
        MatchMode::Mutual => Some(nearest_rows(f_dst, f_src)),
    };
    Ok(forward
        .into_iter()
        .enumerate()
        .filter(|&(i, (j, _))| backward.as_ref().is_none_or(|b| b[j].0 == i))
        .map(|(i, (j, d))| Correspondence {
            src: i,
            dst: j,
            distance: d,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Inlier residual bound ε (m).
    pub inlier_threshold: f64,
    pub sample_size: usize,
    /// Early-exit confidence η.
    pub confidence: f64,
    pub seed: u64,
    /// Hypotheses evaluated between early-exit checks. Fixed, so results do
    /// not depend on the thread count.
    pub batch: usize,
}

impl RansacConfig {
    pub fn for_voxel(voxel_size: f64) -> Self {
        Self {
            inlier_threshold: 2.0 * voxel_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inlier_threshold > 0.0) || self.sample_size < 3 || self.batch == 0 {
            return Err(Error::InvalidArgument(
                "ransac needs ε > 0, sample size ≥ 3 and a positive batch".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.confidence) {
            return Err(Error::InvalidArgument("ransac confidence must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50_000,
            inlier_threshold: 0.1,
            sample_size: 3,
            confidence: 0.999,
            seed: 0,
            batch: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    /// `(src, dst)` pairs within ε under `transform`, sorted.
    pub inliers: Vec<(usize, usize)>,
    pub iterations: usize,
    /// The confidence bound was met before `max_iterations`.
    pub converged: bool,
}

impl RegistrationResult {
    /// Some hypothesis was supported; `false` means the identity fallback.
    pub fn has_model(&self) -> bool {
        !self.inliers.is_empty()
    }
}

/// Iterations needed to draw an all-inlier sample with probability `eta`
/// when a fraction `w` of correspondences are inliers.
fn required_iterations(w: f64, sample: usize, eta: f64) -> f64 {
    let good = w.powi(sample as i32);
    if good >= 1.0 {
        return 1.0;
    }
    if good <= 0.0 {
        return f64::INFINITY;
    }
    (1.0 - eta).ln() / (1.0 - good).ln()
}

fn inliers_of(t: &RigidTransform, pairs: &[(usize, usize)], src: &[Point], dst: &[Point], eps: f64) -> Vec<usize> {
    pairs
        .iter()
        .enumerate()
        .filter(|(_, &(i, j))| (t.apply(&src[i]) - dst[j]).norm() <= eps)
        .map(|(k, _)| k)
        .collect()
}

/// Hypothesize-and-verify rigid estimation. Iteration `i` draws its sample
/// from a stream keyed by `(seed, i)`, and the correspondence list is put in
/// canonical order first, so the result depends neither on scheduling nor on
/// input order.
pub fn ransac(corr: &[Correspondence], src: &[Point], dst: &[Point], cfg: &RansacConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    if corr.len() < cfg.sample_size {
        return Err(Error::InsufficientData {
            needed: cfg.sample_size,
            got: corr.len(),
        });
    }
    if let Some(c) = corr.iter().find(|c| c.src >= src.len() || c.dst >= dst.len()) {
        return Err(Error::InvalidArgument(format!("correspondence {c:?} out of range")));
    }
    let mut pairs: Vec<(usize, usize)> = corr.iter().map(|c| (c.src, c.dst)).collect();
    pairs.sort_unstable();
    pairs.dedup();
    let n = pairs.len();
    if n < cfg.sample_size {
        return Err(Error::InsufficientData {
            needed: cfg.sample_size,
            got: n,
        });
    }
    let eps2 = cfg.inlier_threshold * cfg.inlier_threshold;

    let hypothesis = |iter: usize| -> Option<(usize, RigidTransform)> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(iter as u64);
        let pick = sample(&mut rng, n, cfg.sample_size);
        let (a, b): (Vec<Point>, Vec<Point>) = pick.iter().map(|k| (src[pairs[k].0], dst[pairs[k].1])).unzip();
        let t = kabsch(&a, &b).ok()?;
        let count = pairs
            .iter()
            .filter(|&&(i, j)| (t.apply(&src[i]) - dst[j]).norm_squared() <= eps2)
            .count();
        Some((count, t))
    };

    let mut best: Option<(usize, usize, RigidTransform)> = None;
    let mut done = 0;
    let mut converged = false;
    while done < cfg.max_iterations {
        let len = cfg.batch.min(cfg.max_iterations - done);
        let batch = crate::par::map_range(len, |k| hypothesis(done + k).map(|(c, t)| (c, done + k, t)));
        for (count, iter, t) in batch.into_iter().flatten() {
            // Ties keep the earlier iteration.
            if best.as_ref().is_none_or(|b| count > b.0) {
                best = Some((count, iter, t));
            }
        }
        done += len;
        if let Some((count, _, _)) = best {
            let w = count as f64 / n as f64;
            if done as f64 >= required_iterations(w, cfg.sample_size, cfg.confidence) {
                converged = true;
                break;
            }
        }
    }

    let Some((_, _, model)) = best else {
        return Ok(RegistrationResult {
            transform: RigidTransform::identity(),
            inliers: Vec::new(),
            iterations: done,
            converged: false,
        });
    };
    let mut transform = model;
    let mut inl = inliers_of(&model, &pairs, src, dst, cfg.inlier_threshold);
    let (a, b): (Vec<Point>, Vec<Point>) = inl.iter().map(|&k| (src[pairs[k].0], dst[pairs[k].1])).unzip();
    if let Ok(refit) = kabsch(&a, &b) {
        let refit_inl = inliers_of(&refit, &pairs, src, dst, cfg.inlier_threshold);
        if refit_inl.len() >= inl.len() {
            transform = refit;
            inl = refit_inl;
        }
    }
    Ok(RegistrationResult {
        transform,
        inliers: inl.into_iter().map(|k| pairs[k]).collect(),
        iterations: done,
        converged,
    })
}

/// Describes both clouds, matches, and runs RANSAC. Pairs with too few
/// correspondences come back unconverged at the identity instead of failing.
pub fn register_pair<N: Network>(
    net: &N,
    src: &PointCloud,
    dst: &PointCloud,
    mode: MatchMode,
    cfg: &RansacConfig,
) -> Result<(RegistrationResult, Vec<Correspondence>)> {
    let f_src = net.describe(src)?;
    let f_dst = net.describe(dst)?;
    register_described(&f_src, &f_dst, src, dst, mode, cfg)
}

pub fn register_described(
    f_src: &Tensor<f32>,
    f_dst: &Tensor<f32>,
    src: &PointCloud,
    dst: &PointCloud,
    mode: MatchMode,
    cfg: &RansacConfig,
) -> Result<(RegistrationResult, Vec<Correspondence>)> {
    let corr = match_features(f_src, f_dst, mode)?;
    match ransac(&corr, &src.points, &dst.points, cfg) {
        Ok(r) => Ok((r, corr)),
        Err(Error::InsufficientData { .. }) => Ok((
            RegistrationResult {
                transform: RigidTransform::identity(),
                inliers: Vec::new(),
                iterations: 0,
                converged: false,
            },
            corr,
        )),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::rre;
    use nalgebra::Vector3;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f32> {
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            data.extend(row.iter().map(|v| v / norm));
        }
        Tensor::matrix(n, d, data).unwrap()
    }

    #[test]
    fn self_matching_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = unit_rows(&mut rng, 40, 8);
        for mode in [MatchMode::Nearest, MatchMode::Mutual] {
            let m = match_features(&f, &f, mode).unwrap();
            assert_eq!(m.len(), 40);
            assert!(m.iter().enumerate().all(|(i, c)| c.src == i && c.dst == i && c.distance == 0.0));
        }
    }

    #[test]
    fn matching_equals_brute_force_and_mutual_is_a_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (unit_rows(&mut rng, 50, 16), unit_rows(&mut rng, 50, 16));
        let near = match_features(&a, &b, MatchMode::Nearest).unwrap();
        for (i, c) in near.iter().enumerate() {
            let d = |j: usize| -> f64 {
                a.row(i).iter().zip(b.row(j)).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
            };
            let best = (0..50).min_by(|&x, &y| d(x).total_cmp(&d(y)).then(x.cmp(&y))).unwrap();
            assert_eq!((c.src, c.dst), (i, best));
        }
        let mutual = match_features(&a, &b, MatchMode::Mutual).unwrap();
        assert!(mutual.iter().all(|m| near.iter().any(|n| n.src == m.src && n.dst == m.dst)));
    }

    #[test]
    fn matching_rejects_empty_and_mismatched_inputs() {
        let a = Tensor::<f32>::zeros(&[0, 4]);
        let b = Tensor::<f32>::zeros(&[3, 4]);
        assert!(matches!(match_features(&a, &b, MatchMode::Mutual), Err(Error::EmptyInput(_))));
        assert!(match_features(&b, &Tensor::zeros(&[3, 5]), MatchMode::Mutual).is_err());
    }

    fn scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        (0..n)
            .map(|_| Point::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(0.0..3.0)))
            .collect()
    }

    #[test]
    fn exact_inliers_recover_the_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = scene(&mut rng, 100);
        let t = RigidTransform::from_axis_angle(Vector3::new(1.0, 2.0, 0.5), 0.7, Vector3::new(0.3, -0.2, 1.0));
        let dst: Vec<Point> = src.iter().map(|p| t.apply(p)).collect();
        let corr: Vec<Correspondence> = (0..100).map(|i| Correspondence { src: i, dst: i, distance: 0.0 }).collect();
        let r = ransac(&corr, &src, &dst, &RansacConfig::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.inliers.len(), 100);
        assert!(rre(&r.transform.rotation, &t.rotation) < 1e-6);
        assert!((r.transform.translation - t.translation).norm() < 1e-9);
    }

    #[test]
    fn collinear_samples_never_converge() {
        let src: Vec<Point> = (0..20).map(|i| Point::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        let corr: Vec<Correspondence> = (0..20).map(|i| Correspondence { src: i, dst: i, distance: 0.0 }).collect();
        let cfg = RansacConfig {
            max_iterations: 600,
            ..RansacConfig::default()
        };
        let r = ransac(&corr, &src, &src, &cfg).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 600);
    }

    #[test]
    fn too_few_correspondences_is_an_error() {
        let p = vec![Point::zeros(); 2];
        let corr = vec![Correspondence { src: 0, dst: 0, distance: 0.0 }; 2];
        assert!(matches!(
            ransac(&corr, &p, &p, &RansacConfig::default()),
            Err(Error::InsufficientData { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn result_ignores_correspondence_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = scene(&mut rng, 300);
        let t = RigidTransform::from_axis_angle(Vector3::z(), 0.4, Vector3::new(0.5, 0.0, 0.1));
        let dst: Vec<Point> = src.iter().map(|p| t.apply(p)).collect();
        let mut corr: Vec<Correspondence> = (0..300)
            .map(|i| Correspondence {
                src: i,
                dst: if i % 2 == 0 { i } else { rng.random_range(0..300) },
                distance: 0.0,
            })
            .collect();
        let cfg = RansacConfig {
            seed: 9,
            ..RansacConfig::default()
        };
        let a = ransac(&corr, &src, &dst, &cfg).unwrap();
        corr.shuffle(&mut rng);
        let b = ransac(&corr, &src, &dst, &cfg).unwrap();
        assert_eq!(a, b);
        for &(i, j) in &a.inliers {
            assert!((a.transform.apply(&src[i]) - dst[j]).norm() <= cfg.inlier_threshold);
        }
    }
}
