use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point, RigidTransform, SpatialIndex};
use crate::tensor::{Real, Tensor};

/// Margins, weights and thresholds of the hardest-contrastive objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub m_p: f64,
    pub m_n: f64,
    pub lambda_n: f64,
    /// Residual bound of a positive under ground truth (m).
    pub tau_pos: f64,
    /// Candidates this close to the true mate are never negatives (m).
    pub tau_fn: f64,
    pub sample_count: usize,
}

impl LossConfig {
    pub fn for_voxel(voxel_size: f64) -> Self {
        Self {
            tau_pos: voxel_size,
            tau_fn: 2.0 * voxel_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.m_p && self.m_p < self.m_n) {
            return Err(Error::InvalidArgument(format!("need 0 ≤ m_p < m_n, got {} and {}", self.m_p, self.m_n)));
        }
        if !(self.tau_pos > 0.0 && self.tau_fn >= self.tau_pos) || self.lambda_n < 0.0 || self.sample_count == 0 {
            return Err(Error::InvalidArgument(
                "need τ_pos > 0, τ_fn ≥ τ_pos, λ_n ≥ 0 and a positive sample count".into(),
            ));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            m_p: 0.1,
            m_n: 1.4,
            lambda_n: 0.5,
            tau_pos: 0.05,
            tau_fn: 0.1,
            sample_count: 256,
        }
    }
}

/// Positive pairs and per-pair hardest negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiningResult {
    /// `(i, j)`: row `i` of the source features, row `j` of the target.
    pub positives: Vec<(usize, usize)>,
    /// Per positive: hardest target-side negative of anchor `i`, if any.
    pub neg_src: Vec<Option<usize>>,
    /// Per positive: hardest source-side negative of anchor `j`, if any.
    pub neg_dst: Vec<Option<usize>>,
    /// Distinct source anchors among the positives.
    pub n_pi: usize,
    /// Distinct target mates among the positives.
    pub n_pj: usize,
}

fn feature_distance<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Feature-nearest pool member to `anchor`, skipping members within `tau_fn`
/// of `mate`. Ties go to the lower row index.
fn hardest<T: Real>(
    anchor: &[T],
    feats: &Tensor<T>,
    pool: &[usize],
    pts: &[Point],
    mate: usize,
    tau_fn: f64,
) -> Option<usize> {
    pool.iter()
        .copied()
        .filter(|&k| (pts[k] - pts[mate]).norm() >= tau_fn)
        .map(|k| (feature_distance(anchor, feats.row(k)), k))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, k)| k)
}

/// Samples anchors in the source cloud, pairs each with its nearest target
/// point under `t_gt`, keeps pairs with residual `< τ_pos`, and picks hardest
/// negatives from the opposite side's positives. Feature values are only
/// read, never differentiated.
pub fn mine_pairs<T: Real>(
    f_src: &Tensor<T>,
    f_dst: &Tensor<T>,
    src: &[Point],
    dst: &[Point],
    t_gt: &RigidTransform,
    cfg: &LossConfig,
    seed: u64,
) -> Result<MiningResult> {
    cfg.validate()?;
    if f_src.rows() != src.len() || f_dst.rows() != dst.len() {
        return Err(Error::InvalidArgument(format!(
            "features ({} and {} rows) do not align with clouds ({} and {} points)",
            f_src.rows(),
            f_dst.rows(),
            src.len(),
            dst.len()
        )));
    }
    if src.is_empty() || dst.is_empty() {
        return Err(Error::EmptyPositives);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchors = sample(&mut rng, src.len(), cfg.sample_count.min(src.len())).into_vec();
    anchors.sort_unstable();

    let index = SpatialIndex::new(dst);
    let positives: Vec<(usize, usize)> = anchors
        .iter()
        .filter_map(|&i| {
            let (j, d) = index.nearest(&t_gt.apply(&src[i]))?;
            (d.sqrt() < cfg.tau_pos).then_some((i, j))
        })
        .collect();
    if positives.is_empty() {
        return Err(Error::EmptyPositives);
    }
    let pool_dst: Vec<usize> = positives.iter().map(|p| p.1).collect();
    let pool_src: Vec<usize> = positives.iter().map(|p| p.0).collect();
    let found = crate::par::map_slice(&positives, |&(i, j)| {
        (
            hardest(f_src.row(i), f_dst, &pool_dst, dst, j, cfg.tau_fn),
            hardest(f_dst.row(j), f_src, &pool_src, src, i, cfg.tau_fn),
        )
    });
    let (neg_src, neg_dst) = found.into_iter().unzip();
    let distinct = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    Ok(MiningResult {
        n_pi: distinct(&pool_src),
        n_pj: distinct(&pool_dst),
        positives,
        neg_src,
        neg_dst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        (0..n)
            .map(|_| Point::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
            .collect()
    }

    fn feats(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_clouds_pair_every_anchor_with_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = cloud(&mut rng, 100);
        let f = feats(&mut rng, 100, 4);
        let cfg = LossConfig {
            sample_count: 40,
            ..LossConfig::default()
        };
        let m = mine_pairs(&f, &f, &pts, &pts, &RigidTransform::identity(), &cfg, 3).unwrap();
        assert_eq!(m.positives.len(), 40);
        assert!(m.positives.iter().all(|&(i, j)| i == j));
        assert_eq!((m.n_pi, m.n_pj), (40, 40));
    }

    #[test]
    fn crowded_pool_leaves_no_valid_negative() {
        // Three points within τ_fn of each other: every candidate is excluded.
        let pts = vec![Point::new(0.0, 0.0, 0.0), Point::new(0.01, 0.0, 0.0), Point::new(0.0, 0.01, 0.0)];
        let f = Tensor::<f64>::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        let m = mine_pairs(&f, &f, &pts, &pts, &RigidTransform::identity(), &LossConfig::default(), 0).unwrap();
        assert_eq!(m.positives.len(), 3);
        assert!(m.neg_src.iter().chain(&m.neg_dst).all(Option::is_none));
    }

    #[test]
    fn no_positives_is_an_error() {
        let a = vec![Point::new(0.0, 0.0, 0.0)];
        let b = vec![Point::new(5.0, 0.0, 0.0)];
        let f = Tensor::<f64>::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            mine_pairs(&f, &f, &a, &b, &RigidTransform::identity(), &LossConfig::default(), 0),
            Err(Error::EmptyPositives)
        ));
    }

    #[test]
    fn mining_equals_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let src = cloud(&mut rng, 150);
        let t = RigidTransform::from_axis_angle(nalgebra::Vector3::z(), 0.3, nalgebra::Vector3::new(0.1, 0.2, 0.0));
        // Target: a jittered copy of the first 120 points plus unrelated clutter.
        let mut dst: Vec<Point> = src[..120]
            .iter()
            .map(|p| t.apply(p) + Point::new(rng.random_range(-0.03..0.03), 0.0, 0.0))
            .collect();
        dst.extend(cloud(&mut rng, 30));
        let (fs, fd) = (feats(&mut rng, 150, 5), feats(&mut rng, 150, 5));
        let cfg = LossConfig {
            tau_pos: 0.025,
            tau_fn: 0.2,
            sample_count: 64,
            ..LossConfig::default()
        };
        let m = mine_pairs(&fs, &fd, &src, &dst, &t, &cfg, 11).unwrap();

        // Oracle over the same anchors with linear scans only.
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let mut anchors = sample(&mut r, 150, 64).into_vec();
        anchors.sort_unstable();
        let mut pos = Vec::new();
        for &i in &anchors {
            let q = t.apply(&src[i]);
            let (j, d) = (0..dst.len())
                .map(|j| (j, (dst[j] - q).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .unwrap();
            if d < cfg.tau_pos {
                pos.push((i, j));
            }
        }
        assert_eq!(m.positives, pos);
        for (k, &(i, j)) in pos.iter().enumerate() {
            let mut best: Option<(f64, usize)> = None;
            for &(_, jj) in &pos {
                if (dst[jj] - dst[j]).norm() < cfg.tau_fn {
                    continue;
                }
                let d = feature_distance(fs.row(i), fd.row(jj));
                if best.is_none_or(|b| d < b.0 || (d == b.0 && jj < b.1)) {
                    best = Some((d, jj));
                }
            }
            assert_eq!(m.neg_src[k], best.map(|b| b.1));
            if let Some(n) = m.neg_src[k] {
                assert!((dst[n] - dst[j]).norm() >= cfg.tau_fn);
            }
            let mut best: Option<(f64, usize)> = None;
            for &(ii, _) in &pos {
                if (src[ii] - src[i]).norm() < cfg.tau_fn {
                    continue;
                }
                let d = feature_distance(fd.row(j), fs.row(ii));
                if best.is_none_or(|b| d < b.0 || (d == b.0 && ii < b.1)) {
                    best = Some((d, ii));
                }
            }
            assert_eq!(m.neg_dst[k], best.map(|b| b.1));
        }
    }
}
