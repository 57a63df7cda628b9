//! Registration benchmark metrics: inlier ratio, feature-match recall,
//! correspondence RMSE, registration recall, translation and rotation error,
//! and success rate.
//!
//! Thresholds compare strictly (`IR > 5%`, `RMSE < 0.2 m`, `RTE < 2 m`,
//! `RRE < 5°`); the inlier residual check is inclusive (`≤ τ`).

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point, RigidTransform, SpatialIndex};
use crate::registration::Correspondence;

/// Residual bound of an inlier correspondence (m).
pub const TAU_INLIER: f64 = 0.10;
/// Minimum inlier ratio of a feature-matched pair.
pub const TAU_RATIO: f64 = 0.05;
/// RMSE bound of a registered pair (m).
pub const RR_THRESHOLD: f64 = 0.2;
pub const SUCCESS_RTE: f64 = 2.0;
pub const SUCCESS_RRE_DEG: f64 = 5.0;

/// Fraction of correspondences with `‖T_gt·x − y‖ ≤ τ`.
pub fn inlier_ratio(
    corr: &[Correspondence],
    src: &[Point],
    dst: &[Point],
    t_gt: &RigidTransform,
    tau: f64,
) -> Result<f64> {
    if corr.is_empty() {
        return Err(Error::UndefinedMetric("inlier ratio of no correspondences"));
    }
    let hits = corr
        .iter()
        .filter(|c| (t_gt.apply(&src[c.src]) - dst[c.dst]).norm() <= tau)
        .count();
    Ok(hits as f64 / corr.len() as f64)
}

fn percent(hits: usize, total: usize) -> f64 {
    100.0 * hits as f64 / total as f64
}

/// Percentage of pairs whose inlier ratio exceeds `tau_ratio`.
pub fn fmr(inlier_ratios: &[f64], tau_ratio: f64) -> Result<f64> {
    if inlier_ratios.is_empty() {
        return Err(Error::UndefinedMetric("feature-match recall of no pairs"));
    }
    Ok(percent(inlier_ratios.iter().filter(|&&r| r > tau_ratio).count(), inlier_ratios.len()))
}

/// Ground-truth correspondences: mutual nearest neighbors between
/// `T_gt·src` and `dst` that lie within `tau`.
pub fn ground_truth_pairs(src: &[Point], dst: &[Point], t_gt: &RigidTransform, tau: f64) -> Vec<(usize, usize)> {
    if src.is_empty() || dst.is_empty() {
        return Vec::new();
    }
    let moved: Vec<Point> = src.iter().map(|p| t_gt.apply(p)).collect();
    let (src_index, dst_index) = (SpatialIndex::new(&moved), SpatialIndex::new(dst));
    let candidates = crate::par::map_range(moved.len(), |i| {
        let (j, d2) = dst_index.nearest(&moved[i])?;
        let back = src_index.nearest(&dst[j])?.0;
        (d2.sqrt() <= tau && back == i).then_some((i, j))
    });
    candidates.into_iter().flatten().collect()
}

/// `sqrt(mean ‖T̂·x − y‖²)` over `pairs`.
pub fn rmse(t_est: &RigidTransform, src: &[Point], dst: &[Point], pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("RMSE over an empty correspondence set"));
    }
    let sum: f64 = pairs
        .iter()
        .map(|&(i, j)| (t_est.apply(&src[i]) - dst[j]).norm_squared())
        .sum();
    Ok((sum / pairs.len() as f64).sqrt())
}

pub fn rte(t_est: &Vector3<f64>, t_gt: &Vector3<f64>) -> f64 {
    (t_est - t_gt).norm()
}

/// Angle of `R̂ᵀR*` in degrees, i.e. `arccos((tr(R̂ᵀR*) − 1) / 2)`.
/// Evaluated as `atan2(sin, cos)` from the skew part and the trace, which
/// keeps full precision near 0° where arccos loses half the digits.
pub fn rre(r_est: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    let m = r_est.transpose() * r_gt;
    let skew = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    (skew.norm() / 2.0).atan2(c).to_degrees()
}

/// Evaluation of one registered pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEvalRecord {
    pub pair: String,
    pub correspondences: usize,
    pub inlier_ratio: f64,
    pub feature_match: bool,
    /// Whether the ground-truth correspondence set is non-empty.
    pub evaluable: bool,
    pub rmse: Option<f64>,
    pub rte: Option<f64>,
    pub rre: Option<f64>,
    pub registered: bool,
    /// Registration itself failed; error fields are absent.
    pub failed: bool,
}

impl PairEvalRecord {
    /// Scores an estimate against ground truth. `estimate` is `None` when
    /// registration failed.
    pub fn evaluate(
        pair: &str,
        corr: &[Correspondence],
        src: &[Point],
        dst: &[Point],
        t_gt: &RigidTransform,
        estimate: Option<&RigidTransform>,
        tau_pos: f64,
    ) -> Self {
        let ir = inlier_ratio(corr, src, dst, t_gt, TAU_INLIER).unwrap_or(0.0);
        let omega = ground_truth_pairs(src, dst, t_gt, tau_pos);
        let rmse = estimate.and_then(|t| rmse(t, src, dst, &omega).ok());
        Self {
            pair: pair.to_string(),
            correspondences: corr.len(),
            inlier_ratio: ir,
            feature_match: ir > TAU_RATIO,
            evaluable: !omega.is_empty(),
            rmse,
            rte: estimate.map(|t| rte(&t.translation, &t_gt.translation)),
            rre: estimate.map(|t| rre(&t.rotation, &t_gt.rotation)),
            registered: rmse.is_some_and(|e| e < RR_THRESHOLD),
            failed: estimate.is_none(),
        }
    }

    pub fn success(&self) -> bool {
        matches!((self.rte, self.rre), (Some(t), Some(r)) if t < SUCCESS_RTE && r < SUCCESS_RRE_DEG)
    }
}

/// Percentage of evaluable pairs with RMSE below `threshold`.
pub fn rr(records: &[PairEvalRecord], threshold: f64) -> Result<f64> {
    let evaluable: Vec<&PairEvalRecord> = records.iter().filter(|r| r.evaluable).collect();
    if evaluable.is_empty() {
        return Err(Error::UndefinedMetric("registration recall of no evaluable pairs"));
    }
    let hits = evaluable
        .iter()
        .filter(|r| r.rmse.is_some_and(|e| e < threshold))
        .count();
    Ok(percent(hits, evaluable.len()))
}

/// Percentage of pairs with `RTE < rte_max` and `RRE < rre_max`; failed
/// pairs count as misses.
pub fn success_rate(records: &[PairEvalRecord], rte_max: f64, rre_max: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("success rate of no pairs"));
    }
    let hits = records
        .iter()
        .filter(|r| matches!((r.rte, r.rre), (Some(t), Some(a)) if t < rte_max && a < rre_max))
        .count();
    Ok(percent(hits, records.len()))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates over a set of pair records. Standard deviations are population
/// deviations over non-failed pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub records: Vec<PairEvalRecord>,
    pub fmr: f64,
    pub mean_ir: f64,
    /// `None` when no pair is evaluable.
    pub rr: Option<f64>,
    pub not_evaluable: usize,
    pub rte_mean: f64,
    pub rte_std: f64,
    pub rre_mean: f64,
    pub rre_std: f64,
    pub success: f64,
}

impl BenchmarkReport {
    pub fn from_records(records: Vec<PairEvalRecord>) -> Result<Self> {
        let irs: Vec<f64> = records.iter().map(|r| r.inlier_ratio).collect();
        let fmr = fmr(&irs, TAU_RATIO)?;
        let mean_ir = 100.0 * irs.iter().sum::<f64>() / irs.len() as f64;
        let rr = rr(&records, RR_THRESHOLD).ok();
        let rtes: Vec<f64> = records.iter().filter_map(|r| r.rte).collect();
        let rres: Vec<f64> = records.iter().filter_map(|r| r.rre).collect();
        let (rte_mean, rte_std) = mean_std(&rtes);
        let (rre_mean, rre_std) = mean_std(&rres);
        let success = success_rate(&records, SUCCESS_RTE, SUCCESS_RRE_DEG)?;
        let not_evaluable = records.iter().filter(|r| !r.evaluable).count();
        Ok(Self {
            records,
            fmr,
            mean_ir,
            rr,
            not_evaluable,
            rte_mean,
            rte_std,
            rre_mean,
            rre_std,
            success,
        })
    }

    /// Recomputes every aggregate from the records and compares.
    pub fn is_consistent(&self) -> bool {
        Self::from_records(self.records.clone()).is_ok_and(|r| &r == self)
    }

    /// Two-block text table: `FMR IR RR` then `RTE STD RRE STD Success`.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let rr = self.rr.map_or("n/a".to_string(), |v| format!("{v:.1}"));
        let _ = writeln!(s, "{:>8} {:>8} {:>8}", "FMR(%)", "IR(%)", "RR(%)");
        let _ = writeln!(s, "{:>8.1} {:>8.1} {:>8}", self.fmr, self.mean_ir, rr);
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>8} {:>10}",
            "RTE(cm)", "STD", "RRE(°)", "STD", "Success(%)"
        );
        let _ = writeln!(
            s,
            "{:>8.2} {:>8.2} {:>8.3} {:>8.3} {:>10.1}",
            100.0 * self.rte_mean,
            100.0 * self.rte_std,
            self.rre_mean,
            self.rre_std,
            self.success
        );
        let _ = writeln!(
            s,
            "pairs {}  not evaluable {}  failed {}",
            self.records.len(),
            self.not_evaluable,
            self.records.iter().filter(|r| r.failed).count()
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn corr(pairs: &[(usize, usize)]) -> Vec<Correspondence> {
        pairs
            .iter()
            .map(|&(src, dst)| Correspondence { src, dst, distance: 0.0 })
            .collect()
    }

    #[test]
    fn inlier_ratio_extremes() {
        let pts = vec![Point::new(0.0, 0.0, 0.0), Point::new(1.0, 2.0, 3.0)];
        let c = corr(&[(0, 0), (1, 1)]);
        let id = RigidTransform::identity();
        assert_eq!(inlier_ratio(&c, &pts, &pts, &id, TAU_INLIER).unwrap(), 1.0);
        let far: Vec<Point> = pts.iter().map(|p| p + Point::new(1.0, 0.0, 0.0)).collect();
        assert_eq!(inlier_ratio(&c, &pts, &far, &id, TAU_INLIER).unwrap(), 0.0);
        assert!(inlier_ratio(&[], &pts, &pts, &id, TAU_INLIER).is_err());
    }

    #[test]
    fn fmr_is_strict() {
        assert_eq!(fmr(&[1.0, 1.0], TAU_RATIO).unwrap(), 100.0);
        assert_eq!(fmr(&[0.0, 0.0], TAU_RATIO).unwrap(), 0.0);
        let v = fmr(&[0.04, 0.05, 0.06], TAU_RATIO).unwrap();
        assert!((v - 100.0 / 3.0).abs() < 1e-12);
        assert!(fmr(&[], TAU_RATIO).is_err());
    }

    #[test]
    fn rmse_of_a_pure_offset() {
        let src: Vec<Point> = (0..10).map(|i| Point::new(i as f64 * 0.3, 0.1, -0.2)).collect();
        let pairs: Vec<(usize, usize)> = (0..10).map(|i| (i, i)).collect();
        let id = RigidTransform::identity();
        assert_eq!(rmse(&id, &src, &src, &pairs).unwrap(), 0.0);
        let shifted = RigidTransform::from_translation(Vector3::new(0.1, 0.0, 0.0));
        assert!((rmse(&shifted, &src, &src, &pairs).unwrap() - 0.1).abs() < 1e-12);
        assert!(rmse(&id, &src, &src, &[]).is_err());
    }

    #[test]
    fn rre_reference_values() {
        let id = Matrix3::identity();
        assert_eq!(rre(&id, &id), 0.0);
        let half = *Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI).matrix();
        assert!((rre(&half, &id) - 180.0).abs() < 1e-9);
        let thirty = *Rotation3::from_axis_angle(&Vector3::x_axis(), 30f64.to_radians()).matrix();
        assert!((rre(&thirty, &id) - 30.0).abs() < 1e-9);
    }

    #[test]
    fn rre_is_left_invariant() {
        let a = *Rotation3::from_euler_angles(0.3, -0.2, 1.1).matrix();
        let b = *Rotation3::from_euler_angles(-0.5, 0.4, 0.2).matrix();
        let g = *Rotation3::from_euler_angles(1.0, 2.0, -0.7).matrix();
        assert!((rre(&a, &b) - rre(&(g * a), &(g * b))).abs() < 1e-9);
    }

    #[test]
    fn ground_truth_pairs_are_mutual_and_close() {
        let src = vec![Point::new(0.0, 0.0, 0.0), Point::new(0.02, 0.0, 0.0), Point::new(5.0, 0.0, 0.0)];
        let dst = vec![Point::new(0.021, 0.0, 0.0), Point::new(-0.001, 0.0, 0.0)];
        let pairs = ground_truth_pairs(&src, &dst, &RigidTransform::identity(), 0.05);
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn ground_truth_pairs_equal_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let mut pt = || Point::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..0.3));
        let src: Vec<Point> = (0..200).map(|_| pt()).collect();
        let dst: Vec<Point> = (0..180).map(|_| pt()).collect();
        let t = RigidTransform::from_axis_angle(Vector3::z(), 0.05, Vector3::new(0.01, 0.0, 0.0));
        let tau = 0.06;
        let nearest = |q: &Point, set: &[Point]| {
            (0..set.len())
                .map(|j| (j, (set[j] - q).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .unwrap()
        };
        let moved: Vec<Point> = src.iter().map(|p| t.apply(p)).collect();
        let mut expected = Vec::new();
        for (i, q) in moved.iter().enumerate() {
            let (j, d) = nearest(q, &dst);
            if d <= tau && nearest(&dst[j], &moved).0 == i {
                expected.push((i, j));
            }
        }
        assert!(!expected.is_empty());
        assert_eq!(ground_truth_pairs(&src, &dst, &t, tau), expected);
    }

    fn record(ir: f64, rmse: Option<f64>, rte: f64, rre: f64) -> PairEvalRecord {
        PairEvalRecord {
            pair: "p".into(),
            correspondences: 10,
            inlier_ratio: ir,
            feature_match: ir > TAU_RATIO,
            evaluable: true,
            rmse,
            rte: Some(rte),
            rre: Some(rre),
            registered: rmse.is_some_and(|e| e < RR_THRESHOLD),
            failed: false,
        }
    }

    #[test]
    fn report_aggregates_recompute() {
        let recs = vec![
            record(0.5, Some(0.1), 0.05, 1.0),
            record(0.01, Some(0.3), 3.0, 2.0),
            record(0.2, Some(0.19), 0.5, 6.0),
        ];
        let r = BenchmarkReport::from_records(recs).unwrap();
        assert!((r.fmr - 200.0 / 3.0).abs() < 1e-12);
        assert!((r.rr.unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert!((r.success - 100.0 / 3.0).abs() < 1e-12);
        assert!(r.is_consistent());
        let mut tampered = r.clone();
        tampered.fmr += 1.0;
        assert!(!tampered.is_consistent());
    }
}
