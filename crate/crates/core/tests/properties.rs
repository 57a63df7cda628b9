//! Property tests across module boundaries: registration, metrics, point
//! cloud utilities and the file formats.

use std::collections::BTreeSet;

use dbenet_core::geom::{voxel_downsample, Point, PointCloud, RigidTransform};
use dbenet_core::io::manifest::{encode_jsonl, parse_manifest};
use dbenet_core::io::ply::{encode_ply, parse_ply};
use dbenet_core::io::{PairManifestEntry, PlyEncoding};
use dbenet_core::metrics::{rre, rte, BenchmarkReport, PairEvalRecord};
use dbenet_core::registration::{match_features, ransac, Correspondence, MatchMode, RansacConfig};
use dbenet_core::tensor::Tensor;
use dbenet_core::verify::outlier_problem;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn point() -> impl Strategy<Value = Point> {
    (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y, z)| Point::new(x, y, z))
}

fn transform() -> impl Strategy<Value = RigidTransform> {
    (point(), -3.1..3.1f64, point()).prop_map(|(axis, angle, t)| {
        let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis };
        RigidTransform::from_axis_angle(axis, angle, t)
    })
}

/// Rows on the unit sphere, far enough apart that nearest neighbors are
/// unambiguous in single precision.
fn distinct_unit_rows(n: usize, d: usize, seed: u64) -> Tensor<f32> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f32>> = Vec::new();
    while rows.len() < n {
        let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm < 0.1 {
            continue;
        }
        let v: Vec<f32> = v.iter().map(|x| x / norm).collect();
        let far = rows
            .iter()
            .all(|r| r.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f32>() > 1e-4);
        if far {
            rows.push(v);
        }
    }
    Tensor::matrix(n, d, rows.concat()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ransac_ignores_correspondence_order(seed in 0u64..1000, shuffle in 0u64..1000) {
        let p = outlier_problem(300, 0.5, 0.01, seed);
        let cfg = RansacConfig { seed, ..RansacConfig::default() };
        let a = ransac(&p.correspondences, &p.src, &p.dst, &cfg).unwrap();
        let mut shuffled = p.correspondences.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let b = ransac(&shuffled, &p.src, &p.dst, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn ransac_inliers_respect_the_threshold(seed in 0u64..1000, frac in 0.0..0.8f64) {
        let p = outlier_problem(200, frac, 0.02, seed);
        let cfg = RansacConfig { seed, max_iterations: 2000, ..RansacConfig::default() };
        let r = ransac(&p.correspondences, &p.src, &p.dst, &cfg).unwrap();
        prop_assert!(r.has_model());
        for &(i, j) in &r.inliers {
            prop_assert!((r.transform.apply(&p.src[i]) - p.dst[j]).norm() <= cfg.inlier_threshold);
        }
    }

    #[test]
    fn self_matching_is_the_identity(n in 1usize..60, seed in 0u64..1000, mutual in any::<bool>()) {
        let f = distinct_unit_rows(n, 8, seed);
        let mode = if mutual { MatchMode::Mutual } else { MatchMode::Nearest };
        let m = match_features(&f, &f, mode).unwrap();
        prop_assert_eq!(m.len(), n);
        for c in &m {
            prop_assert_eq!(c.src, c.dst);
        }
    }

    #[test]
    fn mutual_matches_are_symmetric_nearest_matches(n in 1usize..50, m in 1usize..50, seed in 0u64..1000) {
        let a = distinct_unit_rows(n, 6, seed);
        let b = distinct_unit_rows(m, 6, seed + 7919);
        let pairs = |v: Vec<Correspondence>| v.into_iter().map(|c| (c.src, c.dst)).collect::<BTreeSet<_>>();
        let mutual = pairs(match_features(&a, &b, MatchMode::Mutual).unwrap());
        let nearest = pairs(match_features(&a, &b, MatchMode::Nearest).unwrap());
        let back: BTreeSet<(usize, usize)> = pairs(match_features(&b, &a, MatchMode::Mutual).unwrap())
            .into_iter()
            .map(|(j, i)| (i, j))
            .collect();
        prop_assert!(mutual.is_subset(&nearest));
        prop_assert_eq!(mutual, back);
    }
}

proptest! {
    #[test]
    fn rre_is_a_left_invariant_angle(a in transform(), b in transform(), q in transform()) {
        let e = rre(&a.rotation, &b.rotation);
        prop_assert!((0.0..=180.0).contains(&e));
        prop_assert!((e - rre(&b.rotation, &a.rotation)).abs() < 1e-9);
        prop_assert!((e - rre(&(q.rotation * a.rotation), &(q.rotation * b.rotation))).abs() < 1e-7);
        prop_assert!(rre(&a.rotation, &a.rotation) < 1e-9);
        prop_assert_eq!(rte(&a.translation, &a.translation), 0.0);
    }

    #[test]
    fn transform_rows_and_inverse_round_trip(t in transform(), p in point()) {
        prop_assert_eq!(RigidTransform::from_rows(&t.to_rows(), 1e-9).unwrap(), t.clone());
        let back = t.inverse().apply(&t.apply(&p));
        prop_assert!((back - p).norm() < 1e-12);
        let id = t.compose(&t.inverse());
        prop_assert!(rre(&id.rotation, &RigidTransform::identity().rotation) < 1e-6);
        prop_assert!(id.translation.norm() < 1e-12);
    }

    #[test]
    fn downsampling_ignores_point_order(points in prop::collection::vec(point(), 1..200), seed in 0u64..100) {
        let cloud = PointCloud::new(points.clone());
        let mut shuffled = points;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = voxel_downsample(&cloud, 0.7).unwrap();
        let b = voxel_downsample(&PointCloud::new(shuffled), 0.7).unwrap();
        prop_assert!(a.len() <= cloud.len());
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.points.iter().zip(&b.points) {
            prop_assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn ply_round_trips_representable_clouds(
        raw in prop::collection::vec((-100.0..100.0f32, -100.0..100.0f32, -100.0..100.0f32, 0u8..=255, 0u8..=255, 0u8..=255), 1..80),
        ascii in any::<bool>(),
    ) {
        let points = raw.iter().map(|r| Point::new(r.0 as f64, r.1 as f64, r.2 as f64)).collect();
        let aux = raw.iter().flat_map(|r| [r.3, r.4, r.5]).map(|v| v as f64 / 255.0).collect();
        let cloud = PointCloud::with_aux(points, aux, 3).unwrap();
        let enc = if ascii { PlyEncoding::Ascii } else { PlyEncoding::BinaryLittleEndian };
        prop_assert_eq!(parse_ply(&encode_ply(&cloud, enc).unwrap()).unwrap(), cloud);
    }

    #[test]
    fn manifest_round_trips(
        rows in prop::collection::vec((transform(), "[a-z0-9_./]{1,24}", "[a-zA-Z0-9 _\"\\\\-]{0,16}", 0.0..=1.0f64), 0..6),
    ) {
        let entries: Vec<PairManifestEntry> = rows
            .into_iter()
            .map(|(t, path, scene, overlap)| PairManifestEntry {
                src: format!("{path}.src"),
                dst: format!("{path}.dst"),
                t_gt: t.to_rows(),
                scene,
                overlap,
            })
            .collect();
        prop_assert_eq!(parse_manifest(&encode_jsonl(&entries).unwrap()).unwrap(), entries);
    }

    #[test]
    fn report_aggregates_recompute(
        rows in prop::collection::vec((0.0..1.0f64, any::<bool>(), prop::option::of((0.0..0.5f64, 0.0..4.0f64, 0.0..20.0f64))), 1..30),
    ) {
        let records: Vec<PairEvalRecord> = rows
            .into_iter()
            .enumerate()
            .map(|(k, (ir, evaluable, est))| PairEvalRecord {
                pair: format!("p{k}"),
                correspondences: 10,
                inlier_ratio: ir,
                feature_match: ir > 0.05,
                evaluable,
                rmse: est.filter(|_| evaluable).map(|e| e.0),
                rte: est.map(|e| e.1),
                rre: est.map(|e| e.2),
                registered: evaluable && est.is_some_and(|e| e.0 < 0.2),
                failed: est.is_none(),
            })
            .collect();
        let report = BenchmarkReport::from_records(records).unwrap();
        prop_assert!(report.is_consistent());
        prop_assert!((0.0..=100.0).contains(&report.fmr));
        prop_assert!((0.0..=100.0).contains(&report.success));
        prop_assert!(report.rr.is_none_or(|r| (0.0..=100.0).contains(&r)));
    }
}
