//! Self-contained verification suites: finite-difference gradient checks of
//! every differentiable op and network, and oracle comparisons for the
//! geometric and format layers. Shared by the command-line driver and the
//! integration tests.
//!
//! Checks run on the calling thread so that the thread-local backward
//! perturbation hook reaches them.

use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{cross_attention, init_attention, with_synth_aux, DbeNet, ModelConfig, Network, Teacher};
use crate::geom::{kabsch, Point, PointCloud, RigidTransform, SpatialIndex, VoxelKey};
use crate::io::checkpoint::Checkpoint;
use crate::io::manifest::{encode_jsonl, parse_manifest, PairManifestEntry};
use crate::io::ply::{encode_ply, parse_ply, PlyEncoding};
use crate::kpfcn::{self, KernelDisposition, KpGeometry, KpfcnConfig};
use crate::metrics::{rre, rte};
use crate::registration::{match_features, ransac, Correspondence, MatchMode, RansacConfig};
use crate::sfcn::{self, sparse_conv, SfcnConfig, SparseGeometry, SparseTensor};
use crate::tensor::gradcheck::{check_gradients, check_params, GradCheckConfig};
use crate::tensor::params::Bound;
use crate::tensor::{KernelMap, ParamStore, Tape, Tensor, Var};
use crate::training::{hardest_contrastive_loss, kd_loss, KdConfig, KdVariant, LossConfig, MiningResult};

/// Relative-error bound for single ops and single modules.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for complete networks.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

/// Outcome of one check: `passed` iff `error < tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            error,
            tolerance,
            passed: error < tolerance,
        }
    }

    fn exact(name: impl Into<String>, ok: bool) -> Self {
        Self::new(name, if ok { 0.0 } else { 1.0 }, 0.5)
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<30} error {:.3e} (limit {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.error,
            self.tolerance
        )
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new(
        (0..n)
            .map(|_| Point::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..0.3)))
            .collect(),
    )
}

type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let (n, k, m) = (rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=6));
    let a = random(rng, &[n, k]);
    let b = random(rng, &[k, m]);
    let c = random(rng, &[n, k]);
    let row = random(rng, &[k]);
    vec![
        ("matmul", vec![a.clone(), b], |t, v| t.matmul(v[0], v[1])),
        ("transpose", vec![a.clone()], |t, v| t.transpose(v[0])),
        ("add", vec![a.clone(), c.clone()], |t, v| t.add(v[0], v[1])),
        ("sub", vec![a.clone(), c.clone()], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![a.clone(), c.clone()], |t, v| t.mul(v[0], v[1])),
        ("add_row", vec![a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1])),
        ("mul_row", vec![a.clone(), row], |t, v| t.mul_row(v[0], v[1])),
        ("scale", vec![a.clone()], |t, v| t.scale(v[0], -1.7)),
        ("add_scalar", vec![a.clone()], |t, v| t.add_scalar(v[0], 0.3)),
        ("relu", vec![a.clone()], |t, v| t.relu(v[0])),
        ("abs", vec![a.clone()], |t, v| t.abs(v[0])),
        ("square", vec![a.clone()], |t, v| t.square(v[0])),
        ("softmax_rows", vec![a.clone()], |t, v| t.softmax_rows(v[0])),
        ("log_softmax_rows", vec![a.clone()], |t, v| t.log_softmax_rows(v[0])),
        ("l2_normalize_rows", vec![a.clone()], |t, v| t.l2_normalize_rows(v[0])),
        ("row_distance", vec![a.clone(), c.clone()], |t, v| t.row_distance(v[0], v[1])),
        ("normalize_cols", vec![a.clone()], |t, v| t.normalize_cols(v[0], 1e-3)),
        ("gather_rows", vec![a.clone()], |t, v| {
            let n = t.value(v[0]).rows();
            t.gather_rows(v[0], Arc::new((0..2 * n).map(|i| (i * 7) % n).collect()))
        }),
        ("scatter_sum_rows", vec![a.clone()], |t, v| {
            let n = t.value(v[0]).rows();
            t.scatter_sum_rows(v[0], Arc::new((0..n).map(|i| i % 3).collect()), 3)
        }),
        ("concat_cols", vec![a.clone(), c], |t, v| t.concat_cols(&[v[0], v[1]])),
        ("reduce_sum", vec![a], |t, v| t.reduce_sum(v[0])),
    ]
}

/// Names accepted by [`gradcheck_suite`] besides `all`.
pub fn gradcheck_names() -> Vec<&'static str> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut names: Vec<&str> = op_cases(&mut rng).into_iter().map(|c| c.0).collect();
    names.extend([
        "kernel_conv",
        "cross_attention",
        "contrastive_loss",
        "kd_kl",
        "kd_l1",
        "sfcn",
        "kpfcn",
        "dbenet",
        "teacher",
    ]);
    names
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        sfcn: SfcnConfig {
            voxel_size: 0.1,
            widths: vec![3, 4],
            d_out: 3,
        },
        kpfcn: KpfcnConfig {
            dl: 0.1,
            widths: vec![2, 3],
            ..KpfcnConfig::desk()
        },
        kernel_seed: 1,
    }
}

fn sampled() -> GradCheckConfig {
    GradCheckConfig {
        max_entries_per_tensor: Some(6),
        ..GradCheckConfig::default()
    }
}

fn check_named(name: &'static str) -> Result<Check> {
    let cfg = GradCheckConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9c);
    if let Some((_, inputs, build)) = op_cases(&mut rng).into_iter().find(|c| c.0 == name) {
        // A second random shape guards against shape-specific luck.
        let mut worst = check_gradients(&inputs, |t, v| build(t, v), &cfg)?.max_rel_error;
        let mut rng = ChaCha8Rng::seed_from_u64(0x9d);
        let (_, inputs, build) = op_cases(&mut rng).into_iter().find(|c| c.0 == name).expect("same case list");
        worst = worst.max(check_gradients(&inputs, |t, v| build(t, v), &cfg)?.max_rel_error);
        return Ok(Check::new(name, worst, OP_TOLERANCE));
    }
    let error = match name {
        "kernel_conv" => {
            let triplets: Vec<_> = (0..30)
                .map(|_| {
                    (
                        rng.random_range(0..6),
                        rng.random_range(0..5),
                        rng.random_range(0..4),
                        rng.random_range(0.0..1.0),
                    )
                })
                .collect();
            let map = Arc::new(KernelMap::new(6, 5, 4, triplets)?);
            let (x, w) = (random(&mut rng, &[6, 3]), random(&mut rng, &[4, 3, 2]));
            check_gradients(&[x, w], |t, v| t.kernel_conv(v[0], v[1], map.clone()), &cfg)?.max_rel_error
        }
        "cross_attention" => {
            let mut store = ParamStore::new();
            init_attention(&mut store, &mut rng, 3, 2)?;
            let store = store.cast::<f64>();
            let names: Vec<String> = store.names().cloned().collect();
            let mut inputs = vec![random(&mut rng, &[4, 3]), random(&mut rng, &[5, 2])];
            inputs.extend(names.iter().map(|n| store.tensor(n).expect("listed").clone()));
            check_gradients(
                &inputs,
                |tape, v| {
                    let bound = Bound::from_pairs(names.iter().cloned().zip(v[2..].iter().copied()));
                    Ok(cross_attention(tape, &bound, v[0], v[1])?.fused)
                },
                &cfg,
            )?
            .max_rel_error
        }
        "contrastive_loss" => {
            let n = 8;
            let shrink = |t: Tensor<f64>| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| 0.6 * v).collect());
            let (fs, fd) = (shrink(random(&mut rng, &[n, 3]))?, shrink(random(&mut rng, &[n, 3]))?);
            let positives: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
            let m = MiningResult {
                neg_src: (0..n).map(|i| Some((i + 3) % n)).collect(),
                neg_dst: (0..n).map(|i| (i % 2 == 0).then_some((i + 5) % n)).collect(),
                n_pi: n,
                n_pj: n,
                positives,
            };
            let lc = LossConfig::default();
            check_gradients(&[fs, fd], |tape, v| Ok(hardest_contrastive_loss(tape, v[0], v[1], &m, &lc)?.total), &cfg)?
                .max_rel_error
        }
        "kd_kl" | "kd_l1" => {
            let variant = if name == "kd_kl" { KdVariant::Kl } else { KdVariant::L1 };
            let kc = KdConfig {
                temperature: 1.7,
                ..KdConfig::new(variant)
            };
            let (t, s) = (random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4]));
            check_gradients(&[s], |tape, v| kd_loss(tape, &t, v[0], &kc), &cfg)?.max_rel_error
        }
        "sfcn" => {
            let mc = tiny_model();
            let geom = SparseGeometry::build(&cloud(25, 7), mc.sfcn.voxel_size, mc.sfcn.levels())?;
            let mut store = ParamStore::new();
            sfcn::init_params(&mc.sfcn, &mut store, &mut rng)?;
            check_params(
                &store.cast::<f64>(),
                |tape, p| {
                    let enc = sfcn::sfcn_encode(tape, p, &geom, &mc.sfcn)?;
                    sfcn::sfcn_decode(tape, p, &geom, &mc.sfcn, enc.coarse, &enc)
                },
                &sampled(),
            )?
            .max_rel_error
        }
        "kpfcn" => {
            let mc = tiny_model();
            let kernel = KernelDisposition::generate(mc.kpfcn.kernel_points, mc.kernel_seed);
            let geom = KpGeometry::build(&cloud(30, 8), &mc.kpfcn, &kernel)?;
            let mut store = ParamStore::new();
            kpfcn::init_params(&mc.kpfcn, &mut store, &mut rng)?;
            check_params(&store.cast::<f64>(), |tape, p| kpfcn::kpfcn_encode(tape, p, &geom, &mc.kpfcn), &sampled())?
                .max_rel_error
        }
        "dbenet" => {
            let net = DbeNet::new(tiny_model(), 7)?;
            let input = net.prepare(&cloud(30, 8))?;
            check_params(
                &net.params.cast::<f64>(),
                |tape, p| Ok(net.forward_on(tape, p, &input)?.descriptors),
                &sampled(),
            )?
            .max_rel_error
        }
        "teacher" => {
            let net = Teacher::new(tiny_model(), 7)?;
            let input = net.prepare(&with_synth_aux(&cloud(30, 8), 3)?)?;
            check_params(
                &net.params.cast::<f64>(),
                |tape, p| Ok(net.forward_on(tape, p, &input)?.descriptors),
                &sampled(),
            )?
            .max_rel_error
        }
        other => return Err(Error::InvalidArgument(format!("unknown gradcheck scope `{other}`"))),
    };
    let tolerance = if matches!(name, "dbenet" | "teacher") {
        NETWORK_TOLERANCE
    } else {
        OP_TOLERANCE
    };
    Ok(Check::new(name, error, tolerance))
}

/// Finite-difference checks (64-bit, step 1e-5) for `scope`: `all` or one
/// name from [`gradcheck_names`].
pub fn gradcheck_suite(scope: &str) -> Result<Vec<Check>> {
    let names = gradcheck_names();
    if scope == "all" {
        return names.into_iter().map(check_named).collect();
    }
    match names.into_iter().find(|n| *n == scope) {
        Some(n) => Ok(vec![check_named(n)?]),
        None => Err(Error::InvalidArgument(format!("unknown gradcheck scope `{scope}`"))),
    }
}

/// Correspondences between a random cloud and its transformed, noisy copy,
/// with a fraction replaced by uniform outliers in the scene box.
pub struct OutlierProblem {
    pub src: Vec<Point>,
    pub dst: Vec<Point>,
    pub correspondences: Vec<Correspondence>,
    pub t_gt: RigidTransform,
}

pub fn outlier_problem(n: usize, outlier_fraction: f64, noise: f64, seed: u64) -> OutlierProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let t_gt = RigidTransform::from_axis_angle(
        axis,
        rng.random_range(-1.0..1.0),
        Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
    );
    let gauss = Normal::new(0.0, noise.max(0.0)).expect("finite σ");
    let box_point = |rng: &mut ChaCha8Rng| Point::new(rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
    let src: Vec<Point> = (0..n).map(|_| box_point(&mut rng)).collect();
    let n_out = (outlier_fraction * n as f64).round() as usize;
    let dst: Vec<Point> = src
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i < n_out {
                box_point(&mut rng)
            } else {
                t_gt.apply(p) + Point::new(gauss.sample(&mut rng), gauss.sample(&mut rng), gauss.sample(&mut rng))
            }
        })
        .collect();
    let correspondences = (0..n).map(|i| Correspondence { src: i, dst: i, distance: 0.0 }).collect();
    OutlierProblem {
        src,
        dst,
        correspondences,
        t_gt,
    }
}

/// Zero-padded dense correlation on an `n³` grid whose cells are listed in
/// sorted `(x, y, z)` order, evaluated at `outs`.
fn dense_conv(n: i64, x: &Tensor<f64>, w: &Tensor<f64>, outs: &[VoxelKey], spacing: i64) -> Vec<f64> {
    let (c_in, c_out) = (w.shape()[1], w.shape()[2]);
    let mut y = Vec::with_capacity(outs.len() * c_out);
    for q in outs {
        let mut acc = vec![0.0; c_out];
        for (k, o) in sfcn::kernel_offsets().iter().enumerate() {
            let c = [q[0] + o[0] * spacing, q[1] + o[1] * spacing, q[2] + o[2] * spacing];
            if !c.iter().all(|v| (0..n).contains(v)) {
                continue;
            }
            let i = (c[0] * n * n + c[1] * n + c[2]) as usize;
            for a in 0..c_in {
                for (b, acc) in acc.iter_mut().enumerate() {
                    *acc += x.row(i)[a] * w.data()[(k * c_in + a) * c_out + b];
                }
            }
        }
        y.extend(acc);
    }
    y
}

fn sparse_vs_dense() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for n in [3i64, 4] {
        let mut coords: Vec<VoxelKey> = Vec::new();
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    coords.push([x, y, z]);
                }
            }
        }
        let x = random(&mut rng, &[coords.len(), 2]);
        let w = random(&mut rng, &[27, 2, 3]);
        let st = SparseTensor::new(coords.clone(), x.clone(), 1, 0.05)?;
        for stride in [1, 2] {
            let out = sparse_conv(&st, &w, stride)?;
            let oracle = dense_conv(n, &x, &w, &out.coords, 1);
            worst = out.features.data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
    }
    Ok(worst)
}

fn kabsch_exact() -> Result<f64> {
    let p = outlier_problem(50, 0.0, 0.0, 5);
    let t = kabsch(&p.src, &p.dst)?;
    Ok(rte(&t.translation, &p.t_gt.translation) / 1e-9 + rre(&t.rotation, &p.t_gt.rotation) / 1e-6)
}

fn kdtree_vs_scan() -> usize {
    let pts = cloud(300, 9).points;
    let index = SpatialIndex::with_leaf_size(&pts, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mismatches = 0;
    for _ in 0..50 {
        let q = Point::new(rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2), rng.random_range(-0.2..0.5));
        let mut order: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, p)| ((p - q).norm_squared(), i)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let want: Vec<usize> = order.iter().take(7).map(|e| e.1).collect();
        let mut within: Vec<usize> = order.iter().filter(|e| e.0.sqrt() <= 0.15).map(|e| e.1).collect();
        let mut got = index.radius_search(&q, 0.15);
        within.sort_unstable();
        got.sort_unstable();
        mismatches += usize::from(index.knn(&q, 7) != want) + usize::from(got != within);
    }
    mismatches
}

fn matching_vs_scan() -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let fs = random(&mut rng, &[60, 8]).cast::<f32>();
    let fd = random(&mut rng, &[45, 8]).cast::<f32>();
    let got = match_features(&fs, &fd, MatchMode::Nearest)?;
    let nearest = |a: &[f32], other: &Tensor<f32>| -> usize {
        (0..other.rows())
            .map(|j| (a.iter().zip(other.row(j)).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>(), j))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .expect("non-empty")
            .1
    };
    Ok((0..fs.rows()).filter(|&i| got.iter().find(|c| c.src == i).map(|c| c.dst) != Some(nearest(fs.row(i), &fd))).count())
}

fn structure() -> Result<(f64, f64)> {
    let net = DbeNet::new(ModelConfig::desk(), 4)?;
    let input = net.prepare(&cloud(400, 13))?;
    let mut tape = Tape::<f32>::new();
    let p = net.params.bind(&mut tape);
    let out = net.forward_on(&mut tape, &p, &input)?;
    let dev = |t: &Tensor<f32>, f: fn(&[f32]) -> f64| (0..t.rows()).map(|i| (f(t.row(i)) - 1.0).abs()).fold(0.0, f64::max);
    Ok((
        dev(tape.value(out.descriptors), |r| r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()),
        dev(tape.value(out.attention), |r| r.iter().map(|v| *v as f64).sum()),
    ))
}

fn formats() -> Result<[bool; 3]> {
    let ck = Checkpoint::from_student(&DbeNet::new(ModelConfig::desk(), 6)?, 6);
    let bytes = ck.to_bytes()?;
    let ck_ok = Checkpoint::from_bytes(&bytes)?.to_bytes()? == bytes;

    // PLY stores f32 positions and 8-bit channels; start from representable values.
    let mut c = with_synth_aux(&cloud(100, 14), 2)?;
    c.points.iter_mut().for_each(|p| *p = p.map(|v| v as f32 as f64));
    let aux = c.aux().iter().map(|v| (v * 255.0).round() / 255.0).collect();
    c.set_aux(aux, c.aux_channels())?;
    let back = parse_ply(&encode_ply(&c, PlyEncoding::BinaryLittleEndian)?)?;
    let ply_ok = back == c;

    let entries: Vec<PairManifestEntry> = (0..3)
        .map(|k| PairManifestEntry {
            src: format!("pair_{k}_src.ply"),
            dst: format!("pair_{k}_dst.ply"),
            t_gt: outlier_problem(3, 0.0, 0.0, k).t_gt.to_rows(),
            scene: format!("scene_{k}"),
            overlap: 0.1 * k as f64 + 0.123_456_789,
        })
        .collect();
    let manifest_ok = parse_manifest(&encode_jsonl(&entries)?)? == entries;
    Ok([ck_ok, ply_ok, manifest_ok])
}

/// Every gradient check plus the oracle and invariant checks.
pub fn selftest() -> Result<Vec<Check>> {
    let mut out = gradcheck_suite("all")?;
    out.push(Check::new("sparse_conv_dense_oracle", sparse_vs_dense()?, 1e-5));
    out.push(Check::new("kabsch_exact", kabsch_exact()?, 1.0));
    out.push(Check::exact("kdtree_brute_force", kdtree_vs_scan() == 0));
    out.push(Check::exact("matching_brute_force", matching_vs_scan()? == 0));
    let (unit, softmax) = structure()?;
    out.push(Check::new("descriptor_unit_rows", unit, 1e-6));
    out.push(Check::new("attention_row_sums", softmax, 1e-6));
    let p = outlier_problem(1000, 0.6, 0.005, 1);
    let r = ransac(&p.correspondences, &p.src, &p.dst, &RansacConfig::default())?;
    out.push(Check::new("ransac_60pct_outliers_rre_deg", rre(&r.transform.rotation, &p.t_gt.rotation), 1.0));
    out.push(Check::new("ransac_60pct_outliers_rte_m", rte(&r.transform.translation, &p.t_gt.translation), 0.02));
    let [ck, ply, manifest] = formats()?;
    out.push(Check::exact("checkpoint_round_trip", ck));
    out.push(Check::exact("ply_round_trip", ply));
    out.push(Check::exact("manifest_round_trip", manifest));
    Ok(out)
}
