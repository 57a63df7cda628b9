//! Sparse fully-convolutional backbone on voxelized clouds.
//!
//! Coordinates are integer voxel indices at the finest lattice. A tensor at
//! stride `s` only holds coordinates divisible by `s`; one stride-2 step maps
//! `c` to `floor(c / 2s) · 2s`.
//!
//! Kernel slot `k` of a `3×3×3` kernel is the offset `(dx, dy, dz)` with
//! `k = 9(dz+1) + 3(dy+1) + (dx+1)`, i.e. lexicographic in `(z, y, x)`.

mod geometry;
mod net;

pub use geometry::SparseGeometry;
pub use net::{init_params, sfcn_decode, sfcn_encode, Encoded, SfcnConfig, DECODER, ENCODER};

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geom::{voxel_key, VoxelKey};
use crate::geom::PointCloud;
use crate::tensor::{KernelMap, Real, Tape, Tensor};

pub const KERNEL_VOLUME: usize = 27;
/// Slot of the zero offset.
pub const CENTER_SLOT: usize = 13;

/// Offsets in slot order.
pub fn kernel_offsets() -> [[i64; 3]; KERNEL_VOLUME] {
    let mut out = [[0; 3]; KERNEL_VOLUME];
    for (k, o) in out.iter_mut().enumerate() {
        let k = k as i64;
        *o = [k % 3 - 1, (k / 3) % 3 - 1, k / 9 - 1];
    }
    out
}

/// Feature rows attached to unique lattice coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensor<T = f32> {
    pub coords: Vec<VoxelKey>,
    pub features: Tensor<T>,
    pub stride: i64,
    pub voxel_size: f64,
}

impl<T: Real> SparseTensor<T> {
    pub fn new(coords: Vec<VoxelKey>, features: Tensor<T>, stride: i64, voxel_size: f64) -> Result<Self> {
        if stride < 1 {
            return Err(Error::InvalidArgument(format!("stride {stride} < 1")));
        }
        if features.shape().len() != 2 || features.rows() != coords.len() {
            return Err(Error::shape("sparse_tensor", &[coords.len()], features.shape()));
        }
        if coords.iter().any(|c| c.iter().any(|v| i64::rem_euclid(*v, stride) != 0)) {
            return Err(Error::InvalidArgument(format!(
                "coordinate not divisible by stride {stride}"
            )));
        }
        if lookup(&coords).len() != coords.len() {
            return Err(Error::InvalidArgument("duplicate coordinates".into()));
        }
        Ok(Self {
            coords,
            features,
            stride,
            voxel_size,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }
}

/// Result of [`voxelize`]: the stride-1 tensor plus, for every input point,
/// the row of the voxel that holds it.
#[derive(Clone, Debug)]
pub struct Voxelized {
    pub tensor: SparseTensor<f32>,
    pub point_rows: Vec<usize>,
}

/// One row per occupied voxel, ordered by coordinate, each with the single
/// input feature `1`.
pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> Result<Voxelized> {
    let (coords, point_rows) = occupied(cloud, voxel_size)?;
    let features = Tensor::full(&[coords.len(), 1], 1.0);
    Ok(Voxelized {
        tensor: SparseTensor::new(coords, features, 1, voxel_size)?,
        point_rows,
    })
}

pub(crate) fn occupied(cloud: &PointCloud, voxel_size: f64) -> Result<(Vec<VoxelKey>, Vec<usize>)> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("voxelize: empty cloud"));
    }
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    let keys: Vec<VoxelKey> = cloud.points.iter().map(|p| voxel_key(p, voxel_size)).collect();
    let mut coords = keys.clone();
    coords.sort_unstable();
    coords.dedup();
    let rows = lookup(&coords);
    let point_rows = keys.iter().map(|k| rows[k]).collect();
    Ok((coords, point_rows))
}

pub(crate) fn lookup(coords: &[VoxelKey]) -> HashMap<VoxelKey, usize> {
    coords.iter().enumerate().map(|(i, &c)| (c, i)).collect()
}

/// Coordinates of the next coarser level, sorted.
pub fn downsample_coords(coords: &[VoxelKey], stride: i64) -> Vec<VoxelKey> {
    let s2 = 2 * stride;
    let mut out: Vec<VoxelKey> = coords
        .iter()
        .map(|c| [c[0].div_euclid(s2) * s2, c[1].div_euclid(s2) * s2, c[2].div_euclid(s2) * s2])
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn shifted(c: &VoxelKey, o: &[i64; 3], s: i64) -> VoxelKey {
    [c[0] + o[0] * s, c[1] + o[1] * s, c[2] + o[2] * s]
}

/// Output `q` gathers input `q + o·stride_in` through slot `o`.
pub fn conv_map(inputs: &[VoxelKey], outputs: &[VoxelKey], stride_in: i64) -> Result<KernelMap> {
    let rows = lookup(inputs);
    let offsets = kernel_offsets();
    let per_out = crate::par::map_range(outputs.len(), |o| {
        let mut v = Vec::new();
        for (k, off) in offsets.iter().enumerate() {
            if let Some(&i) = rows.get(&shifted(&outputs[o], off, stride_in)) {
                v.push((i, o, k, 1.0));
            }
        }
        v
    });
    KernelMap::new(inputs.len(), outputs.len(), KERNEL_VOLUME, per_out.concat())
}

/// Reverse of the stride-2 [`conv_map`]: coarse input `q` scatters into fine
/// output `q + o·stride_fine` through slot `o`.
pub fn transpose_map(coarse: &[VoxelKey], fine: &[VoxelKey], stride_fine: i64) -> Result<KernelMap> {
    let rows = lookup(coarse);
    let offsets = kernel_offsets();
    let per_out = crate::par::map_range(fine.len(), |o| {
        let mut v = Vec::new();
        for (k, off) in offsets.iter().enumerate() {
            let q = shifted(&fine[o], off, -stride_fine);
            if let Some(&i) = rows.get(&q) {
                v.push((i, o, k, 1.0));
            }
        }
        v
    });
    KernelMap::new(coarse.len(), fine.len(), KERNEL_VOLUME, per_out.concat())
}

/// Sparse `3×3×3` convolution with `weights` of shape `(27 × c_in × c_out)`.
/// Stride 1 keeps the coordinate set; stride 2 moves to the coarser lattice.
pub fn sparse_conv<T: Real>(st: &SparseTensor<T>, weights: &Tensor<T>, stride: i64) -> Result<SparseTensor<T>> {
    let out_coords = match stride {
        1 => st.coords.clone(),
        2 => downsample_coords(&st.coords, st.stride),
        _ => return Err(Error::InvalidArgument(format!("stride {stride} not in {{1, 2}}"))),
    };
    let map = conv_map(&st.coords, &out_coords, st.stride)?;
    let features = apply(&st.features, weights, map)?;
    SparseTensor::new(out_coords, features, st.stride * stride, st.voxel_size)
}

/// Stride-2 transposed convolution onto `target`, a coordinate set at half
/// the input stride. Every target needs its parent voxel in `st`.
pub fn sparse_conv_transpose<T: Real>(
    st: &SparseTensor<T>,
    weights: &Tensor<T>,
    target: &[VoxelKey],
) -> Result<SparseTensor<T>> {
    if st.stride < 2 || st.stride % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "transpose needs an even stride, got {}",
            st.stride
        )));
    }
    let fine = st.stride / 2;
    let parents = lookup(&st.coords);
    for c in target {
        if c.iter().any(|v| i64::rem_euclid(*v, fine) != 0) {
            return Err(Error::InvalidArgument(format!(
                "target {c:?} is not on the stride-{fine} lattice"
            )));
        }
        let p = downsample_coords(std::slice::from_ref(c), fine)[0];
        if !parents.contains_key(&p) {
            return Err(Error::InvalidArgument(format!(
                "target {c:?} has no parent voxel in the input"
            )));
        }
    }
    let map = transpose_map(&st.coords, target, fine)?;
    let features = apply(&st.features, weights, map)?;
    SparseTensor::new(target.to_vec(), features, fine, st.voxel_size)
}

fn apply<T: Real>(x: &Tensor<T>, w: &Tensor<T>, map: KernelMap) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let y = tape.kernel_conv(xv, wv, Arc::new(map))?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn grid(n: i64) -> Vec<VoxelKey> {
        let mut v = Vec::new();
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    v.push([x, y, z]);
                }
            }
        }
        v.sort_unstable();
        v
    }

    /// Dense zero-padded correlation over an `n³` grid, evaluated at output
    /// cells `outs` with input spacing `s`.
    fn dense_conv(
        n: i64,
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        outs: &[VoxelKey],
        s: i64,
    ) -> Vec<Vec<f64>> {
        let (c_in, c_out) = (w.shape()[1], w.shape()[2]);
        let at = |c: [i64; 3]| -> Option<usize> {
            if c.iter().all(|&v| (0..n).contains(&v)) {
                // `grid` is sorted by (x, y, z).
                Some((c[0] * n * n + c[1] * n + c[2]) as usize)
            } else {
                None
            }
        };
        outs.iter()
            .map(|q| {
                let mut y = vec![0.0; c_out];
                for dz in -1..=1i64 {
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            let k = ((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)) as usize;
                            let Some(i) = at([q[0] + dx * s, q[1] + dy * s, q[2] + dz * s]) else {
                                continue;
                            };
                            for a in 0..c_in {
                                for b in 0..c_out {
                                    y[b] += x.row(i)[a] * w.data()[(k * c_in + a) * c_out + b];
                                }
                            }
                        }
                    }
                }
                y
            })
            .collect()
    }

    #[test]
    fn offsets_are_lexicographic_in_zyx() {
        let o = kernel_offsets();
        assert_eq!(o[0], [-1, -1, -1]);
        assert_eq!(o[1], [0, -1, -1]);
        assert_eq!(o[3], [-1, 0, -1]);
        assert_eq!(o[9], [-1, -1, 0]);
        assert_eq!(o[CENTER_SLOT], [0, 0, 0]);
    }

    #[test]
    fn voxelize_single_point() {
        let v = voxelize(&PointCloud::new(vec![Point::new(0.12, -0.3, 0.0)]), 0.05).unwrap();
        assert_eq!(v.tensor.len(), 1);
        assert_eq!(v.tensor.features.data(), &[1.0]);
        assert_eq!(v.point_rows, vec![0]);
    }

    #[test]
    fn voxelize_merges_shared_voxels() {
        let cloud = PointCloud::new(vec![Point::new(0.01, 0.01, 0.01), Point::new(0.02, 0.03, 0.04)]);
        let v = voxelize(&cloud, 0.05).unwrap();
        assert_eq!(v.tensor.len(), 1);
        assert_eq!(v.point_rows, vec![0, 0]);
    }

    #[test]
    fn voxelize_rejects_empty_cloud() {
        assert!(matches!(
            voxelize(&PointCloud::new(vec![]), 0.05),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn voxelize_shifts_with_lattice_translation() {
        let v = 0.25;
        let pts: Vec<Point> = (0..20)
            .map(|i| Point::new(0.11 + 0.3 * i as f64, 0.05 * (i % 3) as f64, 0.6))
            .collect();
        let a = voxelize(&PointCloud::new(pts.clone()), v).unwrap();
        let shift = Point::new(3.0 * v, -2.0 * v, v);
        let b = voxelize(&PointCloud::new(pts.iter().map(|p| p + shift).collect()), v).unwrap();
        let moved: Vec<VoxelKey> = a.tensor.coords.iter().map(|c| [c[0] + 3, c[1] - 2, c[2] + 1]).collect();
        assert_eq!(moved, b.tensor.coords);
        assert_eq!(a.tensor.features, b.tensor.features);
        assert_eq!(a.point_rows, b.point_rows);
    }

    #[test]
    fn identity_center_kernel_is_identity() {
        let st = SparseTensor::new(vec![[2, 5, -1]], Tensor::<f64>::matrix(1, 2, vec![0.5, -3.0]).unwrap(), 1, 0.05).unwrap();
        let mut w = Tensor::<f64>::zeros(&[27, 2, 2]);
        w.data_mut()[CENTER_SLOT * 4] = 1.0;
        w.data_mut()[CENTER_SLOT * 4 + 3] = 1.0;
        let out = sparse_conv(&st, &w, 1).unwrap();
        assert_eq!(out.features, st.features);
        assert_eq!(out.coords, st.coords);
    }

    #[test]
    fn stride_one_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [3, 4] {
            let coords = grid(n);
            let x = random(&mut rng, &[coords.len(), 2]);
            let w = random(&mut rng, &[27, 2, 3]);
            let st = SparseTensor::new(coords.clone(), x.clone(), 1, 0.05).unwrap();
            let out = sparse_conv(&st, &w, 1).unwrap();
            let oracle = dense_conv(n, &x, &w, &coords, 1);
            for (i, row) in oracle.iter().enumerate() {
                for (a, b) in out.features.row(i).iter().zip(row) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stride_two_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let coords = grid(4);
        let x = random(&mut rng, &[coords.len(), 3]);
        let w = random(&mut rng, &[27, 3, 2]);
        let st = SparseTensor::new(coords.clone(), x.clone(), 1, 0.05).unwrap();
        let out = sparse_conv(&st, &w, 2).unwrap();
        assert_eq!(out.stride, 2);
        assert_eq!(out.len(), 8);
        let oracle = dense_conv(4, &x, &w, &out.coords, 1);
        for (i, row) in oracle.iter().enumerate() {
            for (a, b) in out.features.row(i).iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_one_is_translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let coords: Vec<VoxelKey> = vec![[0, 0, 0], [1, 0, 0], [1, 1, 0], [3, 2, 1], [2, 2, 1]];
        let x = Tensor::<f32>::from_f64(&[5, 2], random(&mut rng, &[5, 2]).data()).unwrap();
        let w = Tensor::<f32>::from_f64(&[27, 2, 4], random(&mut rng, &[27, 2, 4]).data()).unwrap();
        let a = sparse_conv(&SparseTensor::new(coords.clone(), x.clone(), 1, 0.05).unwrap(), &w, 1).unwrap();
        let moved: Vec<VoxelKey> = coords.iter().map(|c| [c[0] + 4, c[1], c[2]]).collect();
        let b = sparse_conv(&SparseTensor::new(moved, x, 1, 0.05).unwrap(), &w, 1).unwrap();
        assert!(a.features.max_abs_diff(&b.features) < 1e-5);
    }

    #[test]
    fn transpose_single_voxel_identity() {
        let st = SparseTensor::new(vec![[4, 2, 0]], Tensor::<f64>::matrix(1, 1, vec![2.5]).unwrap(), 2, 0.05).unwrap();
        let mut w = Tensor::<f64>::zeros(&[27, 1, 1]);
        w.data_mut()[CENTER_SLOT] = 1.0;
        let out = sparse_conv_transpose(&st, &w, &[[4, 2, 0]]).unwrap();
        assert_eq!(out.features.data(), &[2.5]);
        assert_eq!(out.stride, 1);
    }

    #[test]
    fn transpose_with_empty_target_is_empty() {
        let st = SparseTensor::new(vec![[0, 0, 0]], Tensor::<f64>::matrix(1, 1, vec![1.0]).unwrap(), 2, 0.05).unwrap();
        let out = sparse_conv_transpose(&st, &Tensor::zeros(&[27, 1, 3]), &[]).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.features.shape(), &[0, 3]);
    }

    #[test]
    fn transpose_rejects_orphan_targets() {
        let st = SparseTensor::new(vec![[0, 0, 0]], Tensor::<f64>::matrix(1, 1, vec![1.0]).unwrap(), 2, 0.05).unwrap();
        let w = Tensor::zeros(&[27, 1, 1]);
        assert!(sparse_conv_transpose(&st, &w, &[[2, 0, 0]]).is_err());
        assert!(sparse_conv_transpose(&st, &w, &[[1, 0, 0]]).is_ok());
    }

    #[test]
    fn transpose_then_conv_matches_line_oracle() {
        // Coarse voxels at x = 0 and x = 2 (stride 2), fine targets x = 0..4,
        // scalar features; only slots along the x axis are non-zero.
        let coarse = SparseTensor::new(
            vec![[0, 0, 0], [2, 0, 0]],
            Tensor::<f64>::matrix(2, 1, vec![1.5, -2.0]).unwrap(),
            2,
            0.05,
        )
        .unwrap();
        let slot = |dx: i64| (CENTER_SLOT as i64 + dx) as usize;
        let (t, c) = ([0.3, 1.1, -0.7], [0.2, -0.5, 0.9]);
        let mut wt = Tensor::<f64>::zeros(&[27, 1, 1]);
        let mut wc = Tensor::<f64>::zeros(&[27, 1, 1]);
        for dx in -1..=1i64 {
            wt.data_mut()[slot(dx)] = t[(dx + 1) as usize];
            wc.data_mut()[slot(dx)] = c[(dx + 1) as usize];
        }
        let target: Vec<VoxelKey> = (0..4).map(|x| [x, 0, 0]).collect();
        let up = sparse_conv_transpose(&coarse, &wt, &target).unwrap();
        let out = sparse_conv(&up, &wc, 1).unwrap();

        // Fine x receives coarse q through offset x - q; then a 1-D correlation.
        let xs = [1.5, -2.0];
        let mut fine = [0.0f64; 4];
        for (x, f) in fine.iter_mut().enumerate() {
            for (qi, q) in [0i64, 2].iter().enumerate() {
                let d = x as i64 - q;
                if (-1..=1).contains(&d) {
                    *f += xs[qi] * t[(d + 1) as usize];
                }
            }
        }
        for x in 0..4i64 {
            let mut y = 0.0;
            for d in -1..=1i64 {
                if (0..4).contains(&(x + d)) {
                    y += fine[(x + d) as usize] * c[(d + 1) as usize];
                }
            }
            assert!((out.features.data()[x as usize] - y).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_shape_is_checked() {
        let st = SparseTensor::new(vec![[0, 0, 0]], Tensor::<f64>::matrix(1, 2, vec![1.0, 1.0]).unwrap(), 1, 0.05).unwrap();
        assert!(matches!(
            sparse_conv(&st, &Tensor::zeros(&[27, 3, 1]), 1),
            Err(Error::Shape { .. })
        ));
    }
}
