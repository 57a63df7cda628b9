use std::collections::HashMap;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

pub type VoxelKey = [i64; 3];

/// Integer cell of `p` on a lattice of edge `voxel_size`. Points on a cell
/// boundary fall into the higher-index cell.
pub fn voxel_key(p: &Point, voxel_size: f64) -> VoxelKey {
    [
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    ]
}

/// One point per occupied voxel at the centroid of its members; auxiliary
/// channels are averaged. Output is ordered by voxel key so it does not
/// depend on input order.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    let channels = cloud.aux_channels();
    let mut cells: HashMap<VoxelKey, usize> = HashMap::new();
    let mut sums: Vec<(VoxelKey, Point, Vec<f64>, usize)> = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = voxel_key(p, voxel_size);
        let slot = *cells.entry(key).or_insert_with(|| {
            sums.push((key, Point::zeros(), vec![0.0; channels], 0));
            sums.len() - 1
        });
        let entry = &mut sums[slot];
        entry.1 += p;
        entry.3 += 1;
        if channels > 0 {
            for (acc, v) in entry.2.iter_mut().zip(cloud.aux_row(i)) {
                *acc += v;
            }
        }
    }
    sums.sort_unstable_by_key(|e| e.0);
    let mut points = Vec::with_capacity(sums.len());
    let mut aux = Vec::with_capacity(sums.len() * channels);
    for (_, sum, aux_sum, count) in sums {
        let n = count as f64;
        points.push(sum / n);
        aux.extend(aux_sum.into_iter().map(|v| v / n));
    }
    PointCloud::with_aux(points, aux, channels)
}
