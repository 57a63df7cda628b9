use std::sync::Arc;

use super::{conv_map, downsample_coords, occupied, transpose_map};
use crate::error::{Error, Result};
use crate::geom::VoxelKey;
use crate::geom::PointCloud;
use crate::tensor::KernelMap;

/// Coordinate pyramid and kernel maps of one cloud. Depends only on the
/// geometry, so it is built once and reused across epochs.
#[derive(Clone, Debug)]
pub struct SparseGeometry {
    pub voxel_size: f64,
    /// Row of level 0 holding each input point.
    pub point_rows: Arc<Vec<usize>>,
    /// `levels[ℓ]` holds coordinates at stride `2^ℓ`, sorted.
    pub levels: Vec<Vec<VoxelKey>>,
    same: Vec<Arc<KernelMap>>,
    down: Vec<Arc<KernelMap>>,
    up: Vec<Arc<KernelMap>>,
}

impl SparseGeometry {
    pub fn build(cloud: &PointCloud, voxel_size: f64, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidArgument("need at least one level".into()));
        }
        let (base, point_rows) = occupied(cloud, voxel_size)?;
        let mut coords = vec![base];
        for l in 1..levels {
            let next = downsample_coords(&coords[l - 1], 1 << (l - 1));
            coords.push(next);
        }
        let mut same = Vec::with_capacity(levels);
        let mut down = Vec::with_capacity(levels - 1);
        let mut up = Vec::with_capacity(levels - 1);
        for (l, c) in coords.iter().enumerate() {
            let s = 1i64 << l;
            same.push(Arc::new(conv_map(c, c, s)?));
            if l + 1 < levels {
                down.push(Arc::new(conv_map(c, &coords[l + 1], s)?));
                up.push(Arc::new(transpose_map(&coords[l + 1], c, s)?));
            }
        }
        Ok(Self {
            voxel_size,
            point_rows: Arc::new(point_rows),
            levels: coords,
            same,
            down,
            up,
        })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn n_points(&self) -> usize {
        self.point_rows.len()
    }

    /// Row count of the coarsest level (N′).
    pub fn coarse_len(&self) -> usize {
        self.levels.last().map_or(0, Vec::len)
    }

    pub fn coarse_coords(&self) -> &[VoxelKey] {
        self.levels.last().map_or(&[], |v| v.as_slice())
    }

    /// Stride-1 map at level `l`.
    pub fn same(&self, l: usize) -> Arc<KernelMap> {
        self.same[l].clone()
    }

    /// Stride-2 map from level `l` to `l + 1`.
    pub fn down(&self, l: usize) -> Arc<KernelMap> {
        self.down[l].clone()
    }

    /// Transposed map from level `l + 1` back to `l`.
    pub fn up(&self, l: usize) -> Arc<KernelMap> {
        self.up[l].clone()
    }
}
