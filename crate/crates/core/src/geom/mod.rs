//! Point clouds, rigid transforms and the spatial primitives the networks
//! and the estimator are built on. Everything here is 64-bit.

mod kabsch;
mod kdtree;
mod voxel;

pub use kabsch::kabsch;
pub use kdtree::SpatialIndex;
pub use voxel::{voxel_downsample, voxel_key, VoxelKey};

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

/// Ordered points with optional per-point auxiliary channels
/// (stored row-major, `aux_channels` values per point).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    aux: Vec<f64>,
    aux_channels: usize,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self {
            points,
            aux: Vec::new(),
            aux_channels: 0,
        }
    }

    pub fn with_aux(points: Vec<Point>, aux: Vec<f64>, channels: usize) -> Result<Self> {
        if aux.len() != points.len() * channels {
            return Err(Error::InvalidArgument(format!(
                "{} aux values for {} points with {} channels",
                aux.len(),
                points.len(),
                channels
            )));
        }
        let cloud = Self {
            points,
            aux,
            aux_channels: channels,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn aux_channels(&self) -> usize {
        self.aux_channels
    }

    pub fn aux(&self) -> &[f64] {
        &self.aux
    }

    pub fn aux_row(&self, i: usize) -> &[f64] {
        &self.aux[i * self.aux_channels..(i + 1) * self.aux_channels]
    }

    /// Replaces the auxiliary channels.
    pub fn set_aux(&mut self, aux: Vec<f64>, channels: usize) -> Result<()> {
        if aux.len() != self.points.len() * channels {
            return Err(Error::InvalidArgument(format!(
                "{} aux values for {} points with {} channels",
                aux.len(),
                self.points.len(),
                channels
            )));
        }
        self.aux = aux;
        self.aux_channels = channels;
        Ok(())
    }

    pub fn strip_aux(mut self) -> Self {
        self.aux.clear();
        self.aux_channels = 0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::InvalidArgument(format!("point {i} is not finite")));
        }
        if self.aux.len() != self.points.len() * self.aux_channels {
            return Err(Error::InvalidArgument("aux channel count mismatch".into()));
        }
        Ok(())
    }

    pub fn translated(&self, t: &Point) -> Self {
        let mut out = self.clone();
        out.points.iter_mut().for_each(|p| *p += t);
        out
    }

    /// Subset of the cloud (points and aux) in the order of `ids`.
    pub fn select(&self, ids: &[usize]) -> Self {
        let points = ids.iter().map(|&i| self.points[i]).collect();
        let aux = ids
            .iter()
            .flat_map(|&i| self.aux_row(i).iter().copied())
            .collect();
        Self {
            points,
            aux,
            aux_channels: self.aux_channels,
        }
    }
}

/// Proper rigid motion `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checked constructor: rotation must be orthonormal with det +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        t.check(Self::TOLERANCE)?;
        Ok(t)
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn check(&self, tol: f64) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("transform is not finite".into()));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if ortho > tol {
            return Err(Error::InvalidArgument(format!(
                "rotation not orthonormal (max |RᵀR - I| = {ortho:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Point) -> Point {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let m = self.to_matrix();
        std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
    }

    /// Reads a row-major homogeneous matrix, validating the rotation block
    /// against `tol`.
    pub fn from_rows(rows: &[[f64; 4]; 4], tol: f64) -> Result<Self> {
        let rotation = Matrix3::from_fn(|r, c| rows[r][c]);
        let translation = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        let bottom = rows[3];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidArgument(format!(
                "bottom row {bottom:?} is not [0, 0, 0, 1]"
            )));
        }
        let t = Self {
            rotation,
            translation,
        };
        t.check(tol)?;
        Ok(t)
    }
}

/// `R·p + t` for every point; auxiliary channels are carried over.
pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    let mut out = cloud.clone();
    out.points.iter_mut().for_each(|p| *p = t.apply(p));
    out
}
