use nalgebra::{Matrix3, SVD};

use super::{Point, RigidTransform};
use crate::error::{Error, Result};

/// Relative size of the second singular value below which the
/// cross-covariance is treated as rank-deficient (collinear input).
const RANK_TOLERANCE: f64 = 1e-10;

/// Least-squares rigid transform taking `src[i]` onto `dst[i]`.
///
/// The reflection case is repaired by flipping the sign of the singular
/// vector with the smallest singular value, so the result always has
/// determinant +1.
pub fn kabsch(src: &[Point], dst: &[Point]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::InvalidArgument(format!(
            "{} source points vs {} target points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::DegenerateSample("fewer than three point pairs"));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Point>() / n;
    let cd = dst.iter().sum::<Point>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = SVD::new(h, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateSample("SVD did not converge")),
    };
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let (largest, middle, smallest) = (order[0], order[1], order[2]);
    if !(sv[largest] > 0.0) || sv[middle] <= RANK_TOLERANCE * sv[largest] {
        return Err(Error::DegenerateSample("rank-deficient cross-covariance"));
    }
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(smallest, smallest)] = -1.0;
    }
    let rotation = v * d * u.transpose();
    let translation = cd - rotation * cs;
    Ok(RigidTransform {
        rotation,
        translation,
    })
}
