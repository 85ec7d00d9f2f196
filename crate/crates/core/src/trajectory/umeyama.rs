use nalgebra::{Matrix3, Rotation3, Vector3};

use super::Sim3Transform;
use crate::{Error, Result};

/// Relative singular-value floor below which a point set is treated as rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

/// Least-squares similarity transform mapping `src` onto `dst`.
///
/// Rotation from the SVD of the cross-covariance with the sign of the weakest direction
/// flipped when needed so that det R = +1; scale from the trace formula.
pub fn umeyama_sim3(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Sim3Transform> {
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} source points against {} destination points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::Degenerate("at least 3 correspondences are required"));
    }
    let n = src.len() as f64;
    let mu_src = src.iter().sum::<Vector3<f64>>() / n;
    let mu_dst = dst.iter().sum::<Vector3<f64>>() / n;

    let mut var_src = 0.0;
    let mut src_cov = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_src;
        let dc = d - mu_dst;
        var_src += sc.norm_squared();
        src_cov += sc * sc.transpose();
        cross += dc * sc.transpose();
    }
    var_src /= n;
    src_cov /= n;
    cross /= n;

    let extent = mu_src.norm_squared().max(1.0);
    if var_src <= f64::EPSILON * extent {
        return Err(Error::Degenerate("source points have zero variance"));
    }
    let src_sv = src_cov.symmetric_eigenvalues();
    let mut sorted = [src_sv[0].abs(), src_sv[1].abs(), src_sv[2].abs()];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if sorted[1] <= RANK_TOLERANCE * sorted[0] {
        return Err(Error::Degenerate("source points are collinear"));
    }

    let svd = cross.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Degenerate("cross-covariance SVD did not converge")),
    };
    let d = svd.singular_values;
    let max_sv = d.max();
    if max_sv <= 0.0 || d.iter().filter(|s| **s > RANK_TOLERANCE * max_sv).count() < 2 {
        return Err(Error::Degenerate("cross-covariance is rank deficient"));
    }

    let mut sign = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        sign[d.imin()] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&sign) * v_t;
    let scale = d.dot(&sign) / var_src;
    let rotation = Rotation3::from_matrix_unchecked(rotation);
    let translation = mu_dst - rotation * mu_src * scale;
    Sim3Transform::new(scale, rotation, translation)
}
