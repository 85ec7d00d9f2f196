use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{umeyama_sim3, Sim3Transform, Trajectory};
use crate::{Error, Result};

/// Maximum timestamp gap (seconds) for two poses to be associated.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

/// Index pairs (est, gt) of nearest-timestamp matches within `tolerance`, one-to-one and
/// ordered by estimate time.
pub fn associate(est: &Trajectory, gt: &Trajectory, tolerance: f64) -> Vec<(usize, usize)> {
    let gt_times: Vec<f64> = gt.poses().iter().map(|p| p.timestamp).collect();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, pose) in est.poses().iter().enumerate() {
        let t = pose.timestamp;
        let idx = gt_times.partition_point(|g| *g < t);
        let nearest = [idx.checked_sub(1), Some(idx)]
            .into_iter()
            .flatten()
            .filter(|j| *j < gt_times.len())
            .min_by(|a, b| (gt_times[*a] - t).abs().total_cmp(&(gt_times[*b] - t).abs()));
        if let Some(j) = nearest {
            let gap = (gt_times[j] - t).abs();
            if gap <= tolerance {
                candidates.push((gap, i, j));
            }
        }
    }
    // Closest pairs claim their ground-truth pose first.
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut gt_used = vec![false; gt_times.len()];
    let mut pairs: Vec<(usize, usize)> = candidates
        .into_iter()
        .filter(|(_, _, j)| !std::mem::replace(&mut gt_used[*j], true))
        .map(|(_, i, j)| (i, j))
        .collect();
    pairs.sort_unstable();
    pairs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub rmse: f64,
    pub matches: usize,
    pub alignment: Sim3Transform,
}

/// Sim(3)-aligned absolute trajectory error over timestamp-associated positions.
pub fn ate(est: &Trajectory, gt: &Trajectory) -> Result<AteReport> {
    let pairs = associate(est, gt, ASSOCIATION_TOLERANCE);
    if pairs.len() < 3 {
        return Err(Error::Association(format!(
            "{} matched poses, at least 3 are required",
            pairs.len()
        )));
    }
    let src: Vec<Vector3<f64>> = pairs.iter().map(|(i, _)| est.poses()[*i].translation).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|(_, j)| gt.poses()[*j].translation).collect();
    let alignment = umeyama_sim3(&src, &dst)?;
    let sq: f64 = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (alignment.apply(s) - d).norm_squared())
        .sum();
    Ok(AteReport {
        rmse: (sq / src.len() as f64).sqrt(),
        matches: src.len(),
        alignment,
    })
}

pub fn ate_rmse(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    ate(est, gt).map(|r| r.rmse)
}

fn geodesic_degrees(q: &UnitQuaternion<f64>) -> f64 {
    let r = q.to_rotation_matrix();
    let cos = ((r.matrix().trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

/// RMSE (degrees) of the rotation part of the relative pose error at lag `delta`.
pub fn rpe_rotation(est: &Trajectory, gt: &Trajectory, delta: usize) -> Result<f64> {
    if delta == 0 {
        return Err(Error::InvalidArgument("RPE lag must be at least 1".into()));
    }
    let pairs = associate(est, gt, ASSOCIATION_TOLERANCE);
    if pairs.len() < delta + 1 {
        return Err(Error::Association(format!(
            "{} matched poses, lag {delta} needs at least {}",
            pairs.len(),
            delta + 1
        )));
    }
    let n = pairs.len() - delta;
    let mut sq = 0.0;
    for w in 0..n {
        let (ei, gi) = pairs[w];
        let (ej, gj) = pairs[w + delta];
        let rel_gt = gt.poses()[gi].rotation.inverse() * gt.poses()[gj].rotation;
        let rel_est = est.poses()[ei].rotation.inverse() * est.poses()[ej].rotation;
        let angle = geodesic_degrees(&(rel_gt.inverse() * rel_est));
        sq += angle * angle;
    }
    Ok((sq / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::super::Pose;
    use super::*;
    use nalgebra::{Quaternion, Rotation3};
    use planar::Complex;

    /// Minimal complex arithmetic for the planar similarity oracle.
    mod planar {
        #[derive(Clone, Copy, Debug)]
        pub struct Complex {
            pub re: f64,
            pub im: f64,
        }
        impl Complex {
            pub fn new(re: f64, im: f64) -> Self {
                Self { re, im }
            }
            pub fn mul(self, o: Self) -> Self {
                Self::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
            }
            pub fn conj(self) -> Self {
                Self::new(self.re, -self.im)
            }
            pub fn add(self, o: Self) -> Self {
                Self::new(self.re + o.re, self.im + o.im)
            }
            pub fn sub(self, o: Self) -> Self {
                Self::new(self.re - o.re, self.im - o.im)
            }
            pub fn scale(self, s: f64) -> Self {
                Self::new(self.re * s, self.im * s)
            }
            pub fn norm_sqr(self) -> f64 {
                self.re * self.re + self.im * self.im
            }
        }
    }

    fn traj(points: &[(f64, f64, f64)]) -> Trajectory {
        Trajectory::new(
            points
                .iter()
                .enumerate()
                .map(|(i, (x, y, z))| Pose {
                    timestamp: i as f64 * 0.1,
                    rotation: UnitQuaternion::identity(),
                    translation: Vector3::new(*x, *y, *z),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_trajectories_have_zero_ate() {
        let gt = traj(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.2), (1.0, 1.0, 0.0), (0.0, 1.0, -0.3)]);
        assert!(ate_rmse(&gt, &gt).unwrap() < 1e-12);
    }

    #[test]
    fn similarity_copy_has_zero_ate() {
        let gt = traj(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.2), (1.0, 1.0, 0.0), (0.0, 1.0, -0.3), (0.5, 0.5, 1.0)]);
        let g = Sim3Transform::new(
            0.7,
            Rotation3::from_euler_angles(0.3, 0.2, -1.0),
            Vector3::new(4.0, -1.0, 2.0),
        )
        .unwrap();
        assert!(ate_rmse(&gt.transformed(&g), &gt).unwrap() < 1e-9);
    }

    #[test]
    fn displaced_square_matches_planar_oracle() {
        let square = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.0, 0.5)];
        let gt = traj(&square.iter().map(|(x, y)| (*x, *y, 0.0)).collect::<Vec<_>>());
        let mut moved = square;
        moved[2].0 += 0.2;
        let est = traj(&moved.iter().map(|(x, y)| (*x, *y, 0.0)).collect::<Vec<_>>());
        let got = ate_rmse(&est, &gt).unwrap();

        // Planar similarity fit in closed form: w ≈ a·z + b with complex a, b.
        let z: Vec<Complex> = moved.iter().map(|(x, y)| Complex::new(*x, *y)).collect();
        let w: Vec<Complex> = square.iter().map(|(x, y)| Complex::new(*x, *y)).collect();
        let n = z.len() as f64;
        let zm = z.iter().fold(Complex::new(0.0, 0.0), |a, b| a.add(*b)).scale(1.0 / n);
        let wm = w.iter().fold(Complex::new(0.0, 0.0), |a, b| a.add(*b)).scale(1.0 / n);
        let mut num = Complex::new(0.0, 0.0);
        let mut den = 0.0;
        for (zi, wi) in z.iter().zip(&w) {
            num = num.add(wi.sub(wm).mul(zi.sub(zm).conj()));
            den += zi.sub(zm).norm_sqr();
        }
        let a = num.scale(1.0 / den);
        let b = wm.sub(a.mul(zm));
        let mut sq = 0.0;
        for (zi, wi) in z.iter().zip(&w) {
            sq += a.mul(*zi).add(b).sub(*wi).norm_sqr();
        }
        let oracle = (sq / n).sqrt();
        assert!(oracle > 0.01);
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
    }

    #[test]
    fn association_tolerance() {
        let gt = traj(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (1.0, 1.0, 0.0)]);
        let shifted = Trajectory::new(
            gt.poses()
                .iter()
                .enumerate()
                .map(|(i, p)| Pose {
                    timestamp: p.timestamp + if i == 1 { 0.05 } else { 0.01 },
                    ..*p
                })
                .collect(),
        )
        .unwrap();
        assert_eq!(associate(&shifted, &gt, ASSOCIATION_TOLERANCE), vec![(0, 0), (2, 2)]);
        assert!(matches!(ate(&shifted, &gt), Err(Error::Association(_))));
    }

    fn yaw_traj(yaws: &[f64]) -> Trajectory {
        Trajectory::new(
            yaws.iter()
                .enumerate()
                .map(|(i, y)| Pose {
                    timestamp: i as f64,
                    rotation: UnitQuaternion::from_euler_angles(0.1 * i as f64, 0.0, *y),
                    translation: Vector3::new(i as f64, 0.0, 0.0),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn rpe_zero_and_double_cover() {
        // arccos near 1 cannot resolve angles below √(2ε) rad ≈ 1e-6°.
        let gt = yaw_traj(&[0.0, 0.3, 0.5, 1.1, 1.2]);
        assert!(rpe_rotation(&gt, &gt, 1).unwrap() < 1e-5);
        let negated = Trajectory::new(
            gt.poses()
                .iter()
                .map(|p| Pose {
                    rotation: UnitQuaternion::new_unchecked(-p.rotation.into_inner()),
                    ..*p
                })
                .collect(),
        )
        .unwrap();
        assert!(rpe_rotation(&negated, &gt, 2).unwrap() < 1e-5);
        assert!(rpe_rotation(&gt, &gt, 5).is_err());
        assert!(rpe_rotation(&gt, &gt, 0).is_err());
    }

    #[test]
    fn rpe_constant_extra_yaw() {
        // Each estimated step carries an extra 5° about the local z axis.
        let n = 8;
        let mut gt_poses = Vec::new();
        let mut est_poses = Vec::new();
        let mut q_gt = UnitQuaternion::identity();
        let mut q_est = UnitQuaternion::identity();
        let extra = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 5f64.to_radians());
        for i in 0..n {
            gt_poses.push(Pose { timestamp: i as f64, rotation: q_gt, translation: Vector3::zeros() });
            est_poses.push(Pose { timestamp: i as f64, rotation: q_est, translation: Vector3::zeros() });
            let step = UnitQuaternion::from_quaternion(Quaternion::new(0.9, 0.1 * i as f64, -0.2, 0.3));
            q_gt *= step;
            q_est = q_est * step * extra;
        }
        let gt = Trajectory::new(gt_poses).unwrap();
        let est = Trajectory::new(est_poses).unwrap();
        // Relative error at lag 1 is R_step^{-1} R_step E = E, whose angle is exactly 5°.
        // Compare with the same quantity at the rotation level to keep this independent.
        let rpe = rpe_rotation(&est, &gt, 1).unwrap();
        assert!((rpe - 5.0).abs() < 1e-6, "{rpe}");
    }

    #[test]
    fn rpe_invariant_under_global_motion() {
        let gt = yaw_traj(&[0.0, 0.3, 0.5, 1.1, 1.2, 0.4]);
        let est = yaw_traj(&[0.05, 0.2, 0.6, 1.0, 1.3, 0.35]);
        let base = rpe_rotation(&est, &gt, 1).unwrap();
        let g = Sim3Transform::new(1.0, Rotation3::from_euler_angles(1.0, -0.5, 2.0), Vector3::new(3.0, 2.0, 1.0)).unwrap();
        assert!((rpe_rotation(&est.transformed(&g), &gt, 1).unwrap() - base).abs() < 1e-9);
        assert!((rpe_rotation(&est, &gt.transformed(&g), 1).unwrap() - base).abs() < 1e-9);
    }
}
