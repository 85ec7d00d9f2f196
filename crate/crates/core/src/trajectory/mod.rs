//! Trajectory evaluation: Sim(3) alignment, ATE/RPE and the TUM/KITTI text formats.

mod formats;
mod metrics;
mod umeyama;

pub use formats::{
    parse_kitti, parse_kitti_str, parse_tum, parse_tum_str, write_kitti, write_tum, KITTI_ORTHONORMAL_TOLERANCE,
};
pub use metrics::{associate, ate, ate_rmse, rpe_rotation, AteReport, ASSOCIATION_TOLERANCE};
pub use umeyama::umeyama_sim3;

use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub timestamp: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity(timestamp: f64) -> Self {
        Self {
            timestamp,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }
}

/// Poses with strictly increasing timestamps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Result<Self> {
        if let Some(w) = poses.windows(2).find(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(Error::InvalidArgument(format!(
                "timestamps must be strictly increasing: {} then {}",
                w[0].timestamp, w[1].timestamp
            )));
        }
        if poses.iter().any(|p| !p.timestamp.is_finite() || !p.translation.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("trajectory"));
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Applies a similarity transform to every pose (positions and orientations).
    pub fn transformed(&self, g: &Sim3Transform) -> Self {
        let rot = UnitQuaternion::from_rotation_matrix(&g.rotation);
        Self {
            poses: self
                .poses
                .iter()
                .map(|p| Pose {
                    timestamp: p.timestamp,
                    rotation: rot * p.rotation,
                    translation: g.apply(&p.translation),
                })
                .collect(),
        }
    }
}

/// `x ↦ s·R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sim3Transform {
    pub scale: f64,
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: Rotation3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidArgument(format!("similarity scale {scale} must be positive")));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.apply(&p.coords))
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Sim3Transform) -> Sim3Transform {
        Sim3Transform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.apply(&other.translation),
        }
    }

    pub fn inverse(&self) -> Sim3Transform {
        let r_inv = self.rotation.inverse();
        let s_inv = 1.0 / self.scale;
        Sim3Transform {
            scale: s_inv,
            rotation: r_inv,
            translation: -(r_inv * self.translation) * s_inv,
        }
    }

    pub fn rotation_matrix(&self) -> &Matrix3<f64> {
        self.rotation.matrix()
    }
}
