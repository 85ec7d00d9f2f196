//! Per-token and per-frame gates.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::state_model::{GlobalFeature, LogitTensor, PoseToken};
use crate::{Error, Result};

/// Exact logistic function, no clamping.
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-state-token gate, every entry strictly inside (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector(Vec<f64>);

impl GateVector {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Empty("gate vector"));
        }
        if let Some((n, b)) = beta
            .iter()
            .enumerate()
            .find(|(_, b)| !(b.is_finite() && **b > 0.0 && **b < 1.0))
        {
            return Err(Error::GateRange(format!("beta[{n}] = {b} is outside (0, 1)")));
        }
        Ok(Self(beta))
    }

    pub fn constant(value: f64, len: usize) -> Result<Self> {
        Self::new(vec![value; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Scalar frame gate in (0, 1].
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct FrameGate(f64);

impl FrameGate {
    pub const ONE: FrameGate = FrameGate(1.0);

    pub fn new(alpha: f64) -> Result<Self> {
        if alpha.is_finite() && alpha > 0.0 && alpha <= 1.0 {
            Ok(Self(alpha))
        } else {
            Err(Error::GateRange(format!("alpha = {alpha} is outside (0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Threshold subtracted from the feature-delta norm.
    pub tau: f64,
    /// Threshold for the pose gate inside fused variants; `tau` when unset.
    pub pose_tau: Option<f64>,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            pose_tau: None,
        }
    }
}

impl GateConfig {
    pub fn with_tau(tau: f64) -> Self {
        Self {
            tau,
            pose_tau: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.pose_tau.is_some_and(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite gate threshold in {self:?}")));
        }
        Ok(())
    }

    pub fn pose(&self) -> GateConfig {
        GateConfig::with_tau(self.pose_tau.unwrap_or(self.tau))
    }
}

/// Sigmoid of the per-state-token mean of the logits over layers, heads and frame tokens.
pub fn beta_gate(logits: &LogitTensor) -> Result<GateVector> {
    let [layers, heads, state_tokens, frame_tokens] = logits.shape();
    if !logits.as_slice().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("cross-attention logits"));
    }
    let count = (layers * heads * frame_tokens) as f64;
    let mut sums = vec![0.0; state_tokens];
    for l in 0..layers {
        for h in 0..heads {
            for (n, sum) in sums.iter_mut().enumerate() {
                *sum += logits.row(l, h, n).iter().sum::<f64>();
            }
        }
    }
    GateVector::new(sums.into_iter().map(|s| sigmoid(s / count)).collect())
}

fn feature_gate(current: &DVector<f64>, previous: &DVector<f64>, cfg: &GateConfig) -> Result<(FrameGate, f64)> {
    if current.len() != previous.len() {
        return Err(Error::ShapeMismatch(format!(
            "feature of length {} against predecessor of length {}",
            current.len(),
            previous.len()
        )));
    }
    cfg.validate()?;
    let delta = (current - previous).norm();
    Ok((FrameGate::new(sigmoid(delta - cfg.tau))?, delta))
}

/// Frame gate driven by the change of the global image feature.
pub fn afg_img(g: &GlobalFeature, g_prev: &GlobalFeature, cfg: &GateConfig) -> Result<FrameGate> {
    feature_gate(&g.0, &g_prev.0, cfg).map(|(a, _)| a)
}

/// Same as [`afg_img`] but also returns the feature-delta norm.
pub fn afg_img_with_delta(g: &GlobalFeature, g_prev: &GlobalFeature, cfg: &GateConfig) -> Result<(FrameGate, f64)> {
    feature_gate(&g.0, &g_prev.0, cfg)
}

/// Frame gate driven by the change of the pose token.
pub fn afg_pose(p: &PoseToken, p_prev: &PoseToken, cfg: &GateConfig) -> Result<FrameGate> {
    feature_gate(&p.0, &p_prev.0, cfg).map(|(a, _)| a)
}

pub fn afg_pose_with_delta(p: &PoseToken, p_prev: &PoseToken, cfg: &GateConfig) -> Result<(FrameGate, f64)> {
    feature_gate(&p.0, &p_prev.0, cfg)
}

pub fn fixed_alpha(c: f64) -> Result<FrameGate> {
    FrameGate::new(c)
}

/// OR-style fusion.
pub fn fuse_max(a_img: FrameGate, a_pose: FrameGate) -> FrameGate {
    FrameGate(a_img.0.max(a_pose.0))
}

/// AND-style fusion.
pub fn fuse_product(a_img: FrameGate, a_pose: FrameGate) -> FrameGate {
    FrameGate(a_img.0 * a_pose.0)
}

/// Convex combination with caller-supplied non-negative weights.
pub fn fuse_weighted(a_img: FrameGate, a_pose: FrameGate, w_img: f64, w_pose: f64) -> Result<FrameGate> {
    let valid = |w: f64| w.is_finite() && w >= 0.0;
    if !valid(w_img) || !valid(w_pose) || w_img + w_pose <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "fusion weights ({w_img}, {w_pose}) must be non-negative and not both zero"
        )));
    }
    let alpha = (w_img * a_img.0 + w_pose * a_pose.0) / (w_img + w_pose);
    // Rounding can push the convex combination a hair outside the input range.
    let (lo, hi) = (a_img.0.min(a_pose.0), a_img.0.max(a_pose.0));
    Ok(FrameGate(alpha.clamp(lo, hi)))
}
