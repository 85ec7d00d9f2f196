//! State-update rules and the per-sequence driver.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::gates::{
    afg_img_with_delta, afg_pose_with_delta, beta_gate, fixed_alpha, fuse_max, fuse_product,
    fuse_weighted, FrameGate, GateConfig, GateVector,
};
use crate::report::fmt_f64;
use crate::state_model::{decoder_step, global_feature, pose_token, FrameTokens, Model, StateMatrix};
use crate::{Error, Result};

/// Where the frame gate of an AFG policy comes from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GateSource {
    Img,
    Pose,
    FixedAlpha(f64),
    FuseMax,
    FuseProduct,
    FuseWeighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum UpdatePolicy {
    /// Unconditional residual write.
    Cut3r,
    /// Per-token gated write.
    Ttt3r,
    /// Per-token gate scaled by a frame gate.
    Afg { source: GateSource, gate: GateConfig },
}

impl UpdatePolicy {
    pub fn afg(source: GateSource, tau: f64) -> Self {
        UpdatePolicy::Afg {
            source,
            gate: GateConfig::with_tau(tau),
        }
    }

    /// Same policy with the frame-gate threshold replaced; non-AFG policies are unchanged.
    pub fn with_tau(self, tau: f64) -> Self {
        match self {
            UpdatePolicy::Afg { source, gate } => UpdatePolicy::Afg {
                source,
                gate: GateConfig { tau, ..gate },
            },
            other => other,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let UpdatePolicy::Afg { source, gate } = self {
            gate.validate()?;
            if let GateSource::FixedAlpha(c) = source {
                fixed_alpha(*c)?;
            }
        }
        Ok(())
    }

    /// Short name used on the command line and in file names.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for UpdatePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpdatePolicy::Cut3r => f.write_str("cut3r"),
            UpdatePolicy::Ttt3r => f.write_str("ttt3r"),
            UpdatePolicy::Afg { source, .. } => match source {
                GateSource::Img => f.write_str("afg-img"),
                GateSource::Pose => f.write_str("afg-pose"),
                GateSource::FixedAlpha(c) => write!(f, "fixed:{c}"),
                GateSource::FuseMax => f.write_str("fuse-max"),
                GateSource::FuseProduct => f.write_str("fuse-prod"),
                GateSource::FuseWeighted => f.write_str("fuse-weighted"),
            },
        }
    }
}

impl FromStr for UpdatePolicy {
    type Err = Error;

    /// Parses a policy name; AFG variants get the default threshold.
    fn from_str(s: &str) -> Result<Self> {
        let tau = GateConfig::default().tau;
        let policy = match s {
            "cut3r" => UpdatePolicy::Cut3r,
            "ttt3r" => UpdatePolicy::Ttt3r,
            "afg-img" => UpdatePolicy::afg(GateSource::Img, tau),
            "afg-pose" => UpdatePolicy::afg(GateSource::Pose, tau),
            "fuse-max" => UpdatePolicy::afg(GateSource::FuseMax, tau),
            "fuse-prod" => UpdatePolicy::afg(GateSource::FuseProduct, tau),
            "fuse-weighted" => UpdatePolicy::afg(GateSource::FuseWeighted, tau),
            other => {
                let c = other
                    .strip_prefix("fixed:")
                    .and_then(|c| c.parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown policy '{other}'")))?;
                UpdatePolicy::afg(GateSource::FixedAlpha(c), tau)
            }
        };
        policy.validate()?;
        Ok(policy)
    }
}

fn check_same_shape(s: &StateMatrix, delta: &DMatrix<f64>) -> Result<()> {
    if s.as_matrix().shape() != delta.shape() {
        return Err(Error::ShapeMismatch(format!(
            "state {:?} against residual {:?}",
            s.as_matrix().shape(),
            delta.shape()
        )));
    }
    Ok(())
}

fn check_gate_len(s: &StateMatrix, beta: &GateVector) -> Result<()> {
    if beta.len() != s.n_tokens() {
        return Err(Error::ShapeMismatch(format!(
            "gate of length {} for {} state tokens",
            beta.len(),
            s.n_tokens()
        )));
    }
    Ok(())
}

/// `S + ΔS`.
pub fn step_cut3r(s: &StateMatrix, delta: &DMatrix<f64>) -> Result<StateMatrix> {
    check_same_shape(s, delta)?;
    Ok(StateMatrix::from_matrix_unchecked(s.as_matrix() + delta))
}

/// Row n of the state moves by `beta[n]` times row n of the residual.
pub fn step_ttt3r(s: &StateMatrix, delta: &DMatrix<f64>, beta: &GateVector) -> Result<StateMatrix> {
    check_same_shape(s, delta)?;
    check_gate_len(s, beta)?;
    let b = beta.as_slice();
    let mut next = s.as_matrix().clone();
    for j in 0..next.ncols() {
        for n in 0..next.nrows() {
            next[(n, j)] += b[n] * delta[(n, j)];
        }
    }
    Ok(StateMatrix::from_matrix_unchecked(next))
}

/// `S + α·(β ⊙ ΔS)`.
pub fn step_afg(s: &StateMatrix, delta: &DMatrix<f64>, beta: &GateVector, alpha: FrameGate) -> Result<StateMatrix> {
    check_same_shape(s, delta)?;
    check_gate_len(s, beta)?;
    let alpha = FrameGate::new(alpha.value())?.value();
    let b = beta.as_slice();
    let mut next = s.as_matrix().clone();
    for j in 0..next.ncols() {
        for n in 0..next.nrows() {
            next[(n, j)] += alpha * (b[n] * delta[(n, j)]);
        }
    }
    Ok(StateMatrix::from_matrix_unchecked(next))
}

/// Frobenius norm of `β ⊙ ΔS`.
fn gated_norm(delta: &DMatrix<f64>, beta: &GateVector) -> f64 {
    let b = beta.as_slice();
    delta
        .row_iter()
        .enumerate()
        .map(|(n, row)| {
            let r = row.norm() * b[n];
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

/// Per-frame gate record of one sequence run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub alpha: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub beta_mean: Vec<f64>,
    /// ‖ΔS_t‖_F of the raw residual.
    pub delta_norm: Vec<f64>,
    /// Frobenius norm of the increment actually written into the state.
    pub update_norm: Vec<f64>,
    pub readout_position: Vec<[f64; 3]>,
}

impl GateTrace {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    fn push(&mut self, alpha: f64, beta: GateVector, delta_norm: f64, update_norm: f64, readout: [f64; 3]) {
        self.alpha.push(alpha);
        self.beta_mean.push(beta.mean());
        self.beta.push(beta.into_vec());
        self.delta_norm.push(delta_norm);
        self.update_norm.push(update_norm);
        self.readout_position.push(readout);
    }

    pub const CSV_HEADER: &'static str =
        "t,alpha,beta_mean,beta_min,beta_max,delta_norm,readout_x,readout_y,readout_z,update_norm";

    /// One row per frame, floats at 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for t in 0..self.len() {
            let beta = &self.beta[t];
            let min = beta.iter().copied().fold(f64::INFINITY, f64::min);
            let max = beta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let [x, y, z] = self.readout_position[t];
            let fields = [
                self.alpha[t],
                self.beta_mean[t],
                min,
                max,
                self.delta_norm[t],
                x,
                y,
                z,
                self.update_norm[t],
            ];
            let row: Vec<String> = fields.iter().map(|v| fmt_f64(*v)).collect();
            writeln!(out, "{t},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Folds the decoder, the policy's gate and the policy's update rule over the stream.
///
/// The first frame has no predecessor; its gate is evaluated against a copy of its own
/// features, so an AFG policy starts at σ(−τ).
pub fn run_sequence(model: &Model, stream: &[FrameTokens], policy: &UpdatePolicy) -> Result<(StateMatrix, GateTrace)> {
    if stream.is_empty() {
        return Err(Error::Empty("token stream"));
    }
    policy.validate()?;
    let mut state = model.initial_state.clone();
    let mut trace = GateTrace::default();
    let mut previous: Option<(crate::state_model::GlobalFeature, crate::state_model::PoseToken)> = None;

    for tokens in stream {
        let out = decoder_step(&state, tokens, &model.params)?;
        let beta = beta_gate(&out.logits)?;
        let delta = &out.delta_state;
        let delta_norm = delta.norm();

        let (next, alpha, update_norm) = match policy {
            UpdatePolicy::Cut3r => (step_cut3r(&state, delta)?, FrameGate::ONE, delta_norm),
            UpdatePolicy::Ttt3r => (step_ttt3r(&state, delta, &beta)?, FrameGate::ONE, gated_norm(delta, &beta)),
            UpdatePolicy::Afg { source, gate } => {
                let g = global_feature(tokens)?;
                let p = pose_token(&out)?;
                let (g_prev, p_prev) = previous.as_ref().map_or((&g, &p), |(g, p)| (g, p));
                let alpha = match source {
                    GateSource::FixedAlpha(c) => fixed_alpha(*c)?,
                    GateSource::Img => afg_img_with_delta(&g, g_prev, gate)?.0,
                    GateSource::Pose => afg_pose_with_delta(&p, p_prev, gate)?.0,
                    GateSource::FuseMax | GateSource::FuseProduct | GateSource::FuseWeighted => {
                        let (a_img, w_img) = afg_img_with_delta(&g, g_prev, gate)?;
                        let (a_pose, w_pose) = afg_pose_with_delta(&p, p_prev, &gate.pose())?;
                        match source {
                            GateSource::FuseMax => fuse_max(a_img, a_pose),
                            GateSource::FuseProduct => fuse_product(a_img, a_pose),
                            // No signal on either feature: fall back to equal weights.
                            _ if w_img + w_pose == 0.0 => fuse_weighted(a_img, a_pose, 1.0, 1.0)?,
                            _ => fuse_weighted(a_img, a_pose, w_img, w_pose)?,
                        }
                    }
                };
                previous = Some((g, p));
                let next = step_afg(&state, delta, &beta, alpha)?;
                (next, alpha, alpha.value() * gated_norm(delta, &beta))
            }
        };
        if !next.as_matrix().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("updated state"));
        }
        let readout = model.readout.read(&next)?;
        trace.push(alpha.value(), beta, delta_norm, update_norm, [readout.x, readout.y, readout.z]);
        state = next;
    }
    Ok((state, trace))
}
