//! Synthetic token streams, the redundancy-injection probe and the ablation sweeps.
//!
//! Drift is measured through the model's frozen [`ReadoutHead`]: on a duplicate segment
//! nothing in the input changes, so any movement of the readout away from its value at
//! the first duplicate frame is drift introduced by the update rule.

use std::io::Write;
use std::thread;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::state_model::ReadoutHead;
use crate::gates::sigmoid;
use crate::horizon::horizon_analytic;
use crate::report::fmt_f64;
use crate::state_model::{gaussian_matrix, FrameTokens, Model, ModelConfig};
use crate::update_rules::{run_sequence, GateSource, GateTrace, UpdatePolicy};
use crate::{Error, Result};

const TOKEN_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub length: usize,
    /// Scale of the Gaussian step added to every token entry between consecutive frames.
    pub novelty: f64,
}

/// `count` exact copies of the frame preceding `position`, inserted at `position` of the
/// output stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Injection {
    pub position: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub segments: Vec<Segment>,
    pub duplicates: Vec<Injection>,
    pub rng_seed: u64,
}

impl StreamSpec {
    /// 500 novel frames followed by 100 copies of the last one.
    pub fn redundancy_default(rng_seed: u64) -> Self {
        Self {
            segments: vec![Segment {
                length: 500,
                novelty: 0.5,
            }],
            duplicates: vec![Injection {
                position: 500,
                count: 100,
            }],
            rng_seed,
        }
    }

    pub fn base_len(&self) -> usize {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn total_len(&self) -> usize {
        self.base_len() + self.duplicates.iter().map(|d| d.count).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidArgument("stream needs at least one segment".into()));
        }
        for s in &self.segments {
            if s.length == 0 || !s.novelty.is_finite() || s.novelty < 0.0 {
                return Err(Error::InvalidArgument(format!("invalid segment {s:?}")));
            }
        }
        let mut injections = self.duplicates.clone();
        injections.sort_by_key(|i| i.position);
        let mut inserted = 0;
        for (i, inj) in injections.iter().enumerate() {
            if inj.count == 0 || inj.position == 0 {
                return Err(Error::InvalidArgument(format!("invalid injection {inj:?}")));
            }
            if i > 0 && inj.position < injections[i - 1].position + injections[i - 1].count {
                return Err(Error::InvalidArgument(format!("injection {inj:?} overlaps its predecessor")));
            }
            if inj.position > self.base_len() + inserted {
                return Err(Error::InvalidArgument(format!(
                    "injection {inj:?} starts past the end of the stream"
                )));
            }
            inserted += inj.count;
        }
        Ok(())
    }

    /// Output-stream indices of every injected copy.
    pub fn duplicate_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total_len()];
        for inj in &self.duplicates {
            for slot in mask.iter_mut().skip(inj.position).take(inj.count) {
                *slot = true;
            }
        }
        mask
    }
}

/// Random-walk token stream: frame t is frame t−1 plus `novelty` times a standard Gaussian
/// block; injected copies are bit-exact.
pub fn gen_token_stream(spec: &StreamSpec, config: &ModelConfig) -> Result<Vec<FrameTokens>> {
    spec.validate()?;
    config.validate()?;
    let (k, d) = (config.n_frame_tokens, config.token_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(TOKEN_STREAM);

    let mut injections = spec.duplicates.clone();
    injections.sort_by_key(|i| i.position);
    let mut pending = injections.into_iter().peekable();

    let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(spec.total_len());
    let mut inject_due = |out: &mut Vec<DMatrix<f64>>| {
        while let Some(inj) = pending.next_if(|i| i.position == out.len()) {
            let copy = out[inj.position - 1].clone();
            out.extend(std::iter::repeat_n(copy, inj.count));
        }
    };
    for segment in &spec.segments {
        for _ in 0..segment.length {
            inject_due(&mut out);
            let next = match out.last() {
                None => gaussian_matrix(&mut rng, k, d, 1.0),
                Some(prev) => prev + gaussian_matrix(&mut rng, k, d, segment.novelty),
            };
            out.push(next);
        }
    }
    inject_due(&mut out);
    debug_assert_eq!(out.len(), spec.total_len());
    Ok(out.into_iter().map(FrameTokens::from_matrix_unchecked).collect())
}

/// Independent standard Gaussian token blocks, one per frame.
pub fn iid_token_stream(n_frames: usize, config: &ModelConfig, rng_seed: u64) -> Result<Vec<FrameTokens>> {
    config.validate()?;
    if n_frames == 0 {
        return Err(Error::InvalidArgument("stream needs at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(TOKEN_STREAM);
    Ok((0..n_frames)
        .map(|_| FrameTokens::from_matrix_unchecked(gaussian_matrix(&mut rng, config.n_frame_tokens, config.token_dim, 1.0)))
        .collect())
}

/// TTT3R traces over `n_sequences` streams; sequence i uses `spec` with seed `rng_seed + i`.
pub fn profile_traces(model: &Model, spec: &StreamSpec, n_sequences: usize) -> Result<Vec<GateTrace>> {
    if n_sequences == 0 {
        return Err(Error::InvalidArgument("profile needs at least one sequence".into()));
    }
    let streams = (0..n_sequences as u64)
        .map(|i| {
            let spec = StreamSpec {
                rng_seed: spec.rng_seed.wrapping_add(i),
                ..spec.clone()
            };
            gen_token_stream(&spec, &model.config)
        })
        .collect::<Result<Vec<_>>>()?;
    thread::scope(|scope| {
        let handles: Vec<_> = streams
            .iter()
            .map(|stream| scope.spawn(move || run_sequence(model, stream, &UpdatePolicy::Ttt3r).map(|(_, t)| t)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("profile worker panicked"))
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFrame {
    pub t: usize,
    pub alpha: f64,
    pub beta_mean: f64,
    pub delta_norm: f64,
    pub update_norm: f64,
    /// Readout displacement from the first injected frame; unset before it.
    pub drift: Option<f64>,
    /// Running RMS of the drift over the injected segment so far.
    pub cum_ate_proxy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub alpha_min_on_duplicates: f64,
    pub alpha_mean_on_duplicates: f64,
    pub alpha_mean_on_prefix: f64,
    pub beta_bar_on_duplicates: f64,
    pub beta_bar_on_prefix: f64,
    pub mean_update_norm_on_duplicates: f64,
    /// Mean TTT3R update norm over this policy's, on duplicate frames.
    pub suppression_ratio: f64,
    pub drift_at_end: f64,
    /// TTT3R drift over this policy's drift at the end of the injected segment.
    pub drift_ratio: Option<f64>,
    /// `1/(alpha_min · beta_bar)` from the duplicate-segment measurements.
    pub closure_horizon: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub policy: String,
    pub inject_start: usize,
    pub inject_end: usize,
    pub summary: ProbeSummary,
    pub frames: Vec<ProbeFrame>,
    #[serde(skip)]
    pub trace: GateTrace,
}

impl ProbeReport {
    pub const CSV_HEADER: &'static str = "frame,alpha,beta_mean,delta_norm,drift,cum_ate_proxy,update_norm";

    /// Plot-data rows; drift columns are empty before the injection.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for f in &self.frames {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                f.t,
                fmt_f64(f.alpha),
                fmt_f64(f.beta_mean),
                fmt_f64(f.delta_norm),
                opt(f.drift),
                opt(f.cum_ate_proxy),
                fmt_f64(f.update_norm)
            )?;
        }
        Ok(())
    }
}

fn mean_over(values: &[f64], mask: &[bool], wanted: bool) -> f64 {
    let (sum, n) = values
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m == wanted)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

struct ProbeRun {
    policy: UpdatePolicy,
    trace: GateTrace,
}

impl ProbeRun {
    fn drift(&self, t: usize, start: usize) -> f64 {
        let [x0, y0, z0] = self.trace.readout_position[start];
        let [x, y, z] = self.trace.readout_position[t];
        ((x - x0).powi(2) + (y - y0).powi(2) + (z - z0).powi(2)).sqrt()
    }
}

fn run_policies(model: &Model, stream: &[FrameTokens], policies: &[UpdatePolicy]) -> Result<Vec<ProbeRun>> {
    // Runs are independent; each is a sequential recurrence.
    thread::scope(|scope| {
        let handles: Vec<_> = policies
            .iter()
            .map(|p| scope.spawn(move || run_sequence(model, stream, p).map(|(_, trace)| ProbeRun { policy: *p, trace })))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("probe worker panicked"))
            .collect()
    })
}

fn build_report(run: &ProbeRun, reference: &ProbeRun, mask: &[bool], start: usize, end: usize) -> ProbeReport {
    let trace = &run.trace;
    let alpha_min = trace
        .alpha
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(a, _)| *a)
        .fold(f64::INFINITY, f64::min);
    let beta_bar = mean_over(&trace.beta_mean, mask, true);
    let mean_update = mean_over(&trace.update_norm, mask, true);
    let reference_update = mean_over(&reference.trace.update_norm, mask, true);

    let mut frames = Vec::with_capacity(trace.len());
    let mut sq_sum = 0.0;
    for t in 0..trace.len() {
        let (drift, cum) = if t >= start && t <= end {
            let d = run.drift(t, start);
            sq_sum += d * d;
            (Some(d), Some((sq_sum / (t - start + 1) as f64).sqrt()))
        } else {
            (None, None)
        };
        frames.push(ProbeFrame {
            t,
            alpha: trace.alpha[t],
            beta_mean: trace.beta_mean[t],
            delta_norm: trace.delta_norm[t],
            update_norm: trace.update_norm[t],
            drift,
            cum_ate_proxy: cum,
        });
    }
    let drift_at_end = run.drift(end, start);
    let reference_drift = reference.drift(end, start);
    ProbeReport {
        policy: run.policy.label(),
        inject_start: start,
        inject_end: end,
        summary: ProbeSummary {
            alpha_min_on_duplicates: alpha_min,
            alpha_mean_on_duplicates: mean_over(&trace.alpha, mask, true),
            alpha_mean_on_prefix: mean_over(&trace.alpha, mask, false),
            beta_bar_on_duplicates: beta_bar,
            beta_bar_on_prefix: mean_over(&trace.beta_mean, mask, false),
            mean_update_norm_on_duplicates: mean_update,
            suppression_ratio: reference_update / mean_update,
            drift_at_end,
            drift_ratio: (drift_at_end > 0.0).then(|| reference_drift / drift_at_end),
            closure_horizon: horizon_analytic(beta_bar, alpha_min).ok().map(|h| h.horizon_approx),
        },
        frames,
        trace: trace.clone(),
    }
}

/// Runs every policy on the identical stream and reports gate, update and drift behavior
/// over the first injected segment. `tau` replaces the threshold of every AFG policy.
pub fn run_redundancy_probe(
    spec: &StreamSpec,
    policies: &[UpdatePolicy],
    model: &Model,
    tau: f64,
) -> Result<Vec<ProbeReport>> {
    let first = spec
        .duplicates
        .iter()
        .min_by_key(|i| i.position)
        .copied()
        .ok_or_else(|| Error::InvalidArgument("redundancy probe needs a duplicate injection".into()))?;
    if !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("tau = {tau}")));
    }
    let stream = gen_token_stream(spec, &model.config)?;
    let mask = spec.duplicate_mask();
    let (start, end) = (first.position, first.position + first.count - 1);

    let mut all: Vec<UpdatePolicy> = policies.iter().map(|p| p.with_tau(tau)).collect();
    let reference_index = match all.iter().position(|p| *p == UpdatePolicy::Ttt3r) {
        Some(i) => i,
        None => {
            all.push(UpdatePolicy::Ttt3r);
            all.len() - 1
        }
    };
    let runs = run_policies(model, &stream, &all)?;
    let reference = &runs[reference_index];
    Ok(runs[..policies.len()]
        .iter()
        .map(|run| build_report(run, reference, &mask, start, end))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    pub alpha_min_on_duplicates: f64,
    pub alpha_mean_on_duplicates: f64,
    pub alpha_mean_on_prefix: f64,
    pub drift_at_end: f64,
    pub suppression_ratio: f64,
}

/// One probe run of `policy_base` per threshold, rows in input order.
pub fn sweep_tau(taus: &[f64], spec: &StreamSpec, policy_base: &UpdatePolicy, model: &Model) -> Result<Vec<TauRow>> {
    if let Some(bad) = taus.iter().find(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau = {bad}")));
    }
    let mut policies: Vec<UpdatePolicy> = taus.iter().map(|t| policy_base.with_tau(*t)).collect();
    policies.push(UpdatePolicy::Ttt3r);
    let stream = gen_token_stream(spec, &model.config)?;
    let first = spec
        .duplicates
        .iter()
        .min_by_key(|i| i.position)
        .copied()
        .ok_or_else(|| Error::InvalidArgument("sweep needs a duplicate injection".into()))?;
    let mask = spec.duplicate_mask();
    let (start, end) = (first.position, first.position + first.count - 1);
    let runs = run_policies(model, &stream, &policies)?;
    let reference = runs.last().expect("reference run");
    Ok(taus
        .iter()
        .zip(&runs)
        .map(|(tau, run)| {
            let s = build_report(run, reference, &mask, start, end).summary;
            TauRow {
                tau: *tau,
                alpha_min_on_duplicates: s.alpha_min_on_duplicates,
                alpha_mean_on_duplicates: s.alpha_mean_on_duplicates,
                alpha_mean_on_prefix: s.alpha_mean_on_prefix,
                drift_at_end: s.drift_at_end,
                suppression_ratio: s.suppression_ratio,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub label: String,
    /// The constant gate, unset for the adaptive row.
    pub alpha: Option<f64>,
    pub alpha_mean_on_duplicates: f64,
    pub mean_update_norm_on_duplicates: f64,
    pub drift_at_end: f64,
    pub suppression_ratio: f64,
    #[serde(skip)]
    pub trace: GateTrace,
}

/// One run per constant gate plus one adaptive (image-gate) run at `tau`.
pub fn sweep_fixed_alpha(cs: &[f64], spec: &StreamSpec, model: &Model, tau: f64) -> Result<Vec<AlphaRow>> {
    let mut policies = cs
        .iter()
        .map(|c| {
            let p = UpdatePolicy::afg(GateSource::FixedAlpha(*c), tau);
            p.validate().map(|_| p)
        })
        .collect::<Result<Vec<_>>>()?;
    policies.push(UpdatePolicy::afg(GateSource::Img, tau));
    let reports = run_redundancy_probe(spec, &policies, model, tau)?;
    Ok(reports
        .into_iter()
        .zip(cs.iter().map(|c| Some(*c)).chain([None]))
        .map(|(r, alpha)| AlphaRow {
            label: alpha.map_or_else(|| "adaptive".to_string(), |_| r.policy.clone()),
            alpha,
            alpha_mean_on_duplicates: r.summary.alpha_mean_on_duplicates,
            mean_update_norm_on_duplicates: r.summary.mean_update_norm_on_duplicates,
            drift_at_end: r.summary.drift_at_end,
            suppression_ratio: r.summary.suppression_ratio,
            trace: r.trace,
        })
        .collect())
}

/// The analytic lower bound of the image gate on exact duplicates.
pub fn duplicate_gate_floor(tau: f64) -> f64 {
    sigmoid(-tau)
}
