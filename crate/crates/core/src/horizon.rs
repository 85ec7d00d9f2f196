//! Gate statistics and memory-horizon arithmetic.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::report::fmt_f64;
use crate::update_rules::GateTrace;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaStats {
    pub count: usize,
    pub median: f64,
    pub mean: f64,
    pub p99: f64,
    pub max: f64,
    pub min: f64,
    pub per_sequence_means: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationStats {
    /// Population std over every (frame, token) gate value.
    pub pooled_std: f64,
    /// Population std of the per-frame means.
    pub framemean_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub beta_bar: f64,
    pub alpha_min: f64,
    pub horizon_approx: f64,
    pub horizon_exact: f64,
    pub empirical_horizon: Option<usize>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Two-pass population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Index of the lower median and of the nearest-rank 99th percentile in a sorted multiset.
fn rank_indices(n: usize) -> (usize, usize) {
    let p99 = ((0.99 * n as f64).ceil() as usize).clamp(1, n) - 1;
    ((n - 1) / 2, p99)
}

/// Order statistics over an arbitrary multiset of gate values.
pub fn value_stats(values: &[f64], per_sequence_means: Vec<f64>) -> Result<BetaStats> {
    if values.is_empty() {
        return Err(Error::Empty("gate values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let (median, p99) = rank_indices(sorted.len());
    Ok(BetaStats {
        count: sorted.len(),
        median: sorted[median],
        mean: mean(values),
        p99: sorted[p99],
        max: sorted[sorted.len() - 1],
        min: sorted[0],
        per_sequence_means,
    })
}

/// Statistics of every β value pooled over all traces, frames and tokens.
pub fn pooled_beta_stats(traces: &[GateTrace]) -> Result<BetaStats> {
    let per_sequence: Vec<Vec<f64>> = traces
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| t.beta.iter().flatten().copied().collect())
        .collect();
    if per_sequence.is_empty() {
        return Err(Error::Empty("gate traces"));
    }
    let means = per_sequence.iter().map(|v| mean(v)).collect();
    let pooled: Vec<f64> = per_sequence.into_iter().flatten().collect();
    value_stats(&pooled, means)
}

pub fn frame_variation_stats(trace: &GateTrace) -> Result<VariationStats> {
    if trace.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "frame variation needs at least 2 frames, got {}",
            trace.len()
        )));
    }
    let pooled: Vec<f64> = trace.beta.iter().flatten().copied().collect();
    let frame_means: Vec<f64> = trace.beta.iter().map(|b| mean(b)).collect();
    Ok(VariationStats {
        pooled_std: population_std(&pooled),
        framemean_std: population_std(&frame_means),
    })
}

/// Analytic horizons `1/(αβ)` and `−1/ln(1−αβ)`; the empirical field is left unset.
pub fn horizon_analytic(beta_bar: f64, alpha_min: f64) -> Result<HorizonReport> {
    let rate = alpha_min * beta_bar;
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha_min * beta_bar = {rate} must lie in (0, 1)"
        )));
    }
    Ok(HorizonReport {
        beta_bar,
        alpha_min,
        horizon_approx: 1.0 / rate,
        horizon_exact: -1.0 / (-rate).ln_1p(),
        empirical_horizon: None,
    })
}

/// Analytic horizons plus the impulse-response horizon under constant gates.
pub fn horizon_report(beta_bar: f64, alpha_min: f64) -> Result<HorizonReport> {
    let mut report = horizon_analytic(beta_bar, alpha_min)?;
    let len = report.horizon_exact.ceil() as usize + 2;
    report.empirical_horizon = Some(horizon_empirical(&vec![beta_bar; len], &vec![alpha_min; len])?);
    Ok(report)
}

/// Smallest k at which a unit impulse, retained by `(1 − α_j β_j)` per step, is ≤ 1/e.
pub fn horizon_empirical(beta_seq: &[f64], alpha_seq: &[f64]) -> Result<usize> {
    if beta_seq.len() != alpha_seq.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} beta values against {} alpha values",
            beta_seq.len(),
            alpha_seq.len()
        )));
    }
    let in_unit = |v: f64| v > 0.0 && v <= 1.0;
    if let Some(bad) = beta_seq.iter().chain(alpha_seq).find(|v| !in_unit(**v)) {
        return Err(Error::GateRange(format!("{bad} is outside (0, 1]")));
    }
    let threshold = (-1.0f64).exp();
    let mut contribution = 1.0;
    for (k, (b, a)) in beta_seq.iter().zip(alpha_seq).enumerate() {
        contribution *= 1.0 - a * b;
        if contribution <= threshold {
            return Ok(k + 1);
        }
    }
    Err(Error::HorizonNotReached(beta_seq.len()))
}

/// Remaining fraction `(1 − αβ)^k` of a frame's contribution after k frames.
pub fn decay_magnitude(k: u32, beta: f64, alpha: f64) -> f64 {
    (1.0 - alpha * beta).powi(k as i32)
}

/// Uniform histogram on [0, 1]; the top edge falls into the last bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

pub const HISTOGRAM_BINS: usize = 60;

impl Histogram {
    pub fn unit_interval(values: impl IntoIterator<Item = f64>, bins: usize) -> Self {
        let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
        let mut counts = vec![0u64; bins];
        for v in values {
            if (0.0..=1.0).contains(&v) {
                let bin = ((v * bins as f64) as usize).min(bins - 1);
                counts[bin] += 1;
            }
        }
        Self { edges, counts }
    }

    pub fn of_traces(traces: &[GateTrace]) -> Self {
        Self::unit_interval(
            traces.iter().flat_map(|t| t.beta.iter().flatten().copied()),
            HISTOGRAM_BINS,
        )
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin_lo,bin_hi,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{},{},{c}", fmt_f64(self.edges[i]), fmt_f64(self.edges[i + 1]))?;
        }
        Ok(())
    }
}
