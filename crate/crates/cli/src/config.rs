//! Flat TOML run configuration and its resolution against flags and the environment.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use gatelab::depth::Alignment;
use gatelab::probes::{Injection, Segment, StreamSpec};
use gatelab::state_model::ModelConfig;
use gatelab::update_rules::UpdatePolicy;
use serde::{Deserialize, Serialize};

pub const OUT_ENV: &str = "GATELAB_OUT";
pub const DEFAULT_OUT: &str = "gatelab-out";
pub const DEFAULT_POLICIES: [&str; 7] = ["cut3r", "ttt3r", "afg-img", "afg-pose", "fuse-max", "fuse-prod", "fuse-weighted"];
pub const DEFAULT_TAUS: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];
pub const DEFAULT_FIXED_ALPHAS: [f64; 4] = [0.3, 0.5, 0.7, 1.0];

/// Every key is optional; unknown keys are rejected.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub out: Option<PathBuf>,
    pub n_state_tokens: Option<usize>,
    pub token_dim: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_frame_tokens: Option<usize>,
    pub segments: Option<Vec<String>>,
    pub duplicates: Option<Vec<String>>,
    pub policies: Option<Vec<String>>,
    pub taus: Option<Vec<f64>>,
    pub fixed_alphas: Option<Vec<f64>>,
    pub profile_sequences: Option<usize>,
    pub beta_bar: Option<f64>,
    pub alpha_min: Option<f64>,
    pub delta: Option<usize>,
    pub alignment: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub out: Option<PathBuf>,
    pub policies: Vec<String>,
    pub beta_bar: Option<f64>,
    pub alpha_min: Option<f64>,
    pub delta: Option<usize>,
    pub alignment: Option<String>,
}

/// Fully explicit configuration; this is what every artifact embeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub tau: f64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub stream: StreamSpec,
    pub policies: Vec<String>,
    pub taus: Vec<f64>,
    pub fixed_alphas: Vec<f64>,
    pub profile_sequences: usize,
    pub beta_bar: f64,
    pub alpha_min: f64,
    pub delta: usize,
    pub alignment: Alignment,
}

fn parse_pair<A: FromStr, B: FromStr>(text: &str, what: &str) -> Result<(A, B)> {
    let (a, b) = text
        .split_once(':')
        .with_context(|| format!("{what} '{text}' must look like a:b"))?;
    match (a.trim().parse(), b.trim().parse()) {
        (Ok(a), Ok(b)) => Ok((a, b)),
        _ => bail!("{what} '{text}' has a malformed field"),
    }
}

/// `"length:novelty"`.
pub fn parse_segment(text: &str) -> Result<Segment> {
    let (length, novelty) = parse_pair(text, "segment")?;
    Ok(Segment { length, novelty })
}

/// `"position:count"`.
pub fn parse_injection(text: &str) -> Result<Injection> {
    let (position, count) = parse_pair(text, "duplicate injection")?;
    Ok(Injection { position, count })
}

pub fn parse_alignment(text: &str) -> Result<Alignment> {
    Ok(text.parse()?)
}

impl RunConfig {
    pub fn resolve(file: FileConfig, flags: Overrides, env_out: Option<PathBuf>) -> Result<Self> {
        let seed = flags.seed.or(file.seed).unwrap_or(7);
        let defaults = ModelConfig::default();
        let model = ModelConfig {
            n_state_tokens: file.n_state_tokens.unwrap_or(defaults.n_state_tokens),
            token_dim: file.token_dim.unwrap_or(defaults.token_dim),
            n_layers: file.n_layers.unwrap_or(defaults.n_layers),
            n_heads: file.n_heads.unwrap_or(defaults.n_heads),
            n_frame_tokens: file.n_frame_tokens.unwrap_or(defaults.n_frame_tokens),
            rng_seed: seed,
        };
        model.validate()?;

        let stream_default = StreamSpec::redundancy_default(seed);
        let stream = StreamSpec {
            segments: match &file.segments {
                Some(s) => s.iter().map(|t| parse_segment(t)).collect::<Result<_>>()?,
                None => stream_default.segments,
            },
            duplicates: match &file.duplicates {
                Some(d) => d.iter().map(|t| parse_injection(t)).collect::<Result<_>>()?,
                None => stream_default.duplicates,
            },
            rng_seed: seed,
        };
        stream.validate()?;

        let policies = if !flags.policies.is_empty() {
            flags.policies
        } else {
            file.policies
                .unwrap_or_else(|| DEFAULT_POLICIES.iter().map(|p| p.to_string()).collect())
        };
        if policies.is_empty() {
            bail!("policy list is empty");
        }
        for p in &policies {
            p.parse::<UpdatePolicy>()?.validate()?;
        }

        let tau = flags.tau.or(file.tau).unwrap_or(1.0);
        if !tau.is_finite() {
            bail!("tau must be finite, got {tau}");
        }
        let alignment = match flags.alignment.or(file.alignment) {
            Some(a) => parse_alignment(&a)?,
            None => Alignment::Metric,
        };
        let delta = flags.delta.or(file.delta).unwrap_or(1);
        if delta == 0 {
            bail!("delta must be at least 1");
        }
        let profile_sequences = file.profile_sequences.unwrap_or(4);
        if profile_sequences == 0 {
            bail!("profile_sequences must be at least 1");
        }
        let out = flags
            .out
            .or(file.out)
            .or(env_out)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));

        Ok(Self {
            seed,
            tau,
            out,
            model,
            stream,
            policies,
            taus: file.taus.unwrap_or_else(|| DEFAULT_TAUS.to_vec()),
            fixed_alphas: file.fixed_alphas.unwrap_or_else(|| DEFAULT_FIXED_ALPHAS.to_vec()),
            profile_sequences,
            beta_bar: flags.beta_bar.or(file.beta_bar).unwrap_or(0.352),
            alpha_min: flags.alpha_min.or(file.alpha_min).unwrap_or(0.048),
            delta,
            alignment,
        })
    }

    pub fn parsed_policies(&self) -> Result<Vec<UpdatePolicy>> {
        self.policies.iter().map(|p| Ok(p.parse::<UpdatePolicy>()?)).collect()
    }
}
