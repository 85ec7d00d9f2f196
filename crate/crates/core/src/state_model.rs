//! Toy dual-stream cross-attention state model.
//!
//! Each layer lets the state stream attend to the frame tokens and, symmetrically, the
//! token stream attend to the state, both with residual connections. Inputs to every
//! projection are RMS-normalized per row, so attention outputs stay bounded by the value
//! rows even when the state accumulates over long streams.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const STATE_STREAM: u64 = 0;
const PARAM_STREAM: u64 = 1;
const READOUT_STREAM: u64 = 2;

const RMS_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_state_tokens: usize,
    pub token_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_frame_tokens: usize,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_state_tokens: 32,
            token_dim: 64,
            n_layers: 4,
            n_heads: 4,
            n_frame_tokens: 64,
            rng_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_state_tokens", self.n_state_tokens),
            ("token_dim", self.token_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_frame_tokens", self.n_frame_tokens),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Dimension(format!("{name} must be at least 1")));
            }
        }
        if !self.token_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Dimension(format!(
                "token_dim {} is not divisible by n_heads {}",
                self.token_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.n_heads
    }
}

fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Row-major Gaussian matrix; sampling order is part of the determinism contract.
pub(crate) fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    DMatrix::from_row_iterator(
        rows,
        cols,
        (0..rows * cols).map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        }),
    )
}

fn ensure_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// The N×d recurrent state.
#[derive(Clone, Debug, PartialEq)]
pub struct StateMatrix(DMatrix<f64>);

impl StateMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension("state matrix is empty".into()));
        }
        ensure_finite(&values, "state matrix")?;
        Ok(Self(values))
    }

    pub fn zeros(n_tokens: usize, dim: usize) -> Self {
        Self(DMatrix::zeros(n_tokens, dim))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn n_tokens(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub(crate) fn from_matrix_unchecked(values: DMatrix<f64>) -> Self {
        Self(values)
    }
}

/// The K×d token block of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTokens(DMatrix<f64>);

impl FrameTokens {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("frame token block"));
        }
        ensure_finite(&values, "frame tokens")?;
        Ok(Self(values))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n_tokens(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub(crate) fn from_matrix_unchecked(values: DMatrix<f64>) -> Self {
        Self(values)
    }
}

/// Projections for one decoder layer, all d×d and applied as `rows * W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub state_query: DMatrix<f64>,
    pub image_key: DMatrix<f64>,
    pub image_value: DMatrix<f64>,
    pub token_query: DMatrix<f64>,
    pub state_key: DMatrix<f64>,
    pub state_value: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub n_heads: usize,
    pub layers: Vec<LayerParams>,
}

impl DecoderParams {
    /// Zero-mean Gaussian weights with standard deviation 1/√d.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.token_dim;
        let std = 1.0 / (d as f64).sqrt();
        let mut rng = seeded_rng(config.rng_seed, PARAM_STREAM);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                state_query: gaussian_matrix(&mut rng, d, d, std),
                image_key: gaussian_matrix(&mut rng, d, d, std),
                image_value: gaussian_matrix(&mut rng, d, d, std),
                token_query: gaussian_matrix(&mut rng, d, d, std),
                state_key: gaussian_matrix(&mut rng, d, d, std),
                state_value: gaussian_matrix(&mut rng, d, d, std),
            })
            .collect();
        Ok(Self {
            n_heads: config.n_heads,
            layers,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.state_query.nrows())
    }

    fn validate(&self) -> Result<()> {
        let d = self.token_dim();
        if self.layers.is_empty() || d == 0 || self.n_heads == 0 || !d.is_multiple_of(self.n_heads) {
            return Err(Error::Dimension(format!(
                "decoder params: {} layers, dim {d}, {} heads",
                self.layers.len(),
                self.n_heads
            )));
        }
        for layer in &self.layers {
            for w in [
                &layer.state_query,
                &layer.image_key,
                &layer.image_value,
                &layer.token_query,
                &layer.state_key,
                &layer.state_value,
            ] {
                if w.shape() != (d, d) {
                    return Err(Error::ShapeMismatch(format!(
                        "projection is {:?}, expected ({d}, {d})",
                        w.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Pre-softmax cross-attention scores, laid out row-major as (layer, head, state token, frame token).
#[derive(Clone, Debug, PartialEq)]
pub struct LogitTensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl LogitTensor {
    pub fn zeros(layers: usize, heads: usize, state_tokens: usize, frame_tokens: usize) -> Self {
        Self {
            shape: [layers, heads, state_tokens, frame_tokens],
            data: vec![0.0; layers * heads * state_tokens * frame_tokens],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "logit shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::Empty("logit tensor"));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    fn offset(&self, layer: usize, head: usize, state: usize, frame: usize) -> usize {
        let [_, h, n, k] = self.shape;
        ((layer * h + head) * n + state) * k + frame
    }

    pub fn get(&self, layer: usize, head: usize, state: usize, frame: usize) -> f64 {
        self.data[self.offset(layer, head, state, frame)]
    }

    /// The K scores of one (layer, head, state token) triple.
    pub fn row(&self, layer: usize, head: usize, state: usize) -> &[f64] {
        let start = self.offset(layer, head, state, 0);
        &self.data[start..start + self.shape[3]]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub delta_state: DMatrix<f64>,
    pub logits: LogitTensor,
    pub final_state_preview: DMatrix<f64>,
    pub updated_tokens: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature(pub DVector<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct PoseToken(pub DVector<f64>);

pub fn init_state(config: &ModelConfig) -> Result<StateMatrix> {
    config.validate()?;
    let mut rng = seeded_rng(config.rng_seed, STATE_STREAM);
    Ok(StateMatrix(gaussian_matrix(
        &mut rng,
        config.n_state_tokens,
        config.token_dim,
        1.0,
    )))
}

pub(crate) fn rms_normalize_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    let d = m.ncols() as f64;
    for mut row in out.row_iter_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Multi-head attention of `queries` over `keys`/`values`; returns the concatenated head
/// outputs and, when `scores_out` is given, writes each head's scaled scores into it.
fn multi_head_attention(
    queries: &DMatrix<f64>,
    keys: &DMatrix<f64>,
    values: &DMatrix<f64>,
    n_heads: usize,
    mut scores_out: Option<(&mut LogitTensor, usize)>,
) -> DMatrix<f64> {
    let head_dim = queries.ncols() / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let n_queries = queries.nrows();
    let n_keys = keys.nrows();
    let mut out = DMatrix::zeros(n_queries, queries.ncols());
    let mut weights = DMatrix::<f64>::zeros(n_queries, n_keys);
    let mut row_buf = vec![0.0; n_keys];
    for head in 0..n_heads {
        let cols = head * head_dim;
        let scores =
            queries.columns(cols, head_dim) * keys.columns(cols, head_dim).transpose() * scale;
        for q in 0..n_queries {
            for (k, slot) in row_buf.iter_mut().enumerate() {
                *slot = scores[(q, k)];
            }
            if let Some((tensor, layer)) = scores_out.as_mut() {
                let start = tensor.offset(*layer, head, q, 0);
                tensor.data[start..start + n_keys].copy_from_slice(&row_buf);
            }
            softmax_in_place(&mut row_buf);
            for (k, w) in row_buf.iter().enumerate() {
                weights[(q, k)] = *w;
            }
        }
        let head_out = &weights * values.columns(cols, head_dim);
        out.columns_mut(cols, head_dim).copy_from(&head_out);
    }
    out
}

/// One frame through the L-layer decoder.
pub fn decoder_step(
    state: &StateMatrix,
    tokens: &FrameTokens,
    params: &DecoderParams,
) -> Result<DecoderOutput> {
    params.validate()?;
    let d = params.token_dim();
    if state.dim() != d || tokens.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "state dim {}, token dim {}, projection dim {d}",
            state.dim(),
            tokens.dim()
        )));
    }
    let n_layers = params.layers.len();
    let mut logits = LogitTensor::zeros(n_layers, params.n_heads, state.n_tokens(), tokens.n_tokens());
    let mut s = state.0.clone();
    let mut x = tokens.0.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let s_norm = rms_normalize_rows(&s);
        let x_norm = rms_normalize_rows(&x);

        let state_update = multi_head_attention(
            &(&s_norm * &layer.state_query),
            &(&x_norm * &layer.image_key),
            &(&x_norm * &layer.image_value),
            params.n_heads,
            Some((&mut logits, l)),
        );
        let token_update = multi_head_attention(
            &(&x_norm * &layer.token_query),
            &(&s_norm * &layer.state_key),
            &(&s_norm * &layer.state_value),
            params.n_heads,
            None,
        );
        s += state_update;
        x += token_update;
        ensure_finite(&s, "decoder state stream")?;
        ensure_finite(&x, "decoder token stream")?;
    }
    if !logits.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("cross-attention logits"));
    }
    Ok(DecoderOutput {
        delta_state: &s - &state.0,
        logits,
        final_state_preview: s,
        updated_tokens: x,
    })
}

/// Mean of the frame's token rows.
pub fn global_feature(tokens: &FrameTokens) -> Result<GlobalFeature> {
    let m = tokens.as_matrix();
    if m.nrows() == 0 {
        return Err(Error::Empty("frame token block"));
    }
    let mut sum = DVector::zeros(m.ncols());
    for row in m.row_iter() {
        sum += row.transpose();
    }
    Ok(GlobalFeature(sum / m.nrows() as f64))
}

/// First row of the final decoder-layer state.
pub fn pose_token(output: &DecoderOutput) -> Result<PoseToken> {
    let s = &output.final_state_preview;
    if s.nrows() == 0 {
        return Err(Error::Empty("decoder output state"));
    }
    Ok(PoseToken(s.row(0).transpose()))
}

/// Frozen random linear map from the flattened state to a 3-vector pseudo-position.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutHead {
    weights: DMatrix<f64>,
}

impl ReadoutHead {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let width = config.n_state_tokens * config.token_dim;
        let mut rng = seeded_rng(config.rng_seed, READOUT_STREAM);
        Ok(Self {
            weights: gaussian_matrix(&mut rng, 3, width, 1.0 / (width as f64).sqrt()),
        })
    }

    pub fn read(&self, state: &StateMatrix) -> Result<Vector3<f64>> {
        let m = state.as_matrix();
        if m.len() != self.weights.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "readout expects {} state entries, got {}",
                self.weights.ncols(),
                m.len()
            )));
        }
        let mut out = Vector3::zeros();
        for (axis, w_row) in self.weights.row_iter().enumerate() {
            let mut acc = 0.0;
            for (i, row) in m.row_iter().enumerate() {
                let base = i * m.ncols();
                for (j, v) in row.iter().enumerate() {
                    acc += w_row[base + j] * v;
                }
            }
            out[axis] = acc;
        }
        Ok(out)
    }
}

/// Everything a sequence run needs besides the stream: config, decoder weights, the
/// initial state and the readout head, all derived from `config.rng_seed`.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: DecoderParams,
    pub initial_state: StateMatrix,
    pub readout: ReadoutHead,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Ok(Self {
            params: DecoderParams::new(&config)?,
            initial_state: init_state(&config)?,
            readout: ReadoutHead::new(&config)?,
            config,
        })
    }
}
