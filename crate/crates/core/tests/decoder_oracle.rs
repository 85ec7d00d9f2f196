//! The decoder against a scalar re-derivation written with nested loops over `Vec`s.

use gatelab::state_model::{decoder_step, DecoderParams, FrameTokens, LayerParams, ModelConfig, StateMatrix};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Grid = Vec<Vec<f64>>;

fn grid(m: &DMatrix<f64>) -> Grid {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn rms_rows(a: &Grid) -> Grid {
    a.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            row.iter().map(|v| v / (ms + 1e-12).sqrt()).collect()
        })
        .collect()
}

fn project(a: &Grid, w: &Grid) -> Grid {
    a.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| (0..row.len()).map(|i| row[i] * w[i][j]).sum())
                .collect()
        })
        .collect()
}

/// Returns the attention output and the scaled scores indexed [head][query][key].
fn attend(q: &Grid, k: &Grid, v: &Grid, heads: usize) -> (Grid, Vec<Grid>) {
    let d = q[0].len();
    let hd = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    let mut all_scores = Vec::new();
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let mut scores = vec![vec![0.0; k.len()]; q.len()];
        for (qi, qrow) in q.iter().enumerate() {
            for (ki, krow) in k.iter().enumerate() {
                let dot: f64 = cols.clone().map(|c| qrow[c] * krow[c]).sum();
                scores[qi][ki] = dot / (hd as f64).sqrt();
            }
            let max = scores[qi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores[qi].iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for c in cols.clone() {
                out[qi][c] = (0..k.len()).map(|ki| exps[ki] / total * v[ki][c]).sum();
            }
        }
        all_scores.push(scores);
    }
    (out, all_scores)
}

struct Oracle {
    delta: Grid,
    logits: Vec<Vec<Grid>>,
    state: Grid,
    tokens: Grid,
}

fn oracle(state: &Grid, tokens: &Grid, params: &DecoderParams) -> Oracle {
    let mut s = state.clone();
    let mut x = tokens.clone();
    let mut logits = Vec::new();
    for layer in &params.layers {
        let (sn, xn) = (rms_rows(&s), rms_rows(&x));
        let (s_up, scores) = attend(
            &project(&sn, &grid(&layer.state_query)),
            &project(&xn, &grid(&layer.image_key)),
            &project(&xn, &grid(&layer.image_value)),
            params.n_heads,
        );
        let (x_up, _) = attend(
            &project(&xn, &grid(&layer.token_query)),
            &project(&sn, &grid(&layer.state_key)),
            &project(&sn, &grid(&layer.state_value)),
            params.n_heads,
        );
        for (i, row) in s_up.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                s[i][j] += v;
            }
        }
        for (i, row) in x_up.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                x[i][j] += v;
            }
        }
        logits.push(scores);
    }
    let delta = s
        .iter()
        .zip(state)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p - q).collect())
        .collect();
    Oracle {
        delta,
        logits,
        state: s,
        tokens: x,
    }
}

fn max_diff(a: &DMatrix<f64>, b: &Grid) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in b.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((a[(i, j)] - v).abs());
        }
    }
    worst
}

fn check(state: DMatrix<f64>, tokens: DMatrix<f64>, params: &DecoderParams) {
    let expect = oracle(&grid(&state), &grid(&tokens), params);
    let out = decoder_step(
        &StateMatrix::new(state).unwrap(),
        &FrameTokens::new(tokens).unwrap(),
        params,
    )
    .unwrap();
    assert!(max_diff(&out.delta_state, &expect.delta) < 1e-12);
    assert!(max_diff(&out.final_state_preview, &expect.state) < 1e-12);
    assert!(max_diff(&out.updated_tokens, &expect.tokens) < 1e-12);
    let [l_n, h_n, n_n, k_n] = out.logits.shape();
    for l in 0..l_n {
        for h in 0..h_n {
            for n in 0..n_n {
                for k in 0..k_n {
                    assert!((out.logits.get(l, h, n, k) - expect.logits[l][h][n][k]).abs() < 1e-12);
                }
            }
        }
    }
}

fn m2(a: f64, b: f64, c: f64, d: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[a, b, c, d])
}

#[test]
fn two_by_two_single_head() {
    let params = DecoderParams {
        n_heads: 1,
        layers: vec![LayerParams {
            state_query: m2(1.0, 0.5, -0.25, 0.75),
            image_key: m2(0.5, -1.0, 0.25, 0.5),
            image_value: m2(1.0, 0.0, 0.5, -0.5),
            token_query: m2(-0.5, 0.25, 1.0, 0.5),
            state_key: m2(0.75, 0.5, -0.5, 1.0),
            state_value: m2(0.25, 1.0, 0.5, -0.75),
        }],
    };
    check(m2(1.0, -2.0, 0.5, 3.0), m2(2.0, 1.0, -1.0, 0.5), &params);
}

#[test]
fn two_by_two_hand_values() {
    // Identity projections and orthogonal unit rows give scores ±1/√2 by hand.
    let eye = DMatrix::identity(2, 2);
    let params = DecoderParams {
        n_heads: 1,
        layers: vec![LayerParams {
            state_query: eye.clone(),
            image_key: eye.clone(),
            image_value: eye.clone(),
            token_query: eye.clone(),
            state_key: eye.clone(),
            state_value: eye,
        }],
    };
    let state = m2(1.0, 1.0, 1.0, -1.0);
    let tokens = m2(1.0, 1.0, 1.0, -1.0);
    let out = decoder_step(
        &StateMatrix::new(state.clone()).unwrap(),
        &FrameTokens::new(tokens.clone()).unwrap(),
        &params,
    )
    .unwrap();
    let r = 1.0 / (1.0 + 1e-12f64).sqrt();
    let s = 2.0 * r * r / 2f64.sqrt();
    assert!((out.logits.get(0, 0, 0, 0) - s).abs() < 1e-12);
    assert!(out.logits.get(0, 0, 0, 1).abs() < 1e-12);
    assert!((out.logits.get(0, 0, 1, 1) - s).abs() < 1e-12);
    check(state, tokens, &params);
}

#[test]
fn random_multi_layer_multi_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (n, d, l, h, k) in [(3, 4, 2, 2, 5), (5, 6, 3, 3, 2), (1, 8, 1, 4, 7)] {
        let cfg = ModelConfig {
            n_state_tokens: n,
            token_dim: d,
            n_layers: l,
            n_heads: h,
            n_frame_tokens: k,
            rng_seed: rng.random(),
        };
        let params = DecoderParams::new(&cfg).unwrap();
        let state = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let tokens = DMatrix::from_fn(k, d, |_, _| rng.random_range(-2.0..2.0));
        check(state, tokens, &params);
    }
}
