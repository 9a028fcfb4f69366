//! Straight-line oracle implementations of the fusion math, written
//! independently of the tensor engine: plain nested loops over `f64`
//! buffers, no tape, no shared helpers. The library's fusion outputs must
//! match these within 1e-10, on a small fully-valid instance and on a
//! full-budget instance with padded visual rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use visfuse_core::config::{InitMode, PipelineConfig};
use visfuse_core::connectors::{compress, CompressorParams, CompressorVars};
use visfuse_core::fusion::{fuse, CrossParams, DecoderFusionParams, FusionParams, FusionVars};
use visfuse_core::params::Binder;
use visfuse_core::sequence::TokenSequence;
use visfuse_core::tensor::{Tape, Tensor};

// ── Oracle building blocks (independent of the library) ─────────────────

fn mat(m: usize, n: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; n]; m]
}

fn from_tensor(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = mat(r, c);
    for i in 0..r {
        for j in 0..c {
            out[i][j] = t.data()[i * c + j];
        }
    }
    out
}

fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = mat(m, n);
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

fn oracle_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn oracle_layernorm(row: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean: f64 = row.iter().sum::<f64>() / n;
    let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + 1e-5).sqrt();
    row.iter()
        .enumerate()
        .map(|(j, v)| gain[j] * ((v - mean) / denom) + bias[j])
        .collect()
}

/// Single-head scaled dot-product attention over the valid keys only;
/// padded key columns receive exactly zero weight.
fn oracle_attention(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    key_valid: &[bool],
) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    let mut out = mat(q.len(), v[0].len());
    for (i, qi) in q.iter().enumerate() {
        let mut weights = vec![0.0; k.len()];
        let mut denom = 0.0;
        for (j, kj) in k.iter().enumerate() {
            if !key_valid[j] {
                continue;
            }
            let score: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt();
            weights[j] = score.exp();
            denom += weights[j];
        }
        for (j, w) in weights.iter_mut().enumerate() {
            *w /= denom;
            for (c, o) in out[i].iter_mut().enumerate() {
                *o += *w * v[j][c];
            }
        }
    }
    out
}

fn oracle_cross(
    h_t: &[Vec<f64>],
    h_v: &[Vec<f64>],
    p: &CrossParams,
    key_valid: &[bool],
) -> Vec<Vec<f64>> {
    let q = mm(h_t, &from_tensor(&p.w_q));
    let k = mm(h_v, &from_tensor(&p.w_k));
    let v = mm(h_v, &from_tensor(&p.w_v));
    oracle_attention(&q, &k, &v, key_valid)
}

/// One pre-layernorm residual block over `[H_v; H_t]`, bidirectional with
/// padded visual keys masked, then the text rows.
fn oracle_decoder(
    h_t: &[Vec<f64>],
    h_v: &[Vec<f64>],
    p: &DecoderFusionParams,
    key_valid: &[bool],
) -> Vec<Vec<f64>> {
    let b = &p.block;
    let x: Vec<Vec<f64>> = h_v.iter().chain(h_t.iter()).cloned().collect();
    let mut valid: Vec<bool> = key_valid.to_vec();
    valid.extend(std::iter::repeat(true).take(h_t.len()));

    let ln1g = b.ln1_gain.data();
    let ln1b = b.ln1_bias.data();
    let normed: Vec<Vec<f64>> = x.iter().map(|r| oracle_layernorm(r, ln1g, ln1b)).collect();
    let q = mm(&normed, &from_tensor(&b.w_q));
    let k = mm(&normed, &from_tensor(&b.w_k));
    let v = mm(&normed, &from_tensor(&b.w_v));
    let ctx = oracle_attention(&q, &k, &v, &valid);
    let attn = mm(&ctx, &from_tensor(&b.w_o));
    let r1: Vec<Vec<f64>> = x
        .iter()
        .zip(&attn)
        .map(|(xr, ar)| xr.iter().zip(ar).map(|(a, c)| a + c).collect())
        .collect();

    let ln2g = b.ln2_gain.data();
    let ln2b = b.ln2_bias.data();
    let normed2: Vec<Vec<f64>> = r1.iter().map(|r| oracle_layernorm(r, ln2g, ln2b)).collect();
    let mut h = mm(&normed2, &from_tensor(&b.ff1));
    for row in h.iter_mut() {
        for (j, val) in row.iter_mut().enumerate() {
            *val = oracle_gelu(*val + b.ff_b1.data()[j]);
        }
    }
    let mut ff = mm(&h, &from_tensor(&b.ff2));
    for row in ff.iter_mut() {
        for (j, val) in row.iter_mut().enumerate() {
            *val += b.ff_b2.data()[j];
        }
    }
    let out: Vec<Vec<f64>> = r1
        .iter()
        .zip(&ff)
        .map(|(a, f)| a.iter().zip(f).map(|(x, y)| x + y).collect())
        .collect();
    out[h_v.len()..].to_vec()
}

// ── Harness ─────────────────────────────────────────────────────────────

struct Case {
    visual: Tensor,
    valid: usize,
    text: Tensor,
}

fn make_case(n_v: usize, valid: usize, n_t: usize, d: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut visual = Tensor::randn(&[n_v, d], 0.7, &mut rng);
    for r in valid..n_v {
        for c in 0..d {
            visual.data_mut()[r * d + c] = 0.0;
        }
    }
    Case {
        visual,
        valid,
        text: Tensor::randn(&[n_t, d], 0.7, &mut rng),
    }
}

/// Runs the library fusion path for `params` on a case and returns the
/// flattened output rows.
fn run_library(params: &FusionParams, case: &Case) -> Vec<f64> {
    let mut tape = Tape::new();
    let vid = tape.leaf(&case.visual);
    let tid = tape.leaf(&case.text);
    let visual = TokenSequence::new(&tape, vid, case.valid).unwrap();
    let text = TokenSequence::all_valid(&tape, tid).unwrap();
    let mut binder = Binder::new(&mut tape);
    let vars = FusionVars::bind(params, "f.", &mut binder);
    let out = fuse(&mut tape, &vars, &visual, &text, 1, true).unwrap();
    tape.data(out).to_vec()
}

fn assert_close(label: &str, got: &[f64], want: &[Vec<f64>]) {
    let cols = want[0].len();
    assert_eq!(got.len(), want.len() * cols, "{label}: shape");
    for (i, row) in want.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            let g = got[i * cols + j];
            assert!(
                (g - w).abs() <= 1e-10,
                "{label}: entry ({i},{j}) library {g} vs oracle {w}"
            );
        }
    }
}

fn check_all_variants(case: &Case, d: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cross_params = CrossParams::init(d, InitMode::Stabilized, &mut rng);
    let decoder_params = DecoderFusionParams::init(d, 3 * d, &mut rng);

    let h_t = from_tensor(&case.text);
    let h_v = from_tensor(&case.visual);
    let key_valid: Vec<bool> = (0..case.visual.shape()[0]).map(|r| r < case.valid).collect();

    let want_cross = oracle_cross(&h_t, &h_v, &cross_params, &key_valid);
    let want_decoder = oracle_decoder(&h_t, &h_v, &decoder_params, &key_valid);
    let want_combined: Vec<Vec<f64>> = want_cross
        .iter()
        .zip(&want_decoder)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();

    let got_cross = run_library(&FusionParams::Cross(cross_params.clone()), case);
    assert_close("cross", &got_cross, &want_cross);

    let got_decoder = run_library(&FusionParams::Decoder(decoder_params.clone()), case);
    assert_close("decoder", &got_decoder, &want_decoder);

    let got_combined = run_library(
        &FusionParams::Combined {
            cross: cross_params,
            decoder: decoder_params,
        },
        case,
    );
    assert_close("combined", &got_combined, &want_combined);
}

#[test]
fn small_unmasked_instance_matches_oracles() {
    let case = make_case(3, 3, 2, 8, 41);
    check_all_variants(&case, 8, 42);
}

#[test]
fn full_budget_padded_instance_matches_oracles() {
    let case = make_case(256, 200, 4, 16, 43);
    check_all_variants(&case, 16, 44);
}

#[test]
fn max_pool_matches_brute_force_window_max() {
    let cfg = PipelineConfig::default();
    let (side, d) = (16usize, cfg.d_t);
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let tokens = Tensor::randn(&[side * side, d], 1.0, &mut rng);

    let mut tape = Tape::new();
    let tid = tape.leaf(&tokens);
    let seq = TokenSequence::all_valid(&tape, tid).unwrap();
    let params = CompressorParams::init(
        visfuse_core::config::CompressorKind::MaxPool2d,
        &cfg,
        &mut rng,
    );
    let mut binder = Binder::new(&mut tape);
    let vars = CompressorVars::bind(&params, "c.", &mut binder).unwrap();
    let out = compress(&mut tape, &vars, &seq).unwrap();
    let got = tape.data(out.tokens);

    let half = side / 2;
    for bi in 0..half {
        for bj in 0..half {
            for c in 0..d {
                let mut best = f64::NEG_INFINITY;
                for di in 0..2 {
                    for dj in 0..2 {
                        let row = (2 * bi + di) * side + (2 * bj + dj);
                        best = best.max(tokens.data()[row * d + c]);
                    }
                }
                let got_v = got[(bi * half + bj) * d + c];
                assert_eq!(got_v, best, "window ({bi},{bj}) channel {c}");
            }
        }
    }
}
