//! Visual-to-text connectors: the two-layer MLP projector and the three
//! token compressors (conv, max-pool, token-mixing MLP) that shrink the
//! padded visual sequence to the compressed token count.

use crate::config::{CompressorKind, InitMode, PipelineConfig};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamGroup};
use crate::sequence::TokenSequence;
use crate::tensor::{Tape, Tensor, ValId};
use rand::Rng;

fn weight_sigma(mode: InitMode, fan_in: usize) -> f64 {
    match mode {
        InitMode::Stabilized => 1.0 / (fan_in as f64).sqrt(),
        InitMode::Faithful => 1.0,
    }
}

// ── Projector ───────────────────────────────────────────────────────────

/// Two-layer MLP mapping encoder width to decoder width, applied per token:
/// `gelu(x . linear1 + bias1) . linear2 + bias2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub linear1: Tensor,
    pub bias1: Tensor,
    pub linear2: Tensor,
    pub bias2: Tensor,
}

impl ProjectorParams {
    pub fn init<R: Rng>(d_v: usize, d_t: usize, mode: InitMode, rng: &mut R) -> Self {
        ProjectorParams {
            linear1: Tensor::randn(&[d_v, d_t], weight_sigma(mode, d_v), rng),
            bias1: Tensor::zeros(&[d_t]),
            linear2: Tensor::randn(&[d_t, d_t], weight_sigma(mode, d_t), rng),
            bias2: Tensor::zeros(&[d_t]),
        }
    }
}

impl ParamGroup for ProjectorParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}linear1"), &self.linear1);
        f(format!("{prefix}bias1"), &self.bias1);
        f(format!("{prefix}linear2"), &self.linear2);
        f(format!("{prefix}bias2"), &self.bias2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}linear1"), &mut self.linear1);
        f(format!("{prefix}bias1"), &mut self.bias1);
        f(format!("{prefix}linear2"), &mut self.linear2);
        f(format!("{prefix}bias2"), &mut self.bias2);
    }
}

pub struct ProjectorVars {
    pub linear1: ValId,
    pub bias1: ValId,
    pub linear2: ValId,
    pub bias2: ValId,
}

impl ProjectorVars {
    pub fn bind(params: &ProjectorParams, prefix: &str, binder: &mut Binder) -> ProjectorVars {
        ProjectorVars {
            linear1: binder.bind(format!("{prefix}linear1"), &params.linear1),
            bias1: binder.bind(format!("{prefix}bias1"), &params.bias1),
            linear2: binder.bind(format!("{prefix}linear2"), &params.linear2),
            bias2: binder.bind(format!("{prefix}bias2"), &params.bias2),
        }
    }
}

/// Projects every token; the mask passes through and padded rows are
/// re-zeroed afterward (the biases would otherwise leak into them).
pub fn project(tape: &mut Tape, vars: &ProjectorVars, hv: &TokenSequence) -> Result<TokenSequence> {
    let h1 = tape.matmul(hv.tokens, vars.linear1)?;
    let h1b = tape.add_bias(h1, vars.bias1)?;
    let act = tape.gelu(h1b);
    let h2 = tape.matmul(act, vars.linear2)?;
    let h2b = tape.add_bias(h2, vars.bias2)?;
    let mask_id = tape.constant(&[hv.len], hv.mask.clone())?;
    let zeroed = tape.scale_rows(h2b, mask_id)?;
    TokenSequence::new(tape, zeroed, hv.valid_count)
}

// ── Compressors ─────────────────────────────────────────────────────────

/// Token compressor weights. All three reduce the padded visual sequence by
/// 4x in token count; padded rows are consumed as ordinary zero tokens and
/// every output token is valid.
#[derive(Debug, Clone, PartialEq)]
pub enum CompressorParams {
    /// 2x2 stride-2 convolution over the square token grid. The kernel is
    /// stored `[2, 2, d_in, d_out]` and applied as a `[4 * d_in, d_out]`
    /// matrix over gathered token windows.
    Conv2d { kernel: Tensor, bias: Tensor },
    /// Channelwise 2x2 stride-2 max over the token grid; no parameters.
    MaxPool2d,
    /// Token-mixing matrix `[n_compressed, budget]` applied across the token
    /// axis, identically per channel, plus a per-output-token bias.
    Mlp { mix: Tensor, bias: Tensor },
}

impl CompressorParams {
    pub fn init<R: Rng>(kind: CompressorKind, cfg: &PipelineConfig, rng: &mut R) -> Self {
        match kind {
            CompressorKind::Conv2d => CompressorParams::Conv2d {
                kernel: Tensor::randn(
                    &[2, 2, cfg.d_t, cfg.d_t],
                    weight_sigma(cfg.init, 4 * cfg.d_t),
                    rng,
                ),
                bias: Tensor::zeros(&[cfg.d_t]),
            },
            CompressorKind::MaxPool2d => CompressorParams::MaxPool2d,
            CompressorKind::Mlp => CompressorParams::Mlp {
                mix: Tensor::randn(
                    &[cfg.n_compressed, cfg.patch_budget],
                    weight_sigma(cfg.init, cfg.patch_budget),
                    rng,
                ),
                bias: Tensor::zeros(&[cfg.n_compressed]),
            },
        }
    }

    pub fn kind(&self) -> CompressorKind {
        match self {
            CompressorParams::Conv2d { .. } => CompressorKind::Conv2d,
            CompressorParams::MaxPool2d => CompressorKind::MaxPool2d,
            CompressorParams::Mlp { .. } => CompressorKind::Mlp,
        }
    }
}

impl ParamGroup for CompressorParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        match self {
            CompressorParams::Conv2d { kernel, bias } => {
                f(format!("{prefix}kernel"), kernel);
                f(format!("{prefix}bias"), bias);
            }
            CompressorParams::MaxPool2d => {}
            CompressorParams::Mlp { mix, bias } => {
                f(format!("{prefix}mix"), mix);
                f(format!("{prefix}bias"), bias);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            CompressorParams::Conv2d { kernel, bias } => {
                f(format!("{prefix}kernel"), kernel);
                f(format!("{prefix}bias"), bias);
            }
            CompressorParams::MaxPool2d => {}
            CompressorParams::Mlp { mix, bias } => {
                f(format!("{prefix}mix"), mix);
                f(format!("{prefix}bias"), bias);
            }
        }
    }
}

pub enum CompressorVars {
    Conv2d { kernel_mat: ValId, bias: ValId },
    MaxPool2d,
    Mlp { mix: ValId, bias: ValId },
}

impl CompressorVars {
    pub fn bind(params: &CompressorParams, prefix: &str, binder: &mut Binder) -> Result<CompressorVars> {
        Ok(match params {
            CompressorParams::Conv2d { kernel, bias } => {
                let d_in = kernel.shape()[2];
                let d_out = kernel.shape()[3];
                let k4 = binder.bind(format!("{prefix}kernel"), kernel);
                // [2, 2, d_in, d_out] flattens row-major to exactly the
                // window-matmul layout [4 * d_in, d_out].
                let kernel_mat = binder.tape.reshape(k4, &[4 * d_in, d_out])?;
                CompressorVars::Conv2d {
                    kernel_mat,
                    bias: binder.bind(format!("{prefix}bias"), bias),
                }
            }
            CompressorParams::MaxPool2d => CompressorVars::MaxPool2d,
            CompressorParams::Mlp { mix, bias } => CompressorVars::Mlp {
                mix: binder.bind(format!("{prefix}mix"), mix),
                bias: binder.bind(format!("{prefix}bias"), bias),
            },
        })
    }
}

/// Square grid side for a padded sequence length, required by the 2-D
/// compressors.
fn grid_side_of(len: usize) -> Result<usize> {
    let side = (len as f64).sqrt().round() as usize;
    if side * side != len || side % 2 != 0 {
        return Err(Error::Contract(format!(
            "2-D compression needs an even square token grid, got length {len}"
        )));
    }
    Ok(side)
}

/// Compresses the full padded sequence to a fully-valid shorter one.
///
/// The input must span the whole padded budget; padded rows (exact zeros)
/// are compressed as ordinary tokens. Grid-based variants read the sequence
/// as a row-major square grid.
pub fn compress(tape: &mut Tape, vars: &CompressorVars, hv2t: &TokenSequence) -> Result<TokenSequence> {
    if !matches!(vars, CompressorVars::Mlp { .. }) {
        grid_side_of(hv2t.len)?;
    }
    let out = match vars {
        CompressorVars::Conv2d { kernel_mat, bias } => {
            let side = grid_side_of(hv2t.len)?;
            let half = side / 2;
            let mut idx = Vec::with_capacity(hv2t.len);
            for bi in 0..half {
                for bj in 0..half {
                    idx.extend_from_slice(&[
                        (2 * bi) * side + 2 * bj,
                        (2 * bi) * side + 2 * bj + 1,
                        (2 * bi + 1) * side + 2 * bj,
                        (2 * bi + 1) * side + 2 * bj + 1,
                    ]);
                }
            }
            let windows = tape.gather_rows(hv2t.tokens, &idx)?;
            let stacked = tape.reshape(windows, &[half * half, 4 * hv2t.dim])?;
            let mixed = tape.matmul(stacked, *kernel_mat)?;
            tape.add_bias(mixed, *bias)?
        }
        CompressorVars::MaxPool2d => {
            let side = grid_side_of(hv2t.len)?;
            tape.max_pool_grid(hv2t.tokens, side, side)?
        }
        CompressorVars::Mlp { mix, bias } => {
            let n_in = tape.shape(*mix)[1];
            if n_in != hv2t.len {
                return Err(Error::ShapeMismatch {
                    op: "compress",
                    left: vec![hv2t.len, hv2t.dim],
                    right: tape.shape(*mix).to_vec(),
                });
            }
            let mixed = tape.matmul(*mix, hv2t.tokens)?;
            tape.add_per_row(mixed, *bias)?
        }
    };
    TokenSequence::all_valid(tape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn full_seq(tape: &mut Tape, t: &Tensor) -> TokenSequence {
        let id = tape.leaf(t);
        TokenSequence::all_valid(tape, id).unwrap()
    }

    #[test]
    fn projector_keeps_padded_rows_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let params = ProjectorParams::init(8, 12, InitMode::Stabilized, &mut rng);
        let mut tape = Tape::new();
        let tokens = tape.leaf(&Tensor::randn(&[6, 8], 1.0, &mut rng));
        let seq = TokenSequence::new(&tape, tokens, 4).unwrap();
        let mut binder = Binder::new(&mut tape);
        let vars = ProjectorVars::bind(&params, "proj.", &mut binder);
        let out = project(&mut tape, &vars, &seq).unwrap();
        assert_eq!(tape.shape(out.tokens), &[6, 12]);
        assert_eq!(out.valid_count, 4);
        for row in 4..6 {
            assert!(tape.data(out.tokens)[row * 12..(row + 1) * 12]
                .iter()
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn conv_delta_kernel_subsamples_top_left() {
        // kernel[0, 0, c, c] = 1 makes each output token a copy of the
        // top-left token of its 2x2 window.
        let d = 3;
        let side = 4;
        let mut kernel = Tensor::zeros(&[2, 2, d, d]);
        for c in 0..d {
            kernel.data_mut()[c * d + c] = 1.0;
        }
        let params = CompressorParams::Conv2d {
            kernel,
            bias: Tensor::zeros(&[d]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let input = Tensor::randn(&[side * side, d], 1.0, &mut rng);

        let mut tape = Tape::new();
        let seq = full_seq(&mut tape, &input);
        let mut binder = Binder::new(&mut tape);
        let vars = CompressorVars::bind(&params, "comp.", &mut binder).unwrap();
        let out = compress(&mut tape, &vars, &seq).unwrap();
        assert_eq!(tape.shape(out.tokens), &[4, d]);
        for bi in 0..2 {
            for bj in 0..2 {
                let src = (2 * bi) * side + 2 * bj;
                let dst = bi * 2 + bj;
                assert_eq!(
                    &tape.data(out.tokens)[dst * d..(dst + 1) * d],
                    &input.data()[src * d..(src + 1) * d]
                );
            }
        }
    }

    #[test]
    fn maxpool_matches_brute_force_oracle() {
        let side = 16;
        let d = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let input = Tensor::randn(&[side * side, d], 1.0, &mut rng);

        let mut tape = Tape::new();
        let seq = full_seq(&mut tape, &input);
        let vars = CompressorVars::MaxPool2d;
        let out = compress(&mut tape, &vars, &seq).unwrap();
        assert_eq!(tape.shape(out.tokens), &[64, d]);
        assert!(out.is_fully_valid());

        // Independent brute force over every window and channel.
        let xd = input.data();
        for bi in 0..side / 2 {
            for bj in 0..side / 2 {
                for ch in 0..d {
                    let mut best = f64::NEG_INFINITY;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let tok = (2 * bi + di) * side + (2 * bj + dj);
                            best = best.max(xd[tok * d + ch]);
                        }
                    }
                    let got = tape.data(out.tokens)[(bi * (side / 2) + bj) * d + ch];
                    assert_eq!(got, best);
                }
            }
        }
    }

    #[test]
    fn mlp_uniform_mixing_averages_tokens() {
        let budget = 16;
        let n_c = 4;
        let d = 3;
        let params = CompressorParams::Mlp {
            mix: Tensor::filled(&[n_c, budget], 1.0 / budget as f64),
            bias: Tensor::zeros(&[n_c]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let input = Tensor::randn(&[budget, d], 1.0, &mut rng);

        let mut tape = Tape::new();
        let seq = full_seq(&mut tape, &input);
        let mut binder = Binder::new(&mut tape);
        let vars = CompressorVars::bind(&params, "comp.", &mut binder).unwrap();
        let out = compress(&mut tape, &vars, &seq).unwrap();

        for ch in 0..d {
            let mean: f64 =
                (0..budget).map(|t| input.data()[t * d + ch]).sum::<f64>() / budget as f64;
            for tok in 0..n_c {
                assert!((tape.data(out.tokens)[tok * d + ch] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_bias_is_per_token_across_channels() {
        let params = CompressorParams::Mlp {
            mix: Tensor::zeros(&[2, 4]),
            bias: Tensor::new(vec![2], vec![1.5, -0.5]).unwrap(),
        };
        let mut tape = Tape::new();
        let seq = full_seq(&mut tape, &Tensor::zeros(&[4, 3]));
        let mut binder = Binder::new(&mut tape);
        let vars = CompressorVars::bind(&params, "comp.", &mut binder).unwrap();
        let out = compress(&mut tape, &vars, &seq).unwrap();
        assert_eq!(tape.data(out.tokens), &[1.5, 1.5, 1.5, -0.5, -0.5, -0.5]);
    }

    #[test]
    fn compress_rejects_non_square_grid_input() {
        let mut tape = Tape::new();
        let seq = full_seq(&mut tape, &Tensor::zeros(&[12, 4]));
        let vars = CompressorVars::MaxPool2d;
        assert!(matches!(
            compress(&mut tape, &vars, &seq),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn compressor_flop_counts() {
        let cfg = PipelineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let input = Tensor::randn(&[256, 64], 0.1, &mut rng);
        let expect: [(CompressorKind, u64); 3] = [
            (CompressorKind::Conv2d, 64 * 4 * 64 * 64),
            (CompressorKind::MaxPool2d, 0),
            (CompressorKind::Mlp, 64 * 256 * 64),
        ];
        for (kind, want) in expect {
            let params = CompressorParams::init(kind, &cfg, &mut rng);
            let mut tape = Tape::new();
            let seq = full_seq(&mut tape, &input);
            let mut binder = Binder::new(&mut tape);
            let vars = CompressorVars::bind(&params, "c.", &mut binder).unwrap();
            let before = tape.mul_adds();
            let out = compress(&mut tape, &vars, &seq).unwrap();
            assert_eq!(tape.shape(out.tokens), &[64, 64]);
            assert_eq!(tape.mul_adds() - before, want, "{kind:?}");
        }
    }
}
