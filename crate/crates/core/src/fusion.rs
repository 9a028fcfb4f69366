//! Fusion modules that let text hidden states read from the compressed
//! visual tokens before decoding: cross-attention, a decoder-style block
//! over the concatenated sequence, and their sum.

use crate::block::{attention, block_forward, AttnMask, BlockParams, BlockVars};
use crate::config::{FusionKind, InitMode, PipelineConfig};
use crate::error::Result;
use crate::params::{Binder, ParamGroup};
use crate::sequence::TokenSequence;
use crate::tensor::{Tape, Tensor, ValId};
use rand::Rng;

/// Cross-attention weights: text queries, visual keys and values. There is
/// deliberately no output projection; head outputs are concatenated and
/// returned as-is.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl CrossParams {
    pub fn init<R: Rng>(d_t: usize, mode: InitMode, rng: &mut R) -> Self {
        let sigma = match mode {
            InitMode::Stabilized => 1.0 / (d_t as f64).sqrt(),
            InitMode::Faithful => 1.0,
        };
        CrossParams {
            w_q: Tensor::randn(&[d_t, d_t], sigma, rng),
            w_k: Tensor::randn(&[d_t, d_t], sigma, rng),
            w_v: Tensor::randn(&[d_t, d_t], sigma, rng),
        }
    }
}

impl ParamGroup for CrossParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}w_q"), &self.w_q);
        f(format!("{prefix}w_k"), &self.w_k);
        f(format!("{prefix}w_v"), &self.w_v);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}w_q"), &mut self.w_q);
        f(format!("{prefix}w_k"), &mut self.w_k);
        f(format!("{prefix}w_v"), &mut self.w_v);
    }
}

/// Decoder-style fusion: one full bidirectional transformer block over the
/// visual tokens concatenated ahead of the text tokens. Only the text rows
/// of the block output are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderFusionParams {
    pub block: BlockParams,
}

impl DecoderFusionParams {
    pub fn init<R: Rng>(d_t: usize, d_ff: usize, rng: &mut R) -> Self {
        DecoderFusionParams {
            block: BlockParams::init(d_t, d_ff, rng),
        }
    }
}

impl ParamGroup for DecoderFusionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.block.visit(&format!("{prefix}block."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.block.visit_mut(&format!("{prefix}block."), f);
    }
}

/// Weights for one fusion variant. The combined variant holds disjoint
/// parameter sets for its two branches.
#[derive(Debug, Clone, PartialEq)]
pub enum FusionParams {
    Cross(CrossParams),
    Decoder(DecoderFusionParams),
    Combined {
        cross: CrossParams,
        decoder: DecoderFusionParams,
    },
}

impl FusionParams {
    pub fn init<R: Rng>(kind: FusionKind, cfg: &PipelineConfig, rng: &mut R) -> Self {
        match kind {
            FusionKind::Cross => FusionParams::Cross(CrossParams::init(cfg.d_t, cfg.init, rng)),
            FusionKind::Decoder => {
                FusionParams::Decoder(DecoderFusionParams::init(cfg.d_t, cfg.d_ff_t, rng))
            }
            FusionKind::Combined => FusionParams::Combined {
                cross: CrossParams::init(cfg.d_t, cfg.init, rng),
                decoder: DecoderFusionParams::init(cfg.d_t, cfg.d_ff_t, rng),
            },
        }
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            FusionParams::Cross(_) => FusionKind::Cross,
            FusionParams::Decoder(_) => FusionKind::Decoder,
            FusionParams::Combined { .. } => FusionKind::Combined,
        }
    }
}

impl ParamGroup for FusionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        match self {
            FusionParams::Cross(c) => c.visit(&format!("{prefix}cross."), f),
            FusionParams::Decoder(d) => d.visit(&format!("{prefix}decoder."), f),
            FusionParams::Combined { cross, decoder } => {
                cross.visit(&format!("{prefix}cross."), f);
                decoder.visit(&format!("{prefix}decoder."), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            FusionParams::Cross(c) => c.visit_mut(&format!("{prefix}cross."), f),
            FusionParams::Decoder(d) => d.visit_mut(&format!("{prefix}decoder."), f),
            FusionParams::Combined { cross, decoder } => {
                cross.visit_mut(&format!("{prefix}cross."), f);
                decoder.visit_mut(&format!("{prefix}decoder."), f);
            }
        }
    }
}

pub struct CrossVars {
    pub w_q: ValId,
    pub w_k: ValId,
    pub w_v: ValId,
}

impl CrossVars {
    pub fn bind(params: &CrossParams, prefix: &str, binder: &mut Binder) -> CrossVars {
        CrossVars {
            w_q: binder.bind(format!("{prefix}w_q"), &params.w_q),
            w_k: binder.bind(format!("{prefix}w_k"), &params.w_k),
            w_v: binder.bind(format!("{prefix}w_v"), &params.w_v),
        }
    }
}

pub enum FusionVars {
    Cross(CrossVars),
    Decoder(BlockVars),
    Combined { cross: CrossVars, decoder: BlockVars },
}

impl FusionVars {
    pub fn bind(params: &FusionParams, prefix: &str, binder: &mut Binder) -> FusionVars {
        match params {
            FusionParams::Cross(c) => {
                FusionVars::Cross(CrossVars::bind(c, &format!("{prefix}cross."), binder))
            }
            FusionParams::Decoder(d) => FusionVars::Decoder(BlockVars::bind(
                &d.block,
                &format!("{prefix}decoder.block."),
                binder,
            )),
            FusionParams::Combined { cross, decoder } => FusionVars::Combined {
                cross: CrossVars::bind(cross, &format!("{prefix}cross."), binder),
                decoder: BlockVars::bind(
                    &decoder.block,
                    &format!("{prefix}decoder.block."),
                    binder,
                ),
            },
        }
    }
}

fn visual_key_mask<'a>(visual: &'a TokenSequence, mask_padded: bool) -> AttnMask<'a> {
    if mask_padded && !visual.is_fully_valid() {
        AttnMask::KeyPadding(&visual.mask)
    } else {
        AttnMask::None
    }
}

/// Cross-attention branch: text rows query the visual tokens.
pub fn fuse_cross(
    tape: &mut Tape,
    vars: &CrossVars,
    visual: &TokenSequence,
    text: &TokenSequence,
    heads: usize,
    mask_padded: bool,
) -> Result<ValId> {
    let q = tape.matmul(text.tokens, vars.w_q)?;
    let k = tape.matmul(visual.tokens, vars.w_k)?;
    let v = tape.matmul(visual.tokens, vars.w_v)?;
    let mask = visual_key_mask(visual, mask_padded);
    attention(tape, q, k, v, heads, &mask)
}

/// Decoder-style branch: one bidirectional block over `[visual; text]`,
/// returning only the text rows.
pub fn fuse_decoder(
    tape: &mut Tape,
    vars: &BlockVars,
    visual: &TokenSequence,
    text: &TokenSequence,
    heads: usize,
    mask_padded: bool,
) -> Result<ValId> {
    let cat = tape.concat(&[visual.tokens, text.tokens], 0)?;
    let mut keep = visual.mask.clone();
    keep.extend(std::iter::repeat(1.0).take(text.len));
    let use_mask = mask_padded && !visual.is_fully_valid();
    let mask = if use_mask {
        AttnMask::KeyPadding(&keep)
    } else {
        AttnMask::None
    };
    let out = block_forward(tape, cat, vars, heads, &mask)?;
    tape.slice(out, 0, visual.len, visual.len + text.len)
}

/// Runs the configured fusion variant and returns fused text states
/// `[n_text, d_t]`.
///
/// With no text tokens the visual branch has no readers, so this
/// short-circuits to the empty input (and records no multiply-adds).
pub fn fuse(
    tape: &mut Tape,
    vars: &FusionVars,
    visual: &TokenSequence,
    text: &TokenSequence,
    heads: usize,
    mask_padded: bool,
) -> Result<ValId> {
    if text.len == 0 {
        return Ok(text.tokens);
    }
    match vars {
        FusionVars::Cross(c) => fuse_cross(tape, c, visual, text, heads, mask_padded),
        FusionVars::Decoder(d) => fuse_decoder(tape, d, visual, text, heads, mask_padded),
        FusionVars::Combined { cross, decoder } => {
            let a = fuse_cross(tape, cross, visual, text, heads, mask_padded)?;
            let b = fuse_decoder(tape, decoder, visual, text, heads, mask_padded)?;
            tape.add(a, b)
        }
    }
}
