//! Toy causal decoder language model: byte-level embeddings, learned
//! positions, pre-layernorm blocks, and a weight-tied output head.

use crate::block::{block_forward, AttnMask, BlockParams, BlockVars};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamGroup};
use crate::sequence::TokenSequence;
use crate::tensor::{Tape, Tensor, ValId};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LlmParams {
    /// Token embedding table `[vocab, d_t]`; also the output head, applied
    /// transposed.
    pub embed: Tensor,
    /// Learned position table `[max_positions, d_t]`, covering the visual
    /// prefix plus the text budget.
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

impl LlmParams {
    pub fn init<R: Rng>(cfg: &PipelineConfig, rng: &mut R) -> Self {
        let sigma = 1.0 / (cfg.d_t as f64).sqrt();
        LlmParams {
            embed: Tensor::randn(&[cfg.vocab_size, cfg.d_t], sigma, rng),
            pos: Tensor::randn(&[cfg.max_positions(), cfg.d_t], sigma, rng),
            blocks: (0..cfg.l_llm)
                .map(|_| BlockParams::init(cfg.d_t, cfg.d_ff_t, rng))
                .collect(),
            final_gain: Tensor::filled(&[cfg.d_t], 1.0),
            final_bias: Tensor::zeros(&[cfg.d_t]),
        }
    }
}

impl ParamGroup for LlmParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}embed"), &self.embed);
        f(format!("{prefix}pos"), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}blocks.{i}."), f);
        }
        f(format!("{prefix}final_gain"), &self.final_gain);
        f(format!("{prefix}final_bias"), &self.final_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}embed"), &mut self.embed);
        f(format!("{prefix}pos"), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}blocks.{i}."), f);
        }
        f(format!("{prefix}final_gain"), &mut self.final_gain);
        f(format!("{prefix}final_bias"), &mut self.final_bias);
    }
}

pub struct LlmVars {
    pub embed: ValId,
    pub pos: ValId,
    pub blocks: Vec<BlockVars>,
    pub final_gain: ValId,
    pub final_bias: ValId,
}

impl LlmVars {
    pub fn bind(params: &LlmParams, prefix: &str, binder: &mut Binder) -> LlmVars {
        LlmVars {
            embed: binder.bind(format!("{prefix}embed"), &params.embed),
            pos: binder.bind(format!("{prefix}pos"), &params.pos),
            blocks: params
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| BlockVars::bind(b, &format!("{prefix}blocks.{i}."), binder))
                .collect(),
            final_gain: binder.bind(format!("{prefix}final_gain"), &params.final_gain),
            final_bias: binder.bind(format!("{prefix}final_bias"), &params.final_bias),
        }
    }
}

/// Looks up embeddings for `ids`; the result is a fully-valid sequence
/// (text is never padded here).
pub fn embed_text(tape: &mut Tape, vars: &LlmVars, ids: &[usize]) -> Result<TokenSequence> {
    let tokens = tape.gather_rows(vars.embed, ids)?;
    TokenSequence::all_valid(tape, tokens)
}

/// Runs the causal decoder over an already-merged `[s, d_t]` sequence and
/// returns logits `[s, vocab]`. Position embeddings for offsets `0..s` are
/// added first; the head is the transposed embedding table.
pub fn decode_merged(
    tape: &mut Tape,
    vars: &LlmVars,
    merged: ValId,
    heads: usize,
) -> Result<ValId> {
    let s = tape.shape(merged)[0];
    let max_pos = tape.shape(vars.pos)[0];
    if s > max_pos {
        return Err(Error::Contract(format!(
            "sequence length {s} exceeds the {max_pos}-entry position table"
        )));
    }
    let pos_slice = tape.slice(vars.pos, 0, 0, s)?;
    let mut h = tape.add(merged, pos_slice)?;
    for block in &vars.blocks {
        h = block_forward(tape, h, block, heads, &AttnMask::Causal)?;
    }
    let normed = tape.layernorm(h, vars.final_gain, vars.final_bias)?;
    let head = tape.transpose(vars.embed)?;
    tape.matmul(normed, head)
}
