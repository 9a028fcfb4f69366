//! Pre-layernorm transformer block, shared by the stub vision encoder, the
//! decoder LLM, and the decoder-style fusion module.

use crate::error::{Error, Result};
use crate::params::{Binder, ParamGroup};
use crate::tensor::{Tape, Tensor, ValId};
use rand::Rng;

/// How attention scores are masked before the softmax. Masking is additive:
/// hidden entries get `-inf` pre-softmax, which yields exactly-zero weights.
pub enum AttnMask<'a> {
    /// Full bidirectional attention.
    None,
    /// Position i attends to positions <= i. Query and key counts must match.
    Causal,
    /// Entries of the slice are 1.0 (attend) or 0.0 (hide), one per key.
    KeyPadding(&'a [f64]),
}

/// Weights for one block: attention projections, feed-forward pair, and the
/// two layernorms. The feed-forward activation is gelu.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ff1: Tensor,
    pub ff_b1: Tensor,
    pub ff2: Tensor,
    pub ff_b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl BlockParams {
    /// Initializes with sigma = 1/sqrt(fan_in) weights, zero biases, unit
    /// layernorm gains.
    pub fn init<R: Rng>(width: usize, ff_width: usize, rng: &mut R) -> Self {
        let attn_sigma = 1.0 / (width as f64).sqrt();
        let ff2_sigma = 1.0 / (ff_width as f64).sqrt();
        BlockParams {
            w_q: Tensor::randn(&[width, width], attn_sigma, rng),
            w_k: Tensor::randn(&[width, width], attn_sigma, rng),
            w_v: Tensor::randn(&[width, width], attn_sigma, rng),
            w_o: Tensor::randn(&[width, width], attn_sigma, rng),
            ff1: Tensor::randn(&[width, ff_width], attn_sigma, rng),
            ff_b1: Tensor::zeros(&[ff_width]),
            ff2: Tensor::randn(&[ff_width, width], ff2_sigma, rng),
            ff_b2: Tensor::zeros(&[width]),
            ln1_gain: Tensor::filled(&[width], 1.0),
            ln1_bias: Tensor::zeros(&[width]),
            ln2_gain: Tensor::filled(&[width], 1.0),
            ln2_bias: Tensor::zeros(&[width]),
        }
    }

    pub fn width(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn ff_width(&self) -> usize {
        self.ff1.shape()[1]
    }
}

impl ParamGroup for BlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (name, t) in self.fields() {
            f(format!("{prefix}{name}"), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        let names: Vec<String> = FIELD_NAMES.iter().map(|n| format!("{prefix}{n}")).collect();
        for (name, t) in names.into_iter().zip(self.fields_mut()) {
            f(name, t);
        }
    }
}

const FIELD_NAMES: [&str; 12] = [
    "w_q", "w_k", "w_v", "w_o", "ff1", "ff_b1", "ff2", "ff_b2", "ln1_gain", "ln1_bias",
    "ln2_gain", "ln2_bias",
];

impl BlockParams {
    fn fields(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ff1", &self.ff1),
            ("ff_b1", &self.ff_b1),
            ("ff2", &self.ff2),
            ("ff_b2", &self.ff_b2),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ff1,
            &mut self.ff_b1,
            &mut self.ff2,
            &mut self.ff_b2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

/// Tape handles for one bound block.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub w_q: ValId,
    pub w_k: ValId,
    pub w_v: ValId,
    pub w_o: ValId,
    pub ff1: ValId,
    pub ff_b1: ValId,
    pub ff2: ValId,
    pub ff_b2: ValId,
    pub ln1_gain: ValId,
    pub ln1_bias: ValId,
    pub ln2_gain: ValId,
    pub ln2_bias: ValId,
}

impl BlockVars {
    pub fn bind(params: &BlockParams, prefix: &str, binder: &mut Binder) -> BlockVars {
        BlockVars {
            w_q: binder.bind(format!("{prefix}w_q"), &params.w_q),
            w_k: binder.bind(format!("{prefix}w_k"), &params.w_k),
            w_v: binder.bind(format!("{prefix}w_v"), &params.w_v),
            w_o: binder.bind(format!("{prefix}w_o"), &params.w_o),
            ff1: binder.bind(format!("{prefix}ff1"), &params.ff1),
            ff_b1: binder.bind(format!("{prefix}ff_b1"), &params.ff_b1),
            ff2: binder.bind(format!("{prefix}ff2"), &params.ff2),
            ff_b2: binder.bind(format!("{prefix}ff_b2"), &params.ff_b2),
            ln1_gain: binder.bind(format!("{prefix}ln1_gain"), &params.ln1_gain),
            ln1_bias: binder.bind(format!("{prefix}ln1_bias"), &params.ln1_bias),
            ln2_gain: binder.bind(format!("{prefix}ln2_gain"), &params.ln2_gain),
            ln2_bias: binder.bind(format!("{prefix}ln2_bias"), &params.ln2_bias),
        }
    }
}

/// Scaled dot-product attention over row-token matrices.
///
/// `q` is `[n_q, d]`, `k` and `v` are `[n_k, d]`. Scores use scale
/// `1/sqrt(d/heads)` and softmax over the key axis. Output is `[n_q, d]`
/// (head outputs concatenated); there is no output projection here.
pub fn attention(
    tape: &mut Tape,
    q: ValId,
    k: ValId,
    v: ValId,
    heads: usize,
    mask: &AttnMask,
) -> Result<ValId> {
    let d = tape.shape(q)[1];
    let n_q = tape.shape(q)[0];
    let n_k = tape.shape(k)[0];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Contract(format!(
            "head count {heads} must divide width {d}"
        )));
    }
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let bias = match mask {
        AttnMask::None => None,
        AttnMask::Causal => {
            if n_q != n_k {
                return Err(Error::Contract(format!(
                    "causal attention needs square scores, got {n_q} queries x {n_k} keys"
                )));
            }
            let mut m = vec![0.0; n_q * n_k];
            for i in 0..n_q {
                for j in (i + 1)..n_k {
                    m[i * n_k + j] = f64::NEG_INFINITY;
                }
            }
            Some((tape.constant(&[n_q, n_k], m)?, true))
        }
        AttnMask::KeyPadding(keep) => {
            if keep.len() != n_k {
                return Err(Error::ShapeMismatch {
                    op: "attention key padding",
                    left: vec![n_k],
                    right: vec![keep.len()],
                });
            }
            let m: Vec<f64> = keep
                .iter()
                .map(|&v| if v != 0.0 { 0.0 } else { f64::NEG_INFINITY })
                .collect();
            Some((tape.constant(&[n_k], m)?, false))
        }
    };

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, 1, lo, hi)?,
                tape.slice(k, 1, lo, hi)?,
                tape.slice(v, 1, lo, hi)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale);
        let masked = match bias {
            None => scaled,
            Some((b, true)) => tape.add(scaled, b)?,
            Some((b, false)) => tape.add_bias(scaled, b)?,
        };
        let weights = tape.softmax(masked, 1)?;
        head_outputs.push(tape.matmul(weights, vh)?);
    }
    if heads == 1 {
        Ok(head_outputs[0])
    } else {
        tape.concat(&head_outputs, 1)
    }
}

/// One pre-layernorm block:
/// `h = x + attn(ln1(x)) . w_o`, `out = h + ff(ln2(h))`.
pub fn block_forward(
    tape: &mut Tape,
    x: ValId,
    vars: &BlockVars,
    heads: usize,
    mask: &AttnMask,
) -> Result<ValId> {
    let normed = tape.layernorm(x, vars.ln1_gain, vars.ln1_bias)?;
    let q = tape.matmul(normed, vars.w_q)?;
    let k = tape.matmul(normed, vars.w_k)?;
    let v = tape.matmul(normed, vars.w_v)?;
    let attn = attention(tape, q, k, v, heads, mask)?;
    let proj = tape.matmul(attn, vars.w_o)?;
    let h = tape.add(x, proj)?;

    let normed2 = tape.layernorm(h, vars.ln2_gain, vars.ln2_bias)?;
    let f1 = tape.matmul(normed2, vars.ff1)?;
    let f1b = tape.add_bias(f1, vars.ff_b1)?;
    let act = tape.gelu(f1b);
    let f2 = tape.matmul(act, vars.ff2)?;
    let f2b = tape.add_bias(f2, vars.ff_b2)?;
    tape.add(h, f2b)
}

/// Multiply-adds one `block_forward` call performs at sequence length `s`.
pub fn block_mul_adds(s: u64, width: u64, ff_width: u64) -> u64 {
    4 * s * width * width + 2 * s * s * width + 2 * s * width * ff_width
}

/// Element count of one block's parameters.
pub fn block_param_count(width: u64, ff_width: u64) -> u64 {
    4 * width * width + width * ff_width + ff_width + ff_width * width + width + 4 * width
}
