//! End-to-end pipeline: image to patch tokens, stub encoder, projector,
//! optional compressor, optional fusion, causal decoder. Also greedy
//! generation and the teacher-forced training loss.

use crate::config::PipelineConfig;
use crate::connectors::{
    compress, project, CompressorParams, CompressorVars, ProjectorParams, ProjectorVars,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionParams, FusionVars};
use crate::llm::{decode_merged, embed_text, LlmParams, LlmVars};
use crate::params::{Binder, ParamGroup};
use crate::sequence::TokenSequence;
use crate::tensor::{Tape, Tensor, ValId};
use crate::tokenizer::EOS;
use crate::vision::{
    encode_padded, fit_to_budget, padded_patch_matrix, patchify, EncoderVars, ImageInput,
    StubEncoderParams,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Every weight in the pipeline plus the structural config that shaped it.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineParams {
    pub config: PipelineConfig,
    pub encoder: StubEncoderParams,
    pub projector: ProjectorParams,
    pub compressor: Option<CompressorParams>,
    pub fusion: Option<FusionParams>,
    pub llm: LlmParams,
}

impl PipelineParams {
    /// Builds freshly initialized weights from one seeded stream, so a
    /// (config, seed) pair fully determines every parameter.
    pub fn init(config: PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = StubEncoderParams::init(
            config.patch_len(),
            config.d_v,
            config.l_ve,
            config.d_ff_v,
            &mut rng,
        );
        let projector = ProjectorParams::init(config.d_v, config.d_t, config.init, &mut rng);
        let compressor = config
            .compressor
            .map(|k| CompressorParams::init(k, &config, &mut rng));
        let llm = LlmParams::init(&config, &mut rng);
        let mut fusion = config
            .fusion
            .map(|k| FusionParams::init(k, &config, &mut rng));
        // The decoder-style fusion block starts as an exact copy of the
        // first decoder block rather than from random weights.
        match &mut fusion {
            Some(FusionParams::Decoder(d)) => d.block = llm.blocks[0].clone(),
            Some(FusionParams::Combined { decoder, .. }) => {
                decoder.block = llm.blocks[0].clone()
            }
            _ => {}
        }
        Ok(PipelineParams {
            config,
            encoder,
            projector,
            compressor,
            fusion,
            llm,
        })
    }
}

impl ParamGroup for PipelineParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.encoder.visit(&format!("{prefix}encoder."), f);
        self.projector.visit(&format!("{prefix}projector."), f);
        if let Some(c) = &self.compressor {
            c.visit(&format!("{prefix}compressor."), f);
        }
        if let Some(fu) = &self.fusion {
            fu.visit(&format!("{prefix}fusion."), f);
        }
        self.llm.visit(&format!("{prefix}llm."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoder.visit_mut(&format!("{prefix}encoder."), f);
        self.projector.visit_mut(&format!("{prefix}projector."), f);
        if let Some(c) = &mut self.compressor {
            c.visit_mut(&format!("{prefix}compressor."), f);
        }
        if let Some(fu) = &mut self.fusion {
            fu.visit_mut(&format!("{prefix}fusion."), f);
        }
        self.llm.visit_mut(&format!("{prefix}llm."), f);
    }
}

pub struct PipelineVars {
    pub encoder: EncoderVars,
    pub projector: ProjectorVars,
    pub compressor: Option<CompressorVars>,
    pub fusion: Option<FusionVars>,
    pub llm: LlmVars,
    /// (name, leaf) pairs for gradient harvesting after `backward`.
    pub bound: Vec<(String, ValId)>,
}

impl PipelineVars {
    pub fn bind(params: &PipelineParams, tape: &mut Tape) -> Result<PipelineVars> {
        let mut binder = Binder::new(tape);
        let encoder = EncoderVars::bind(&params.encoder, "encoder.", &mut binder);
        let projector = ProjectorVars::bind(&params.projector, "projector.", &mut binder);
        let compressor = match &params.compressor {
            Some(c) => Some(CompressorVars::bind(c, "compressor.", &mut binder)?),
            None => None,
        };
        let fusion = params
            .fusion
            .as_ref()
            .map(|f| FusionVars::bind(f, "fusion.", &mut binder));
        let llm = LlmVars::bind(&params.llm, "llm.", &mut binder);
        let bound = binder.into_bound();
        Ok(PipelineVars {
            encoder,
            projector,
            compressor,
            fusion,
            llm,
            bound,
        })
    }
}

/// Forward multiply-add counts per pipeline stage, read off the tape's
/// instruction stream while the forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageFlops {
    pub encode: u64,
    pub project: u64,
    pub compress: u64,
    pub fuse: u64,
    pub decode: u64,
}

impl StageFlops {
    pub fn total(&self) -> u64 {
        self.encode + self.project + self.compress + self.fuse + self.decode
    }
}

/// Intermediate values of one forward pass, for probing and loss slicing.
pub struct PipelineTrace {
    pub encoded: TokenSequence,
    pub projected: TokenSequence,
    pub compressed: Option<TokenSequence>,
    /// Fused text states, or the raw text embeddings when fusion is off.
    pub fused_text: ValId,
    pub merged: ValId,
    pub logits: ValId,
    /// Row in `merged` where text begins; equals the visual row count.
    pub text_offset: usize,
    pub text_len: usize,
    pub stage_flops: StageFlops,
}

/// Runs the pipeline on an already-padded patch matrix.
///
/// `patch_matrix` is `[patch_budget, patch_len]` with the first
/// `valid_count` rows real and the rest zero.
pub fn forward_trace(
    tape: &mut Tape,
    vars: &PipelineVars,
    cfg: &PipelineConfig,
    patch_matrix: ValId,
    valid_count: usize,
    text_ids: &[usize],
) -> Result<PipelineTrace> {
    if text_ids.len() > cfg.max_text {
        return Err(Error::Contract(format!(
            "{} text tokens exceed max_text {}",
            text_ids.len(),
            cfg.max_text
        )));
    }
    let text = embed_text(tape, &vars.llm, text_ids)?;

    let c0 = tape.mul_adds();
    let encoded = encode_padded(tape, &vars.encoder, patch_matrix, valid_count, cfg.heads)?;
    let c1 = tape.mul_adds();
    let projected = project(tape, &vars.projector, &encoded)?;
    let c2 = tape.mul_adds();
    let compressed = match &vars.compressor {
        Some(cv) => Some(compress(tape, cv, &projected)?),
        None => None,
    };
    let c3 = tape.mul_adds();
    let visual = compressed.as_ref().unwrap_or(&projected).clone();
    let fused_text = match &vars.fusion {
        Some(fv) => fuse(
            tape,
            fv,
            &visual,
            &text,
            cfg.heads,
            cfg.fusion_mask_padded,
        )?,
        None => text.tokens,
    };
    let c4 = tape.mul_adds();
    let merged = if text.len == 0 {
        visual.tokens
    } else {
        tape.concat(&[visual.tokens, fused_text], 0)?
    };
    let logits = decode_merged(tape, &vars.llm, merged, cfg.heads)?;
    let c5 = tape.mul_adds();

    Ok(PipelineTrace {
        text_offset: visual.len,
        text_len: text.len,
        encoded,
        projected,
        compressed,
        fused_text,
        merged,
        logits,
        stage_flops: StageFlops {
            encode: c1 - c0,
            project: c2 - c1,
            compress: c3 - c2,
            fuse: c4 - c3,
            decode: c5 - c4,
        },
    })
}

/// Resizes, patchifies, pads, and runs [`forward_trace`].
pub fn forward_from_image(
    tape: &mut Tape,
    vars: &PipelineVars,
    cfg: &PipelineConfig,
    image: &ImageInput,
    text_ids: &[usize],
) -> Result<PipelineTrace> {
    let fitted = fit_to_budget(image, cfg.patch_size, cfg.patch_budget);
    let grid = patchify(&fitted, cfg.patch_size)?;
    let (matrix, valid) = padded_patch_matrix(&grid, cfg.patch_budget)?;
    let m = tape.leaf(&matrix);
    forward_trace(tape, vars, cfg, m, valid, text_ids)
}

/// One supervised example: an image, a prompt, and the continuation the
/// model should produce.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: ImageInput,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

/// Mean next-token loss over the target positions only; prompt and visual
/// positions contribute nothing.
pub fn sample_loss(
    tape: &mut Tape,
    vars: &PipelineVars,
    cfg: &PipelineConfig,
    sample: &Sample,
) -> Result<(ValId, PipelineTrace)> {
    if sample.prompt.is_empty() || sample.target.is_empty() {
        return Err(Error::Contract(
            "samples need a nonempty prompt and target".into(),
        ));
    }
    let mut text_ids = sample.prompt.clone();
    text_ids.extend_from_slice(&sample.target);
    let trace = forward_from_image(tape, vars, cfg, &sample.image, &text_ids)?;
    // Logits at position p predict token p+1, so target token k is scored
    // by the row just before it.
    let from = trace.text_offset + sample.prompt.len() - 1;
    let rows = tape.slice(trace.logits, 0, from, from + sample.target.len())?;
    let loss = tape.cross_entropy(rows, &sample.target)?;
    Ok((loss, trace))
}

/// First index of the row maximum; ties pick the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Visual rows of the decoder input, computed once per image and reused for
/// every generation step.
pub struct VisualPrefix {
    pub tokens: Tensor,
    pub valid_count: usize,
}

pub fn visual_prefix(params: &PipelineParams, image: &ImageInput) -> Result<VisualPrefix> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let encoder = EncoderVars::bind(&params.encoder, "encoder.", &mut binder);
    let projector = ProjectorVars::bind(&params.projector, "projector.", &mut binder);
    let compressor = match &params.compressor {
        Some(c) => Some(CompressorVars::bind(c, "compressor.", &mut binder)?),
        None => None,
    };
    let fitted = fit_to_budget(image, cfg.patch_size, cfg.patch_budget);
    let grid = patchify(&fitted, cfg.patch_size)?;
    let (matrix, valid) = padded_patch_matrix(&grid, cfg.patch_budget)?;
    let m = tape.leaf(&matrix);
    let encoded = encode_padded(&mut tape, &encoder, m, valid, cfg.heads)?;
    let projected = project(&mut tape, &projector, &encoded)?;
    let visual = match &compressor {
        Some(cv) => compress(&mut tape, cv, &projected)?,
        None => projected,
    };
    Ok(VisualPrefix {
        tokens: Tensor::new(
            vec![visual.len, visual.dim],
            tape.data(visual.tokens).to_vec(),
        )?,
        valid_count: visual.valid_count,
    })
}

/// Greedy decoding: recomputes the full sequence each step (causality makes
/// this equivalent to incremental decoding), appends the argmax token, and
/// stops at the end marker, `max_steps`, or the text budget.
///
/// Returns only the newly generated ids.
pub fn generate(
    params: &PipelineParams,
    image: &ImageInput,
    prompt: &[usize],
    max_steps: usize,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Contract("generation needs a nonempty prompt".into()));
    }
    let cfg = &params.config;
    let prefix = visual_prefix(params, image)?;
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_steps {
        if ids.len() >= cfg.max_text {
            break;
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let fusion = params
            .fusion
            .as_ref()
            .map(|f| FusionVars::bind(f, "fusion.", &mut binder));
        let llm = LlmVars::bind(&params.llm, "llm.", &mut binder);
        let vis = tape.leaf(&prefix.tokens);
        let visual = TokenSequence::new(&tape, vis, prefix.valid_count)?;
        let text = embed_text(&mut tape, &llm, &ids)?;
        let fused = match &fusion {
            Some(fv) => fuse(
                &mut tape,
                fv,
                &visual,
                &text,
                cfg.heads,
                cfg.fusion_mask_padded,
            )?,
            None => text.tokens,
        };
        let merged = tape.concat(&[visual.tokens, fused], 0)?;
        let logits = decode_merged(&mut tape, &llm, merged, cfg.heads)?;
        let s = tape.shape(logits)[0];
        let v = tape.shape(logits)[1];
        let next = argmax(&tape.data(logits)[(s - 1) * v..s * v]);
        ids.push(next);
        out.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(out)
}
