//! Analytic multiply-add and parameter counting for every pipeline variant,
//! plus the measured counterpart read off an instrumented forward pass.
//!
//! Counts are multiply-adds (one scalar multiply plus one accumulation);
//! only matmul-backed operations contribute, matching the tape counter.
//! Analytic and measured figures agree exactly, by integer arithmetic, not
//! approximation.

use crate::block::{block_mul_adds, block_param_count};
use crate::config::{CompressorKind, FusionKind, PipelineConfig};
use crate::error::Result;
use crate::params::ParamGroup;
use crate::pipeline::{forward_from_image, PipelineParams, PipelineVars};
use crate::tensor::Tape;
use crate::vision::ImageInput;

/// Parameter element counts per module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModuleParams {
    pub encoder: u64,
    pub projector: u64,
    pub compressor: u64,
    pub fusion: u64,
    pub llm: u64,
}

impl ModuleParams {
    pub fn total(&self) -> u64 {
        self.encoder + self.projector + self.compressor + self.fusion + self.llm
    }
}

/// Per-stage multiply-add counts for one variant at one text length.
///
/// The prefill stages (everything except the per-step fields) sum to
/// [`FlopsReport::total`]. The per-step fields are closed-form projections
/// of generating one more token: `decode_per_step_kv` assumes cached keys
/// and values, `decode_per_step_recompute` re-runs the decoder at length
/// `s + 1` as the artifact's own generation loop does. Measured reports
/// cover the prefill stages only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub variant: String,
    pub n_text: usize,
    pub encode: u64,
    pub project: u64,
    pub compress: u64,
    pub fuse: u64,
    pub decode_prefill: u64,
    pub decode_per_step_kv: u64,
    pub decode_per_step_recompute: u64,
    pub params: ModuleParams,
}

impl FlopsReport {
    /// Sum of the prefill stages.
    pub fn total(&self) -> u64 {
        self.encode + self.project + self.compress + self.fuse + self.decode_prefill
    }
}

fn cross_fusion_mul_adds(rows: u64, n_text: u64, d_t: u64) -> u64 {
    // Q, K, V projections, then score and value products summed over heads.
    (n_text + 2 * rows) * d_t * d_t + 2 * n_text * rows * d_t
}

fn decode_prefill_mul_adds(cfg: &PipelineConfig, s: u64) -> u64 {
    let (d, f, v) = (cfg.d_t as u64, cfg.d_ff_t as u64, cfg.vocab_size as u64);
    cfg.l_llm as u64 * block_mul_adds(s, d, f) + s * d * v
}

/// Closed-form stage counts for `cfg` at `n_text` text tokens.
pub fn analytic_flops(cfg: &PipelineConfig, n_text: usize) -> Result<FlopsReport> {
    cfg.validate()?;
    let p = cfg.patch_budget as u64;
    let lp = cfg.patch_len() as u64;
    let (dv, fv, lv) = (cfg.d_v as u64, cfg.d_ff_v as u64, cfg.l_ve as u64);
    let (dt, ft) = (cfg.d_t as u64, cfg.d_ff_t as u64);
    let nc = cfg.n_compressed as u64;
    let nt = n_text as u64;
    let rows = cfg.visual_rows() as u64;
    let s = rows + nt;

    let encode = p * lp * dv + lv * block_mul_adds(p, dv, fv);
    let project = p * dv * dt + p * dt * dt;
    let compress = match cfg.compressor {
        None | Some(CompressorKind::MaxPool2d) => 0,
        Some(CompressorKind::Conv2d) => nc * 4 * dt * dt,
        Some(CompressorKind::Mlp) => nc * p * dt,
    };
    let fuse = if nt == 0 {
        0
    } else {
        match cfg.fusion {
            None => 0,
            Some(FusionKind::Cross) => cross_fusion_mul_adds(rows, nt, dt),
            Some(FusionKind::Decoder) => block_mul_adds(s, dt, ft),
            Some(FusionKind::Combined) => {
                cross_fusion_mul_adds(rows, nt, dt) + block_mul_adds(s, dt, ft)
            }
        }
    };
    let decode_prefill = decode_prefill_mul_adds(cfg, s);
    let decode_per_step_kv = cfg.l_llm as u64
        * (4 * dt * dt + 2 * (s + 1) * dt + 2 * dt * ft)
        + dt * cfg.vocab_size as u64;
    let decode_per_step_recompute = decode_prefill_mul_adds(cfg, s + 1);

    Ok(FlopsReport {
        variant: variant_name(cfg),
        n_text,
        encode,
        project,
        compress,
        fuse,
        decode_prefill,
        decode_per_step_kv,
        decode_per_step_recompute,
        params: analytic_params(cfg),
    })
}

/// Closed-form per-module parameter counts.
pub fn analytic_params(cfg: &PipelineConfig) -> ModuleParams {
    let p = cfg.patch_budget as u64;
    let lp = cfg.patch_len() as u64;
    let (dv, fv, lv) = (cfg.d_v as u64, cfg.d_ff_v as u64, cfg.l_ve as u64);
    let (dt, ft) = (cfg.d_t as u64, cfg.d_ff_t as u64);
    let nc = cfg.n_compressed as u64;
    let v = cfg.vocab_size as u64;
    ModuleParams {
        encoder: lp * dv + lv * block_param_count(dv, fv),
        projector: dv * dt + dt + dt * dt + dt,
        compressor: match cfg.compressor {
            None | Some(CompressorKind::MaxPool2d) => 0,
            Some(CompressorKind::Conv2d) => 4 * dt * dt + dt,
            Some(CompressorKind::Mlp) => nc * p + nc,
        },
        fusion: match cfg.fusion {
            None => 0,
            Some(FusionKind::Cross) => 3 * dt * dt,
            Some(FusionKind::Decoder) => block_param_count(dt, ft),
            Some(FusionKind::Combined) => 3 * dt * dt + block_param_count(dt, ft),
        },
        llm: v * dt + (p + cfg.max_text as u64) * dt + cfg.l_llm as u64 * block_param_count(dt, ft) + 2 * dt,
    }
}

/// Runs one real forward pass and reads the stage counts off the tape.
/// The per-step and parameter fields come from the closed forms; the five
/// prefill stages are measured.
pub fn measured_flops(
    params: &PipelineParams,
    image: &ImageInput,
    text_ids: &[usize],
) -> Result<FlopsReport> {
    let mut tape = Tape::new();
    let vars = PipelineVars::bind(params, &mut tape)?;
    let trace = forward_from_image(&mut tape, &vars, &params.config, image, text_ids)?;
    let analytic = analytic_flops(&params.config, text_ids.len())?;
    Ok(FlopsReport {
        variant: variant_name(&params.config),
        n_text: text_ids.len(),
        encode: trace.stage_flops.encode,
        project: trace.stage_flops.project,
        compress: trace.stage_flops.compress,
        fuse: trace.stage_flops.fuse,
        decode_prefill: trace.stage_flops.decode,
        decode_per_step_kv: analytic.decode_per_step_kv,
        decode_per_step_recompute: analytic.decode_per_step_recompute,
        params: analytic.params,
    })
}

/// Parameter counts read from actual weight tensors, per module.
pub fn measured_params(params: &PipelineParams) -> ModuleParams {
    let count = |g: &dyn ParamGroup| crate::params::param_count(g);
    ModuleParams {
        encoder: count(&params.encoder),
        projector: count(&params.projector),
        compressor: params.compressor.as_ref().map_or(0, |c| count(c)),
        fusion: params.fusion.as_ref().map_or(0, |f| count(f)),
        llm: count(&params.llm),
    }
}

fn variant_name(cfg: &PipelineConfig) -> String {
    match (cfg.compressor, cfg.fusion) {
        (None, None) => "baseline".to_string(),
        (Some(_), None) => "compress".to_string(),
        (Some(_), Some(f)) => f.to_string(),
        (None, Some(f)) => format!("uncompressed+{f}"),
    }
}

/// The five comparison variants built from one base config: the
/// no-compression baseline, compressor only, and compressor plus each
/// fusion kind. A base config without a compressor contributes the
/// token-mixing MLP to the compressed variants.
pub fn variant_configs(base: &PipelineConfig) -> [(&'static str, PipelineConfig); 5] {
    let comp = base.compressor.unwrap_or(CompressorKind::Mlp);
    let with = |c: Option<CompressorKind>, f: Option<FusionKind>| {
        base.clone().with_compressor(c).with_fusion(f)
    };
    [
        ("baseline", with(None, None)),
        ("compress", with(Some(comp), None)),
        ("cross", with(Some(comp), Some(FusionKind::Cross))),
        ("decoder", with(Some(comp), Some(FusionKind::Decoder))),
        ("combined", with(Some(comp), Some(FusionKind::Combined))),
    ]
}

/// Analytic reports for all five variants, baseline first.
pub fn compare_variants(base: &PipelineConfig, n_text: usize) -> Result<Vec<FlopsReport>> {
    variant_configs(base)
        .into_iter()
        .map(|(name, cfg)| {
            let mut r = analytic_flops(&cfg, n_text)?;
            r.variant = name.to_string();
            Ok(r)
        })
        .collect()
}

/// Aligned text table over the reports; the ratio column compares totals
/// against the first row.
pub fn render_table(reports: &[FlopsReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>12} {:>10} {:>10} {:>12} {:>14} {:>14} {:>8} {:>12}\n",
        "variant", "encode", "project", "compress", "fuse", "decode", "total", "ratio", "params"
    ));
    let base_total = reports.first().map(|r| r.total()).unwrap_or(0);
    for r in reports {
        let ratio = if base_total > 0 {
            r.total() as f64 / base_total as f64
        } else {
            f64::NAN
        };
        out.push_str(&format!(
            "{:<12} {:>12} {:>10} {:>10} {:>12} {:>14} {:>14} {:>8.3} {:>12}\n",
            r.variant,
            r.encode,
            r.project,
            r.compress,
            r.fuse,
            r.decode_prefill,
            r.total(),
            ratio,
            r.params.total()
        ));
    }
    out.push_str(&format!(
        "(multiply-adds at n_text tokens; per-step decode with kv reuse: {}, recompute: {})\n",
        reports.first().map(|r| r.decode_per_step_kv).unwrap_or(0),
        reports
            .first()
            .map(|r| r.decode_per_step_recompute)
            .unwrap_or(0),
    ));
    out
}

pub const CSV_HEADER: &str = "variant,n_text,encode,project,compress,fuse,decode_prefill,total,\
decode_per_step_kv,decode_per_step_recompute,params_encoder,params_projector,params_compressor,\
params_fusion,params_llm,params_total";

/// CSV rendering in the [`CSV_HEADER`] column order.
pub fn render_csv(reports: &[FlopsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.n_text,
            r.encode,
            r.project,
            r.compress,
            r.fuse,
            r.decode_prefill,
            r.total(),
            r.decode_per_step_kv,
            r.decode_per_step_recompute,
            r.params.encoder,
            r.params.projector,
            r.params.compressor,
            r.params.fusion,
            r.params.llm,
            r.params.total()
        ));
    }
    out
}
