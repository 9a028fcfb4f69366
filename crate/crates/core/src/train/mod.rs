//! Three-stage training driver: per-stage freeze maps, the batched
//! optimization loop, curriculum orchestration with per-stage checkpoints,
//! and teacher-forced evaluation.

pub mod optim;
pub mod synth;

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::{clear_grads, harvest_grads, ParamGroup};
use crate::pipeline::{argmax, sample_loss, PipelineParams, PipelineVars, Sample};
use crate::tensor::Tape;
use optim::{cosine_warmup_lr, AdamW};
use std::path::{Path, PathBuf};
use synth::{make_dataset, TaskKind};

/// Parameter-name prefixes frozen in each stage: stage 1 trains only the
/// connectors (encoder and decoder frozen), stage 2 unfreezes the decoder,
/// stage 3 trains everything.
pub fn stage_frozen_prefixes(stage: u8) -> Result<&'static [&'static str]> {
    match stage {
        1 => Ok(&["encoder.", "llm."]),
        2 => Ok(&["encoder."]),
        3 => Ok(&[]),
        other => Err(Error::Config(format!("stage must be 1, 2, or 3, got {other}"))),
    }
}

/// Marks every tensor trainable, then freezes the stage's prefixes.
pub fn apply_freeze(params: &mut PipelineParams, stage: u8) -> Result<()> {
    let frozen = stage_frozen_prefixes(stage)?;
    params.visit_mut("", &mut |name, t| {
        t.set_requires_grad(!frozen.iter().any(|p| name.starts_with(p)));
    });
    Ok(())
}

/// One recorded optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub stage: u8,
    pub lr: f64,
    pub loss: f64,
}

/// CSV rendering of a loss trace, one row per step.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,stage,lr,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.stage, r.lr, r.loss));
    }
    out
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: u8,
    pub trace: Vec<TraceRow>,
}

impl StageOutcome {
    pub fn final_loss(&self) -> f64 {
        self.trace.last().map(|r| r.loss).unwrap_or(f64::NAN)
    }
}

/// Settings for one stage run; derived from [`TrainConfig`] by the
/// curriculum, or built directly for ad-hoc runs.
#[derive(Debug, Clone)]
pub struct StageSettings {
    pub stage: u8,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
}

/// Runs one stage: applies the freeze map, then for each step accumulates
/// gradients over a batch, averages them, and takes one AdamW step at the
/// scheduled learning rate.
///
/// Batches sweep the dataset in order, wrapping around. A non-finite batch
/// loss aborts with the stage and step in the error.
pub fn train_stage(
    params: &mut PipelineParams,
    opt: &mut AdamW,
    data: &[Sample],
    s: &StageSettings,
) -> Result<StageOutcome> {
    if data.is_empty() || s.batch_size == 0 {
        return Err(Error::Config("training needs data and a positive batch".into()));
    }
    apply_freeze(params, s.stage)?;
    let mut trace = Vec::with_capacity(s.steps);
    for step in 0..s.steps {
        let lr = cosine_warmup_lr(s.peak_lr, step, s.steps, s.warmup_ratio);
        clear_grads(params);
        let mut batch_loss = 0.0;
        for i in 0..s.batch_size {
            let sample = &data[(step * s.batch_size + i) % data.len()];
            let mut tape = Tape::new();
            let vars = PipelineVars::bind(params, &mut tape)?;
            let (loss, _) = sample_loss(&mut tape, &vars, &params.config, sample)?;
            batch_loss += tape.data(loss)[0];
            tape.backward(loss)?;
            harvest_grads(params, &vars.bound, &tape)?;
        }
        batch_loss /= s.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Training {
                stage: s.stage,
                step,
                message: format!("batch loss became {batch_loss}"),
            });
        }
        let inv = 1.0 / s.batch_size as f64;
        params.visit_mut("", &mut |_, t| t.scale_grad(inv));
        opt.step(params, lr)?;
        trace.push(TraceRow {
            step,
            stage: s.stage,
            lr,
            loss: batch_loss,
        });
    }
    Ok(StageOutcome {
        stage: s.stage,
        trace,
    })
}

/// Dataset kind each curriculum stage trains on: captions first, counting
/// questions second, then the three-task mix.
pub fn stage_task(stage: u8) -> TaskKind {
    match stage {
        1 => TaskKind::ColorCaption,
        2 => TaskKind::CountVqa,
        _ => TaskKind::Mixed,
    }
}

/// Runs stages 1 to 3 in order with a fresh optimizer per stage. When
/// `out_dir` is given, writes `stage{n}.vfcp` checkpoints and a combined
/// `trace.csv` there.
pub fn run_curriculum(
    params: &mut PipelineParams,
    tcfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Vec<StageOutcome>, Vec<PathBuf>)> {
    tcfg.validate()?;
    let mut outcomes = Vec::new();
    let mut checkpoints = Vec::new();
    for stage in 1..=3u8 {
        let idx = (stage - 1) as usize;
        let data = make_dataset(
            stage_task(stage),
            tcfg.dataset_size,
            tcfg.image_size,
            tcfg.seed.wrapping_add(stage as u64),
        );
        let settings = StageSettings {
            stage,
            steps: tcfg.steps(idx),
            peak_lr: tcfg.lrs[idx],
            warmup_ratio: tcfg.warmup_ratio,
            batch_size: tcfg.batch_size,
        };
        let mut opt = AdamW::new(tcfg.adamw.clone());
        let outcome = train_stage(params, &mut opt, &data, &settings)?;
        if let Some(dir) = out_dir {
            let path = dir.join(format!("stage{stage}.vfcp"));
            checkpoint::save(params, &path)?;
            checkpoints.push(path);
        }
        outcomes.push(outcome);
    }
    if let Some(dir) = out_dir {
        let all: Vec<TraceRow> = outcomes.iter().flat_map(|o| o.trace.clone()).collect();
        std::fs::write(dir.join("trace.csv"), trace_csv(&all))?;
    }
    Ok((outcomes, checkpoints))
}

/// Mean per-token loss over samples, no gradients.
pub fn mean_loss(params: &PipelineParams, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for sample in samples {
        let mut tape = Tape::new();
        let vars = PipelineVars::bind(params, &mut tape)?;
        let (loss, _) = sample_loss(&mut tape, &vars, &params.config, sample)?;
        total += tape.data(loss)[0];
    }
    Ok(total / samples.len() as f64)
}

/// Teacher-forced accuracy: the fraction of target positions whose argmax
/// logit equals the target token.
pub fn token_accuracy(params: &PipelineParams, samples: &[Sample]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for sample in samples {
        let mut tape = Tape::new();
        let vars = PipelineVars::bind(params, &mut tape)?;
        let (_, trace) = sample_loss(&mut tape, &vars, &params.config, sample)?;
        let v = params.config.vocab_size;
        let logits = tape.data(trace.logits);
        let from = trace.text_offset + sample.prompt.len() - 1;
        for (k, &want) in sample.target.iter().enumerate() {
            let row = &logits[(from + k) * v..(from + k + 1) * v];
            if argmax(row) == want {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}
