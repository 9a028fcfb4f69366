//! `visfuse`: cost reports, gradient checks, training runs, and greedy
//! generation for the compression-fusion visual token pipeline.
//!
//! Exit codes: 0 on success, 1 when a verification check fails, 2 for
//! usage, config, or input-file problems.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use visfuse_core::config::RunConfig;
use visfuse_core::cost::{analytic_flops, compare_variants, render_csv, render_table, variant_configs};
use visfuse_core::pipeline::{generate, PipelineParams};
use visfuse_core::tensor::gradcheck::GradCheckSettings;
use visfuse_core::train::optim::AdamW;
use visfuse_core::train::synth::make_dataset;
use visfuse_core::train::{run_curriculum, stage_task, trace_csv, train_stage, StageSettings};
use visfuse_core::verify::check_all_groups;
use visfuse_core::{checkpoint, tokenizer, vision, Error};

/// Environment variable holding the default config path when `--config`
/// is not given.
const CONFIG_ENV: &str = "VISFUSE_CONFIG";

const VERSION_STRING: &str = concat!("visfuse-", env!("CARGO_PKG_VERSION"));

#[derive(Parser)]
#[command(
    name = "visfuse",
    version,
    about = "Compression-fusion visual token pipeline tools",
    long_about = "Cost reports, gradient checks, staged training, and greedy generation.\n\
                  Config files are flat `key = value` text; set VISFUSE_CONFIG to use one\n\
                  by default. Exit codes: 0 success, 1 check failure, 2 usage/config error."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print per-stage multiply-add counts from the analytic cost model.
    Flops {
        /// Config file; defaults to $VISFUSE_CONFIG, then built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Text tokens alongside the image.
        #[arg(long, default_value_t = 16)]
        ntext: usize,
        /// Report a single variant: baseline, compress, cross, decoder, or
        /// combined.
        #[arg(long, conflicts_with = "all")]
        variant: Option<String>,
        /// Report all five variants (the default when --variant is absent).
        #[arg(long)]
        all: bool,
        /// Emit CSV instead of the aligned table.
        #[arg(long)]
        csv: bool,
    },
    /// Verify analytic gradients of every parameter group against central
    /// differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Random probes per parameter group.
        #[arg(long, default_value_t = 100)]
        probes: usize,
    },
    /// Train one stage (from fresh parameters) or the full three-stage
    /// curriculum, writing checkpoints, a loss trace, and a run manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// 1, 2, 3, or all.
        #[arg(long)]
        stage: String,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy generation from a checkpoint, an image, and a byte prompt.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PPM (P6) or raw-tensor image file.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 32)]
        max_steps: usize,
    },
}

/// A command failure carrying its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn check(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            // A diverging run is a failed check, not a usage problem.
            Error::Training { .. } => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Loads the config from the flag, the environment variable, or defaults;
/// returns it with a description of where it came from.
fn load_config(flag: Option<&Path>) -> Result<(RunConfig, String), Failure> {
    if let Some(path) = flag {
        let cfg = RunConfig::from_file(path)?;
        return Ok((cfg, path.display().to_string()));
    }
    if let Ok(path) = std::env::var(CONFIG_ENV) {
        if !path.is_empty() {
            let cfg = RunConfig::from_file(Path::new(&path))?;
            return Ok((cfg, path));
        }
    }
    Ok((RunConfig::default(), "(built-in defaults)".to_string()))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Flops {
            config,
            ntext,
            variant,
            all: _,
            csv,
        } => cmd_flops(config.as_deref(), ntext, variant.as_deref(), csv),
        Command::Gradcheck {
            config,
            seed,
            tolerance,
            probes,
        } => cmd_gradcheck(config.as_deref(), seed, tolerance, probes),
        Command::Train { config, stage, out } => cmd_train(config.as_deref(), &stage, &out),
        Command::Generate {
            checkpoint,
            image,
            prompt,
            max_steps,
        } => cmd_generate(&checkpoint, &image, &prompt, max_steps),
    }
}

fn cmd_flops(
    config: Option<&Path>,
    ntext: usize,
    variant: Option<&str>,
    csv: bool,
) -> Result<(), Failure> {
    let (run_cfg, _) = load_config(config)?;
    let base = run_cfg.pipeline;
    let reports = match variant {
        Some(name) => {
            let configs = variant_configs(&base);
            let found = configs
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| {
                    Failure::usage(format!(
                        "unknown variant '{name}' (baseline|compress|cross|decoder|combined)"
                    ))
                })?;
            let mut report = analytic_flops(&found.1, ntext)?;
            report.variant = found.0.to_string();
            vec![report]
        }
        None => compare_variants(&base, ntext)?,
    };
    if csv {
        print!("{}", render_csv(&reports));
    } else {
        print!("{}", render_table(&reports));
    }
    Ok(())
}

fn cmd_gradcheck(
    config: Option<&Path>,
    seed: u64,
    tolerance: f64,
    probes: usize,
) -> Result<(), Failure> {
    let (run_cfg, _) = load_config(config)?;
    let settings = GradCheckSettings {
        tolerance,
        probes,
        ..GradCheckSettings::default()
    };
    let reports = check_all_groups(&run_cfg.pipeline, seed, &settings)?;
    let mut failures = 0usize;
    for r in &reports {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!(
            "{status}  {:<22} max rel error {:.3e}  ({} probes)",
            r.group, r.max_rel_error, r.probes
        );
        if !r.passed {
            failures += 1;
            if let Some(w) = &r.worst {
                println!(
                    "      worst tensor {} [{}]: analytic {:.6e}, numeric {:.6e}",
                    w.tensor, w.index, w.analytic, w.numeric
                );
            }
        }
    }
    if failures > 0 {
        return Err(Failure::check(format!(
            "gradient check failed for {failures} of {} groups at tolerance {tolerance:e}",
            reports.len()
        )));
    }
    Ok(())
}

/// Writes the run manifest every output directory must carry.
fn write_manifest(
    out: &Path,
    command: &str,
    config_source: &str,
    seed: u64,
) -> Result<(), Failure> {
    let text = format!(
        "command = {command}\nconfig = {config_source}\nseed = {seed}\noutput = {}\nversion = {VERSION_STRING}\n",
        out.display()
    );
    std::fs::write(out.join("manifest.txt"), text)
        .map_err(|e| Failure::usage(format!("cannot write manifest: {e}")))?;
    Ok(())
}

fn cmd_train(config: Option<&Path>, stage: &str, out: &Path) -> Result<(), Failure> {
    let (run_cfg, source) = load_config(config)?;
    run_cfg.validate()?;
    std::fs::create_dir_all(out)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", out.display())))?;
    let tcfg = run_cfg.train;
    write_manifest(out, &format!("train --stage {stage}"), &source, tcfg.seed)?;

    let mut params = PipelineParams::init(run_cfg.pipeline, tcfg.seed)?;
    match stage {
        "all" => {
            let (outcomes, paths) = run_curriculum(&mut params, &tcfg, Some(out))?;
            for o in &outcomes {
                println!(
                    "stage {}: {} steps, final loss {:.4} nats/token",
                    o.stage,
                    o.trace.len(),
                    o.final_loss()
                );
            }
            for p in &paths {
                println!("wrote {}", p.display());
            }
        }
        "1" | "2" | "3" => {
            let n: u8 = stage.parse().unwrap();
            let idx = (n - 1) as usize;
            let data = make_dataset(
                stage_task(n),
                tcfg.dataset_size,
                tcfg.image_size,
                tcfg.seed.wrapping_add(n as u64),
            );
            let settings = StageSettings {
                stage: n,
                steps: tcfg.steps(idx),
                peak_lr: tcfg.lrs[idx],
                warmup_ratio: tcfg.warmup_ratio,
                batch_size: tcfg.batch_size,
            };
            let mut opt = AdamW::new(tcfg.adamw.clone());
            let outcome = train_stage(&mut params, &mut opt, &data, &settings)?;
            let path = out.join(format!("stage{n}.vfcp"));
            checkpoint::save(&params, &path)?;
            std::fs::write(out.join("trace.csv"), trace_csv(&outcome.trace))
                .map_err(|e| Failure::usage(format!("cannot write trace: {e}")))?;
            println!(
                "stage {n}: {} steps, final loss {:.4} nats/token",
                outcome.trace.len(),
                outcome.final_loss()
            );
            println!("wrote {}", path.display());
        }
        other => {
            return Err(Failure::usage(format!(
                "--stage must be 1, 2, 3, or all, got '{other}'"
            )))
        }
    }
    Ok(())
}

fn cmd_generate(
    checkpoint_path: &Path,
    image_path: &Path,
    prompt: &str,
    max_steps: usize,
) -> Result<(), Failure> {
    if !checkpoint_path.exists() {
        return Err(Failure::usage(format!(
            "checkpoint not found: {}",
            checkpoint_path.display()
        )));
    }
    let params = checkpoint::load(checkpoint_path)?;
    let image = vision::load_image(image_path)?;
    let prompt_ids = tokenizer::prompt_ids(prompt);
    let generated = generate(&params, &image, &prompt_ids, max_steps)?;
    println!("prompt ids: {prompt_ids:?}");
    println!("generated ids: {generated:?}");
    println!("decoded: {}", tokenizer::decode(&generated));
    Ok(())
}
