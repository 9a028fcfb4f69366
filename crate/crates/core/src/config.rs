//! Pipeline and trainer configuration, plus the flat key-value config file
//! format.
//!
//! Config files hold one `key = value` pair per line; `#` starts a comment.
//! Every key has a schema entry below; unknown keys are rejected by name.

use crate::error::{Error, Result};
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompressorKind {
    Conv2d,
    MaxPool2d,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Cross,
    Decoder,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// sigma = 1/sqrt(fan_in) everywhere.
    Stabilized,
    /// Unit-variance weights for projector, compressor, and cross-attention
    /// fusion; everything else stays stabilized. Trainable at width 64 but
    /// diverges at larger widths, so this is not the default.
    Faithful,
}

/// Structural hyperparameters of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Vision encoder width.
    pub d_v: usize,
    /// Vision encoder depth.
    pub l_ve: usize,
    /// Vision encoder feed-forward width.
    pub d_ff_v: usize,
    /// Decoder (and fusion) width.
    pub d_t: usize,
    /// Decoder depth.
    pub l_llm: usize,
    /// Decoder feed-forward width.
    pub d_ff_t: usize,
    /// Token vocabulary: 256 byte values plus specials.
    pub vocab_size: usize,
    pub patch_size: usize,
    /// Maximum visual tokens per image; sequences are padded to this length.
    pub patch_budget: usize,
    /// Visual tokens after compression.
    pub n_compressed: usize,
    /// Attention head count, shared by every attention site.
    pub heads: usize,
    /// Longest supported text sequence (positions are learned).
    pub max_text: usize,
    /// `None` feeds all `patch_budget` projected tokens to the decoder.
    pub compressor: Option<CompressorKind>,
    /// `None` passes text embeddings through unfused.
    pub fusion: Option<FusionKind>,
    /// Mask padded visual keys inside fusion attention. Disabling this is an
    /// ablation knob; padded keys then attract nonzero attention weight.
    pub fusion_mask_padded: bool,
    pub init: InitMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            d_v: 64,
            l_ve: 2,
            d_ff_v: 256,
            d_t: 64,
            l_llm: 2,
            d_ff_t: 256,
            vocab_size: 258,
            patch_size: 16,
            patch_budget: 256,
            n_compressed: 64,
            heads: 1,
            max_text: 64,
            compressor: Some(CompressorKind::Mlp),
            fusion: Some(FusionKind::Combined),
            fusion_mask_padded: true,
            init: InitMode::Stabilized,
        }
    }
}

impl PipelineConfig {
    /// 2B-class edge shape: a 1.5B-parameter decoder with a 400M-class
    /// vision tower. Used by the analytic cost model only; far too large to
    /// run here.
    pub fn large_preset() -> Self {
        PipelineConfig {
            d_v: 1152,
            l_ve: 27,
            d_ff_v: 4304,
            d_t: 1536,
            l_llm: 28,
            d_ff_t: 8960,
            vocab_size: 151_936,
            patch_size: 16,
            patch_budget: 256,
            n_compressed: 64,
            heads: 1,
            max_text: 64,
            compressor: Some(CompressorKind::Mlp),
            fusion: Some(FusionKind::Combined),
            fusion_mask_padded: true,
            init: InitMode::Stabilized,
        }
    }

    /// Reduced shape for fast training runs and tests: 8x8 patch grid, width
    /// 32, single-block towers.
    pub fn small_preset() -> Self {
        PipelineConfig {
            d_v: 32,
            l_ve: 1,
            d_ff_v: 128,
            d_t: 32,
            l_llm: 1,
            d_ff_t: 128,
            vocab_size: 258,
            patch_size: 16,
            patch_budget: 64,
            n_compressed: 16,
            heads: 1,
            max_text: 48,
            compressor: Some(CompressorKind::Mlp),
            fusion: Some(FusionKind::Combined),
            fusion_mask_padded: true,
            init: InitMode::Stabilized,
        }
    }

    pub fn with_fusion(mut self, fusion: Option<FusionKind>) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn with_compressor(mut self, compressor: Option<CompressorKind>) -> Self {
        self.compressor = compressor;
        self
    }

    /// Patch vector length: `patch_size^2 * 3`.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Visual rows entering the decoder: compressed count, or the full
    /// budget when compression is off.
    pub fn visual_rows(&self) -> usize {
        if self.compressor.is_some() {
            self.n_compressed
        } else {
            self.patch_budget
        }
    }

    /// Length of the learned position table. Sized for the uncompressed
    /// baseline so one table covers every variant.
    pub fn max_positions(&self) -> usize {
        self.patch_budget + self.max_text
    }

    /// Side of the square token grid the 2-D compressors operate on.
    pub fn grid_side(&self) -> Result<usize> {
        let side = (self.patch_budget as f64).sqrt().round() as usize;
        if side * side != self.patch_budget {
            return Err(Error::Config(format!(
                "patch_budget {} is not a perfect square, required by 2-D compressors",
                self.patch_budget
            )));
        }
        Ok(side)
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 11] = [
            ("d_v", self.d_v),
            ("l_ve", self.l_ve),
            ("d_ff_v", self.d_ff_v),
            ("d_t", self.d_t),
            ("l_llm", self.l_llm),
            ("d_ff_t", self.d_ff_t),
            ("patch_size", self.patch_size),
            ("patch_budget", self.patch_budget),
            ("n_compressed", self.n_compressed),
            ("heads", self.heads),
            ("max_text", self.max_text),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 258 {
            return Err(Error::Config(format!(
                "vocab_size {} too small: need 256 byte tokens plus bos/eos",
                self.vocab_size
            )));
        }
        if self.d_t % self.heads != 0 || self.d_v % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide d_t {} and d_v {}",
                self.heads, self.d_t, self.d_v
            )));
        }
        if self.compressor.is_some() && self.n_compressed >= self.patch_budget {
            return Err(Error::Config(format!(
                "n_compressed {} must be below patch_budget {}",
                self.n_compressed, self.patch_budget
            )));
        }
        if matches!(
            self.compressor,
            Some(CompressorKind::Conv2d) | Some(CompressorKind::MaxPool2d)
        ) {
            let side = self.grid_side()?;
            if side % 2 != 0 {
                return Err(Error::Config(format!(
                    "2-D compressors need an even token grid, got {side}x{side}"
                )));
            }
            let expect = (side / 2) * (side / 2);
            if self.n_compressed != expect {
                return Err(Error::Config(format!(
                    "n_compressed {} inconsistent with 2x2 stride-2 compression of a {side}x{side} grid (expected {expect})",
                    self.n_compressed
                )));
            }
        }
        Ok(())
    }
}

/// Optimizer constants. Betas and weight decay follow common AdamW practice;
/// the training schedule tables leave them unspecified.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Trainer settings shared by the three curriculum stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Distinct synthetic samples per stage dataset.
    pub dataset_size: usize,
    /// Passes over the dataset, per stage.
    pub epochs: [usize; 3],
    /// Peak learning rates, per stage. The cross-stage ordering
    /// lr1 > lr2 > lr3 mirrors full-scale practice scaled to desk size.
    pub lrs: [f64; 3],
    pub warmup_ratio: f64,
    pub adamw: AdamWConfig,
    /// Square side of rendered synthetic images, in pixels.
    pub image_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 8,
            dataset_size: 160,
            epochs: [15, 15, 10],
            lrs: [1e-3, 5e-4, 2.5e-5],
            warmup_ratio: 0.03,
            adamw: AdamWConfig::default(),
            image_size: 64,
        }
    }
}

impl TrainConfig {
    /// Optimizer steps stage `i` (0-based) runs.
    pub fn steps(&self, stage_index: usize) -> usize {
        self.epochs[stage_index] * self.dataset_size / self.batch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.dataset_size == 0 {
            return Err(Error::Config("batch_size and dataset_size must be positive".into()));
        }
        if self.dataset_size % self.batch_size != 0 {
            return Err(Error::Config(format!(
                "dataset_size {} must be a multiple of batch_size {}",
                self.dataset_size, self.batch_size
            )));
        }
        if self.epochs.iter().any(|&e| e == 0) {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.lrs[0] > self.lrs[1] && self.lrs[1] > self.lrs[2]) {
            return Err(Error::Config(format!(
                "stage learning rates must strictly decrease, got {:?}",
                self.lrs
            )));
        }
        if !(0.0..0.5).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio {} outside [0, 0.5)",
                self.warmup_ratio
            )));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a run needs: model shape plus trainer settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.train.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_str_checked(&text)
    }

    /// Parses overrides on top of defaults, then validates.
    pub fn from_str_checked(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("field '{key}': cannot parse '{value}'"))
            })
        }
        let p = &mut self.pipeline;
        let t = &mut self.train;
        match key {
            "d_v" => p.d_v = num(key, value)?,
            "l_ve" => p.l_ve = num(key, value)?,
            "d_ff_v" => p.d_ff_v = num(key, value)?,
            "d_t" => p.d_t = num(key, value)?,
            "l_llm" => p.l_llm = num(key, value)?,
            "d_ff_t" => p.d_ff_t = num(key, value)?,
            "vocab_size" => p.vocab_size = num(key, value)?,
            "patch_size" => p.patch_size = num(key, value)?,
            "patch_budget" => p.patch_budget = num(key, value)?,
            "n_compressed" => p.n_compressed = num(key, value)?,
            "heads" => p.heads = num(key, value)?,
            "max_text" => p.max_text = num(key, value)?,
            "compressor" => {
                p.compressor = match value {
                    "conv2d" => Some(CompressorKind::Conv2d),
                    "maxpool2d" => Some(CompressorKind::MaxPool2d),
                    "mlp" => Some(CompressorKind::Mlp),
                    "none" => None,
                    other => {
                        return Err(Error::Config(format!(
                            "field 'compressor': unknown value '{other}' (conv2d|maxpool2d|mlp|none)"
                        )))
                    }
                }
            }
            "fusion" => {
                p.fusion = match value {
                    "cross" => Some(FusionKind::Cross),
                    "decoder" => Some(FusionKind::Decoder),
                    "combined" => Some(FusionKind::Combined),
                    "none" => None,
                    other => {
                        return Err(Error::Config(format!(
                            "field 'fusion': unknown value '{other}' (cross|decoder|combined|none)"
                        )))
                    }
                }
            }
            "fusion_mask_padded" => p.fusion_mask_padded = parse_bool(key, value)?,
            "init" => {
                p.init = match value {
                    "stabilized" => InitMode::Stabilized,
                    "faithful" => InitMode::Faithful,
                    other => {
                        return Err(Error::Config(format!(
                            "field 'init': unknown value '{other}' (stabilized|faithful)"
                        )))
                    }
                }
            }
            "seed" => t.seed = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "dataset_size" => t.dataset_size = num(key, value)?,
            "stage1_epochs" => t.epochs[0] = num(key, value)?,
            "stage2_epochs" => t.epochs[1] = num(key, value)?,
            "stage3_epochs" => t.epochs[2] = num(key, value)?,
            "stage1_lr" => t.lrs[0] = num(key, value)?,
            "stage2_lr" => t.lrs[1] = num(key, value)?,
            "stage3_lr" => t.lrs[2] = num(key, value)?,
            "warmup_ratio" => t.warmup_ratio = num(key, value)?,
            "beta1" => t.adamw.beta1 = num(key, value)?,
            "beta2" => t.adamw.beta2 = num(key, value)?,
            "adam_eps" => t.adamw.eps = num(key, value)?,
            "weight_decay" => t.adamw.weight_decay = num(key, value)?,
            "image_size" => t.image_size = num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config field '{other}'")));
            }
        }
        Ok(())
    }

    /// Serializes every field in the file format; parsing the result
    /// reproduces the config.
    pub fn to_config_string(&self) -> String {
        let mut s = String::from("# pipeline\n");
        s.push_str(&pipeline_config_string(&self.pipeline));
        let t = &self.train;
        s.push_str("\n# trainer\n");
        s.push_str(&format!("seed = {}\n", t.seed));
        s.push_str(&format!("batch_size = {}\n", t.batch_size));
        s.push_str(&format!("dataset_size = {}\n", t.dataset_size));
        for (i, e) in t.epochs.iter().enumerate() {
            s.push_str(&format!("stage{}_epochs = {e}\n", i + 1));
        }
        for (i, lr) in t.lrs.iter().enumerate() {
            s.push_str(&format!("stage{}_lr = {lr}\n", i + 1));
        }
        s.push_str(&format!("warmup_ratio = {}\n", t.warmup_ratio));
        s.push_str(&format!("beta1 = {}\n", t.adamw.beta1));
        s.push_str(&format!("beta2 = {}\n", t.adamw.beta2));
        s.push_str(&format!("adam_eps = {}\n", t.adamw.eps));
        s.push_str(&format!("weight_decay = {}\n", t.adamw.weight_decay));
        s.push_str(&format!("image_size = {}\n", t.image_size));
        s
    }
}

/// Serializes just the pipeline fields (used for the checkpoint config
/// block).
pub fn pipeline_config_string(p: &PipelineConfig) -> String {
    let mut s = String::new();
    s.push_str(&format!("d_v = {}\n", p.d_v));
    s.push_str(&format!("l_ve = {}\n", p.l_ve));
    s.push_str(&format!("d_ff_v = {}\n", p.d_ff_v));
    s.push_str(&format!("d_t = {}\n", p.d_t));
    s.push_str(&format!("l_llm = {}\n", p.l_llm));
    s.push_str(&format!("d_ff_t = {}\n", p.d_ff_t));
    s.push_str(&format!("vocab_size = {}\n", p.vocab_size));
    s.push_str(&format!("patch_size = {}\n", p.patch_size));
    s.push_str(&format!("patch_budget = {}\n", p.patch_budget));
    s.push_str(&format!("n_compressed = {}\n", p.n_compressed));
    s.push_str(&format!("heads = {}\n", p.heads));
    s.push_str(&format!("max_text = {}\n", p.max_text));
    s.push_str(&format!("compressor = {}\n", kind_name(p.compressor)));
    s.push_str(&format!("fusion = {}\n", fusion_name(p.fusion)));
    s.push_str(&format!("fusion_mask_padded = {}\n", p.fusion_mask_padded));
    s.push_str(&format!(
        "init = {}\n",
        match p.init {
            InitMode::Stabilized => "stabilized",
            InitMode::Faithful => "faithful",
        }
    ));
    s
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "field '{key}': expected true or false, got '{other}'"
        ))),
    }
}

fn kind_name(k: Option<CompressorKind>) -> &'static str {
    match k {
        Some(CompressorKind::Conv2d) => "conv2d",
        Some(CompressorKind::MaxPool2d) => "maxpool2d",
        Some(CompressorKind::Mlp) => "mlp",
        None => "none",
    }
}

fn fusion_name(k: Option<FusionKind>) -> &'static str {
    match k {
        Some(FusionKind::Cross) => "cross",
        Some(FusionKind::Decoder) => "decoder",
        Some(FusionKind::Combined) => "combined",
        None => "none",
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(fusion_name(Some(*self)))
    }
}

impl fmt::Display for CompressorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(kind_name(Some(*self)))
    }
}
