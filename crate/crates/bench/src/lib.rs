//! Shared fixtures for the benchmarks: a reduced-width config whose
//! structure matches the default (256-patch budget, 4:1 compression), plus
//! prebuilt inputs, so individual benches measure compute rather than
//! setup.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visfuse_core::config::{CompressorKind, FusionKind, PipelineConfig};
use visfuse_core::pipeline::PipelineParams;
use visfuse_core::vision::ImageInput;

/// Benchmark config: full 256-token visual budget at width 32.
pub fn bench_config(compressor: Option<CompressorKind>, fusion: Option<FusionKind>) -> PipelineConfig {
    PipelineConfig {
        d_v: 32,
        l_ve: 1,
        d_ff_v: 64,
        d_t: 32,
        l_llm: 1,
        d_ff_t: 64,
        max_text: 32,
        compressor,
        fusion,
        ..PipelineConfig::default()
    }
}

/// The five comparison variants by name, in the reporting order.
pub fn variant(name: &str) -> PipelineConfig {
    match name {
        "baseline" => bench_config(None, None),
        "compress" => bench_config(Some(CompressorKind::Mlp), None),
        "cross" => bench_config(Some(CompressorKind::Mlp), Some(FusionKind::Cross)),
        "decoder" => bench_config(Some(CompressorKind::Mlp), Some(FusionKind::Decoder)),
        "combined" => bench_config(Some(CompressorKind::Mlp), Some(FusionKind::Combined)),
        other => panic!("unknown variant {other}"),
    }
}

pub fn seeded_params(cfg: PipelineConfig, seed: u64) -> PipelineParams {
    PipelineParams::init(cfg, seed).expect("benchmark config should validate")
}

/// A 256x256 image, which fills the patch budget exactly.
pub fn full_budget_image(seed: u64) -> ImageInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..256 * 256 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    ImageInput::new(256, 256, pixels).expect("pixel count matches dimensions")
}

pub fn prompt_ids(n: usize) -> Vec<usize> {
    (0..n).map(|i| 1 + (i * 31) % 255).collect()
}
