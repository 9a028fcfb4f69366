//! Statistical checks on the two weight-initialization modes: faithful
//! mode draws connector weights from a unit-variance normal, while the
//! default stabilized mode scales them by 1/sqrt(fan_in). The decoder and
//! encoder stay stabilized in both modes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use visfuse_core::config::{InitMode, PipelineConfig};
use visfuse_core::connectors::ProjectorParams;
use visfuse_core::fusion::CrossParams;
use visfuse_core::llm::LlmParams;

fn mean_and_var(data: &[f64]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[test]
fn faithful_projector_weights_have_unit_variance() {
    // A 1000x1000 weight gives a million samples; the sample variance of a
    // unit normal then concentrates within about 0.3% of 1, so the 1%
    // margin is a real distribution check, not a tautology.
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let params = ProjectorParams::init(1000, 1000, InitMode::Faithful, &mut rng);
    assert_eq!(params.linear1.numel(), 1_000_000);
    let (mean, var) = mean_and_var(params.linear1.data());
    assert!(mean.abs() < 0.01, "mean {mean} should be near zero");
    assert!((var - 1.0).abs() < 0.01, "variance {var} should be near one");
}

#[test]
fn stabilized_projector_weights_scale_with_fan_in() {
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let params = ProjectorParams::init(1000, 1000, InitMode::Stabilized, &mut rng);
    let (_, var) = mean_and_var(params.linear1.data());
    let expected = 1.0 / 1000.0;
    assert!(
        (var - expected).abs() < 0.05 * expected,
        "variance {var} should be near 1/fan_in = {expected}"
    );
}

#[test]
fn faithful_cross_fusion_weights_have_unit_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2026);
    let params = CrossParams::init(256, InitMode::Faithful, &mut rng);
    let (_, var) = mean_and_var(params.w_q.data());
    assert!((var - 1.0).abs() < 0.05, "variance {var} should be near one");
}

#[test]
fn decoder_stays_stabilized_in_faithful_mode() {
    // The faithful flag widens only the connector initializations; the
    // decoder keeps 1/sqrt(d_t) embeddings either way.
    let cfg = PipelineConfig {
        init: InitMode::Faithful,
        ..PipelineConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2027);
    let params = LlmParams::init(&cfg, &mut rng);
    let (_, var) = mean_and_var(params.embed.data());
    let expected = 1.0 / cfg.d_t as f64;
    assert!(
        (var - expected).abs() < 0.1 * expected,
        "embedding variance {var} should stay near {expected}"
    );
}
