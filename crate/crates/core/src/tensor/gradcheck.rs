//! Finite-difference gradient verification.
//!
//! A scenario is a set of named leaf tensors plus a closure that builds a
//! scalar loss from them on a fresh tape. The harness runs one analytic
//! backward pass, then probes random parameter entries with central
//! differences and compares.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, ValId};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    /// Central-difference step.
    pub epsilon: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Number of random (tensor, entry) probes.
    pub probes: usize,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            epsilon: 1e-5,
            tolerance: 1e-4,
            probes: 100,
        }
    }
}

/// Worst single probe seen during a check.
#[derive(Debug, Clone)]
pub struct ProbeRecord {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub group: String,
    pub probes: usize,
    pub max_rel_error: f64,
    pub worst: Option<ProbeRecord>,
    pub passed: bool,
}

/// Builds the loss from leaves bound onto `tape` in declaration order.
pub type LossBuilder<'a> = dyn FnMut(&mut Tape, &[ValId]) -> Result<ValId> + 'a;

/// Checks analytic gradients of `leaves` against central differences.
///
/// Only leaves with `requires_grad` set are probed; the rest participate in
/// the forward pass as constants. The leaf data is restored after each probe,
/// so `leaves` is unchanged on return.
pub fn check_group<R: Rng>(
    group: &str,
    settings: &GradCheckSettings,
    rng: &mut R,
    leaves: &mut [(String, Tensor)],
    build: &mut LossBuilder,
) -> Result<GradCheckReport> {
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<ValId> = leaves.iter().map(|(_, t)| tape.leaf(t)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let grads: Vec<Option<Vec<f64>>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()))
        .collect();
    drop(tape);

    let probe_targets: Vec<usize> = leaves
        .iter()
        .enumerate()
        .filter(|(_, (_, t))| t.requires_grad() && t.numel() > 0)
        .map(|(i, _)| i)
        .collect();
    if probe_targets.is_empty() {
        return Ok(GradCheckReport {
            group: group.to_string(),
            probes: 0,
            max_rel_error: 0.0,
            worst: None,
            passed: true,
        });
    }

    let mut max_rel = 0.0f64;
    let mut worst = None;
    for _ in 0..settings.probes {
        let li = probe_targets[rng.gen_range(0..probe_targets.len())];
        let idx = rng.gen_range(0..leaves[li].1.numel());
        let original = leaves[li].1.data()[idx];

        let eval = |value: f64, leaves: &mut [(String, Tensor)], build: &mut LossBuilder| -> Result<f64> {
            leaves[li].1.data_mut()[idx] = value;
            let mut tape = Tape::new();
            let ids: Vec<ValId> = leaves.iter().map(|(_, t)| tape.leaf(t)).collect();
            let loss = build(&mut tape, &ids)?;
            Ok(tape.data(loss)[0])
        };
        let plus = eval(original + settings.epsilon, leaves, build)?;
        let minus = eval(original - settings.epsilon, leaves, build)?;
        leaves[li].1.data_mut()[idx] = original;

        let numeric = (plus - minus) / (2.0 * settings.epsilon);
        let analytic = grads[li]
            .as_ref()
            .map(|g| g[idx])
            .unwrap_or(0.0);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
            worst = Some(ProbeRecord {
                tensor: leaves[li].0.clone(),
                index: idx,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }

    Ok(GradCheckReport {
        group: group.to_string(),
        probes: settings.probes,
        max_rel_error: max_rel,
        worst,
        passed: max_rel < settings.tolerance,
    })
}
