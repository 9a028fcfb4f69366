//! Named traversal over parameter structs.
//!
//! Every parameter struct exposes its tensors through [`ParamGroup`] in a
//! fixed order under dotted names ("llm.block0.w_q"). Checkpointing,
//! freezing, the optimizer, and gradient harvesting all run over this one
//! traversal, so they agree on naming and order by construction.

use crate::tensor::{Tape, Tensor, ValId};

pub trait ParamGroup {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

/// Total element count across a group.
pub fn param_count(group: &dyn ParamGroup) -> u64 {
    let mut n = 0u64;
    group.visit("", &mut |_, t| n += t.numel() as u64);
    n
}

/// Sets `requires_grad` on every tensor in the group.
pub fn set_requires_grad(group: &mut dyn ParamGroup, flag: bool) {
    group.visit_mut("", &mut |_, t| t.set_requires_grad(flag));
}

/// Clears any stored gradients in the group.
pub fn clear_grads(group: &mut dyn ParamGroup) {
    group.visit_mut("", &mut |_, t| t.clear_grad());
}

/// Registers parameters on a tape while remembering (name, id) pairs, so
/// gradients can be copied back out after `backward`.
pub struct Binder<'t> {
    pub tape: &'t mut Tape,
    bound: Vec<(String, ValId)>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t mut Tape) -> Self {
        Binder {
            tape,
            bound: Vec::new(),
        }
    }

    pub fn bind(&mut self, name: impl Into<String>, tensor: &Tensor) -> ValId {
        let id = self.tape.leaf(tensor);
        self.bound.push((name.into(), id));
        id
    }

    pub fn bound(&self) -> &[(String, ValId)] {
        &self.bound
    }

    pub fn into_bound(self) -> Vec<(String, ValId)> {
        self.bound
    }
}

/// Accumulates tape gradients into the matching parameter tensors.
///
/// Adds rather than overwrites, so calling once per sample accumulates a
/// batch gradient. Only `requires_grad` tensors receive anything.
pub fn harvest_grads(
    group: &mut dyn ParamGroup,
    bound: &[(String, ValId)],
    tape: &Tape,
) -> crate::error::Result<()> {
    let mut by_name: std::collections::HashMap<&str, ValId> = std::collections::HashMap::new();
    for (name, id) in bound {
        by_name.insert(name.as_str(), *id);
    }
    let mut failure = None;
    group.visit_mut("", &mut |name, t| {
        if failure.is_some() || !t.requires_grad() {
            return;
        }
        let Some(&id) = by_name.get(name.as_str()) else {
            return; // parameter not bound in this pass (for example an unused module)
        };
        if let Some(g) = tape.grad(id) {
            if let Err(e) = t.accumulate_grad(g) {
                failure = Some(e);
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Collects `(name, clone)` pairs, the canonical serialization order.
pub fn named_tensors(group: &dyn ParamGroup) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    group.visit("", &mut |name, t| out.push((name, t.clone())));
    out
}
