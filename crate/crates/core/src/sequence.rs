//! Token sequences with validity masks.

use crate::error::{Error, Result};
use crate::tensor::{Tape, ValId};

/// A `[len, dim]` token matrix on a tape, plus a 0/1 validity mask.
///
/// Valid tokens occupy a prefix: the mask is `valid_count` ones followed by
/// zeros. Padded rows are kept exactly all-zero by the stages that produce
/// them, and masked attention gives padded keys exactly-zero weight.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: ValId,
    pub mask: Vec<f64>,
    pub valid_count: usize,
    pub len: usize,
    pub dim: usize,
}

impl TokenSequence {
    /// Wraps a tape value whose first `valid_count` rows are valid.
    pub fn new(tape: &Tape, tokens: ValId, valid_count: usize) -> Result<Self> {
        let shape = tape.shape(tokens);
        if shape.len() != 2 {
            return Err(Error::Contract(format!(
                "token sequence must be rank 2, got {shape:?}"
            )));
        }
        let (len, dim) = (shape[0], shape[1]);
        if valid_count > len {
            return Err(Error::Contract(format!(
                "valid_count {valid_count} exceeds sequence length {len}"
            )));
        }
        let mut mask = vec![0.0; len];
        for m in mask.iter_mut().take(valid_count) {
            *m = 1.0;
        }
        Ok(TokenSequence {
            tokens,
            mask,
            valid_count,
            len,
            dim,
        })
    }

    /// Wraps a tape value with every row valid.
    pub fn all_valid(tape: &Tape, tokens: ValId) -> Result<Self> {
        let len = tape.shape(tokens)[0];
        Self::new(tape, tokens, len)
    }

    pub fn is_fully_valid(&self) -> bool {
        self.valid_count == self.len
    }
}
