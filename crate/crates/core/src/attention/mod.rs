//! Position encodings and attention mechanisms.
//!
//! Everything here works on [`Var`]s recorded on a [`Tape`], with the
//! learnable weights passed in explicitly, so the same code serves training,
//! gradient checking and cached incremental decoding.

mod ape;
mod cope;
mod gloss;
mod masks;
mod mha;

pub use ape::{ape_add, ape_add_at, ApeTable};
pub use cope::{cope_logit_bias, cope_positions, cope_positions_from_logits, CopeBias, CopeMode};
pub use gloss::{gloss_attention, GlossAttentionConfig, GlossWeights};
pub use masks::{build_masks, causal_mask, padding_keep, MaskSet};
pub use mha::{attend, merge_heads, multi_head_attention, split_heads, AttentionWeights};

use crate::error::Result;
use crate::tensor::{Real, Tape, Var};

/// Logit value that masked positions behave as.
pub const MASK_FILL: f64 = -1e9;

/// Affine map `x · weight + bias` with `weight` stored `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn apply<R: Real>(&self, tape: &mut Tape<'_, R>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }
}
