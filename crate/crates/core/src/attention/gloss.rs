//! Deformable local attention over neighbouring frames.
//!
//! Each head owns `samples` learnable continuous offsets, bounded to
//! `[-radius, radius]`. Query frame `i` attends only to keys and values
//! interpolated at `i + offset`, so cost is `O(T · samples)` and frames
//! farther than `radius + 1` from `i` cannot influence it.

use super::{merge_heads, split_heads, AttentionWeights, CopeBias, CopeMode};
use super::cope_positions_from_logits;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GlossAttentionConfig {
    pub heads: usize,
    pub samples: usize,
    pub radius: usize,
}

impl Default for GlossAttentionConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            samples: 8,
            radius: 16,
        }
    }
}

impl GlossAttentionConfig {
    /// Offsets evenly spanning `[-radius, radius]`, repeated per head.
    pub fn initial_offsets(&self) -> Vec<f32> {
        let r = self.radius as f64;
        let per_head: Vec<f32> = if self.samples == 1 {
            vec![0.0]
        } else {
            (0..self.samples)
                .map(|s| (-r + 2.0 * r * s as f64 / (self.samples - 1) as f64) as f32)
                .collect()
        };
        per_head.iter().cycle().take(self.heads * self.samples).copied().collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GlossWeights {
    pub attn: AttentionWeights,
    /// `[heads, samples]`
    pub offsets: Var,
    /// Position table `[heads, p_max + 1, d_head]` and its cap.
    pub cope: Option<(Var, usize)>,
}

/// Gloss attention for `x[T, D]` whose first `valid_len` frames are real.
///
/// With CoPE, gates are accumulated over each query's samples in temporal
/// order (prefix mode).
pub fn gloss_attention<R: Real>(
    tape: &mut Tape<'_, R>,
    x: Var,
    w: &GlossWeights,
    cfg: &GlossAttentionConfig,
    valid_len: usize,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Shape {
            op: "gloss_attention",
            lhs: shape,
            rhs: vec![],
        });
    }
    let (t, d) = (shape[0], shape[1]);
    let h = cfg.heads;
    if h == 0 || d % h != 0 {
        return Err(Error::config("heads", format!("{h} heads do not divide hidden size {d}")));
    }
    let dh = d / h;

    let q = w.attn.q.apply(tape, x)?;
    let q = split_heads(tape, q, h)?;
    let q4 = tape.reshape(q, &[h, t, 1, dh])?;
    let k = w.attn.k.apply(tape, x)?;
    let v = w.attn.v.apply(tape, x)?;

    let r = cfg.radius as f64;
    let offsets = tape.clamp(w.offsets, -r, r)?;
    let ks = tape.deform_sample(k, offsets, h, valid_len)?;
    let vs = tape.deform_sample(v, offsets, h, valid_len)?;

    let raw = tape.matmul_nt(q4, ks)?;
    let mut logits = tape.scale(raw, 1.0 / (dh as f64).sqrt())?;
    if let Some((table, p_max)) = w.cope {
        let c = CopeBias {
            table,
            p_max,
            mode: CopeMode::Prefix,
        };
        let pos = cope_positions_from_logits(tape, logits, c.mode, None, c.p_max)?;
        let per_pos = tape.matmul_nt(q, c.table)?;
        let per_pos = tape.reshape(per_pos, &[h, t, 1, p_max + 1])?;
        let bias = tape.cope_interp(per_pos, pos)?;
        logits = tape.add(logits, bias)?;
    }
    let weights = tape.softmax(logits, 3)?;
    let o = tape.matmul(weights, vs)?;
    debug_assert_eq!(tape.shape(o), &[h, t, 1, dh]);
    let o = tape.reshape(o, &[h, t, dh])?;
    let o = merge_heads(tape, o)?;
    w.attn.o.apply(tape, o)
}
