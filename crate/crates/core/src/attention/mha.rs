use super::{CopeBias, Linear, cope_logit_bias, cope_positions_from_logits};
use crate::error::{Error, Result};
use crate::tensor::{Mask, Real, Tape, Var};

/// Query, key, value and output projections of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

fn head_dim(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::config("heads", format!("{heads} heads do not divide hidden size {d}")));
    }
    Ok(d / heads)
}

/// `[L, D] -> [H, L, D/H]`
pub fn split_heads<R: Real>(tape: &mut Tape<'_, R>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let dh = head_dim(s[1], heads)?;
    let r = tape.reshape(x, &[s[0], heads, dh])?;
    tape.permute(r, &[1, 0, 2])
}

/// `[H, L, dh] -> [L, H·dh]`
pub fn merge_heads<R: Real>(tape: &mut Tape<'_, R>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[1, 0, 2])?;
    tape.reshape(p, &[s[1], s[0] * s[2]])
}

/// Scaled dot-product attention over already split heads.
///
/// `q[H,Lq,dh]`, `k/v[H,Lk,dh]`. `mask` (suffix of `[H,Lq,Lk]`) drops
/// keys; `cope` adds a contextual position bias before the softmax, with
/// gates taken from the scaled logits.
pub fn attend<R: Real>(
    tape: &mut Tape<'_, R>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
    cope: Option<&CopeBias>,
) -> Result<Var> {
    let dh = *tape.shape(q).last().unwrap();
    let raw = tape.matmul_nt(q, k)?;
    let mut logits = tape.scale(raw, 1.0 / (dh as f64).sqrt())?;
    if let Some(c) = cope {
        let pos = cope_positions_from_logits(tape, logits, c.mode, mask, c.p_max)?;
        let bias = cope_logit_bias(tape, q, pos, c.table)?;
        logits = tape.add(logits, bias)?;
    }
    let weights = match mask {
        Some(m) => tape.masked_softmax(logits, m)?,
        None => {
            let axis = tape.shape(logits).len() - 1;
            tape.softmax(logits, axis)?
        }
    };
    tape.matmul(weights, v)
}

/// Multi-head attention of `q_in[Lq,D]` over `kv_in[Lk,D]`.
pub fn multi_head_attention<R: Real>(
    tape: &mut Tape<'_, R>,
    q_in: Var,
    kv_in: Var,
    w: &AttentionWeights,
    heads: usize,
    mask: Option<&Mask>,
    cope: Option<&CopeBias>,
) -> Result<Var> {
    let d = tape.shape(q_in)[1];
    head_dim(d, heads)?;
    let q = w.q.apply(tape, q_in)?;
    let k = w.k.apply(tape, kv_in)?;
    let v = w.v.apply(tape, kv_in)?;
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;
    let o = attend(tape, q, k, v, mask, cope)?;
    let o = merge_heads(tape, o)?;
    w.o.apply(tape, o)
}
