//! Encoder and decoder stacks.

use super::{conv_module, Forward, ModelConfig};
use crate::attention::{
    ape_add, ape_add_at, causal_mask, gloss_attention, multi_head_attention, ApeTable, CopeBias, GlossWeights,
};
use crate::error::{Error, Result};
use crate::tensor::{Mask, Real, Var};

/// `Linear → ReLU6 → Dropout → Linear`
pub fn feed_forward<R: Real>(fwd: &mut Forward<'_, '_, R>, prefix: &str, x: Var) -> Result<Var> {
    let w1 = fwd.linear(&format!("{prefix}.w1"))?;
    let w2 = fwd.linear(&format!("{prefix}.w2"))?;
    let h = w1.apply(fwd.tape, x)?;
    let h = fwd.tape.relu6(h)?;
    let h = fwd.dropout(h)?;
    w2.apply(fwd.tape, h)
}

/// Embeds `frames[T, F]` and adds absolute positions.
pub fn embed_frames<R: Real>(
    fwd: &mut Forward<'_, '_, R>,
    cfg: &ModelConfig,
    ape: &ApeTable,
    frames: Var,
    keep: &[bool],
) -> Result<Var> {
    let shape = fwd.tape.shape(frames).to_vec();
    if shape.len() != 2 || shape[1] != cfg.feature_dim {
        return Err(Error::config(
            "feature_dim",
            format!("frames have shape {shape:?}, model expects [T, {}]", cfg.feature_dim),
        ));
    }
    if keep.len() != shape[0] {
        return Err(Error::Shape {
            op: "embed_frames",
            lhs: shape,
            rhs: vec![keep.len()],
        });
    }
    let proj = fwd.linear("frame_proj")?;
    let h = proj.apply(fwd.tape, frames)?;
    let h = if cfg.use_ape {
        ape_add(fwd.tape, h, ape, cfg.ape_scale_factor())?
    } else {
        fwd.tape.scale(h, cfg.ape_scale_factor())?
    };
    let h = fwd.dropout(h)?;
    fwd.zero_rows(h, keep)
}

/// One pre-LN encoder layer: gloss attention, convolution, feed-forward.
pub fn encoder_layer<R: Real>(
    fwd: &mut Forward<'_, '_, R>,
    cfg: &ModelConfig,
    layer: usize,
    h: Var,
    keep: &[bool],
) -> Result<Var> {
    let p = format!("enc.{layer}");
    let valid = keep.iter().take_while(|&&k| k).count().max(1);

    let a = fwd.layer_norm(h, &format!("{p}.attn_norm"), cfg.ln_eps)?;
    let attn = fwd.attention(&format!("{p}.gloss"))?;
    let offsets = fwd.param(&format!("{p}.gloss.offsets"))?;
    let cope = if cfg.cope_in_gloss() {
        Some((fwd.param(&format!("{p}.gloss.cope"))?, cfg.cope_p_max))
    } else {
        None
    };
    let w = GlossWeights { attn, offsets, cope };
    let a = gloss_attention(fwd.tape, a, &w, &cfg.gloss(), valid)?;
    let a = fwd.dropout(a)?;
    let h = fwd.tape.add(h, a)?;
    let h = fwd.zero_rows(h, keep)?;

    let h = conv_module(fwd, cfg, &format!("{p}.conv"), h, keep)?;

    let f = fwd.layer_norm(h, &format!("{p}.ff_norm"), cfg.ln_eps)?;
    let f = feed_forward(fwd, &format!("{p}.ff"), f)?;
    let f = fwd.dropout(f)?;
    let h = fwd.tape.add(h, f)?;
    fwd.zero_rows(h, keep)
}

/// Full encoder: `frames[T, F]` with validity `keep` to `[T, D]`.
///
/// Padded frames must form a suffix; their output rows are zero.
pub fn encode<R: Real>(
    fwd: &mut Forward<'_, '_, R>,
    cfg: &ModelConfig,
    ape: &ApeTable,
    frames: Var,
    keep: &[bool],
) -> Result<Var> {
    if keep.first() != Some(&true) {
        return Err(Error::invalid("encode: sequence has no valid frames"));
    }
    let mut h = embed_frames(fwd, cfg, ape, frames, keep)?;
    for l in 0..cfg.enc_layers {
        h = encoder_layer(fwd, cfg, l, h, keep)?;
    }
    let h = fwd.layer_norm(h, "enc.final_norm", cfg.ln_eps)?;
    fwd.zero_rows(h, keep)
}

/// Key mask over source frames, or `None` when nothing is padded.
pub fn source_mask(keep: &[bool]) -> Result<Option<Mask>> {
    if keep.iter().all(|&k| k) {
        Ok(None)
    } else {
        Mask::new(vec![keep.len()], keep.to_vec()).map(Some)
    }
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::invalid("decoder input is empty"));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::Index {
            op: "token_embed",
            index: t as usize,
            size: cfg.vocab,
        });
    }
    Ok(())
}

/// Token embedding plus positions starting at `start`.
pub fn embed_tokens<R: Real>(
    fwd: &mut Forward<'_, '_, R>,
    cfg: &ModelConfig,
    ape: &ApeTable,
    tokens: &[u32],
    start: usize,
) -> Result<Var> {
    check_tokens(cfg, tokens)?;
    let table = fwd.param("token_embed")?;
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let e = fwd.tape.embedding(table, &ids)?;
    let e = if cfg.use_ape {
        ape_add_at(fwd.tape, e, ape, cfg.ape_scale_factor(), start)?
    } else {
        fwd.tape.scale(e, cfg.ape_scale_factor())?
    };
    fwd.dropout(e)
}

pub(crate) fn cross_cope<R: Real>(
    fwd: &mut Forward<'_, '_, R>,
    cfg: &ModelConfig,
    layer: usize,
) -> Result<Option<CopeBias>> {
    if !cfg.cope_in_cross() {
        return Ok(None);
    }
    Ok(Some(CopeBias {
        table: fwd.param(&format!("dec.{layer}.cross_attn.cope"))?,
        p_max: cfg.cope_p_max,
        mode: cfg.cope_mode,
    }))
}

/// One pre-LN decoder layer over the whole target prefix.
pub fn decoder_layer<R: Real>(
    fwd: &mut Forward<'_, '_, R>,
    cfg: &ModelConfig,
    layer: usize,
    e: Var,
    memory: Var,
    src_mask: Option<&Mask>,
) -> Result<Var> {
    let p = format!("dec.{layer}");
    let heads = cfg.heads();
    let l = fwd.tape.shape(e)[0];

    let a = fwd.layer_norm(e, &format!("{p}.self_norm"), cfg.ln_eps)?;
    let w = fwd.attention(&format!("{p}.self_attn"))?;
    let causal = causal_mask(l);
    let a = multi_head_attention(fwd.tape, a, a, &w, heads, Some(&causal), None)?;
    let a = fwd.dropout(a)?;
    let e = fwd.tape.add(e, a)?;

    let c = fwd.layer_norm(e, &format!("{p}.cross_norm"), cfg.ln_eps)?;
    let w = fwd.attention(&format!("{p}.cross_attn"))?;
    let cope = cross_cope(fwd, cfg, layer)?;
    let c = multi_head_attention(fwd.tape, c, memory, &w, heads, src_mask, cope.as_ref())?;
    let c = fwd.dropout(c)?;
    let e = fwd.tape.add(e, c)?;

    let f = fwd.layer_norm(e, &format!("{p}.ff_norm"), cfg.ln_eps)?;
    let f = feed_forward(fwd, &format!("{p}.ff"), f)?;
    let f = fwd.dropout(f)?;
    fwd.tape.add(e, f)
}

/// Final norm and vocabulary projection `[L, D] -> [L, V]`.
pub fn output_logits<R: Real>(fwd: &mut Forward<'_, '_, R>, cfg: &ModelConfig, e: Var) -> Result<Var> {
    let e = fwd.layer_norm(e, "dec.final_norm", cfg.ln_eps)?;
    if cfg.tie_output_embedding {
        let table = fwd.param("token_embed")?;
        fwd.tape.matmul_nt(e, table)
    } else {
        let w = fwd.param("output_proj")?;
        fwd.tape.matmul(e, w)
    }
}

/// Teacher-forced decoder: `tokens` (starting with BOS) to logits `[L, V]`.
pub fn decode<R: Real>(
    fwd: &mut Forward<'_, '_, R>,
    cfg: &ModelConfig,
    ape: &ApeTable,
    tokens: &[u32],
    memory: Var,
    src_keep: &[bool],
) -> Result<Var> {
    let mask = source_mask(src_keep)?;
    let mut e = embed_tokens(fwd, cfg, ape, tokens, 0)?;
    for l in 0..cfg.dec_layers {
        e = decoder_layer(fwd, cfg, l, e, memory, mask.as_ref())?;
    }
    output_logits(fwd, cfg, e)
}
