//! Cached incremental decoding.
//!
//! The encoder runs once per source and the cross-attention keys and values
//! of every decoder layer are projected up front. Each decoder step then
//! embeds one token, appends its self-attention keys and values to the
//! per-layer cache and attends over the cache. The arithmetic matches the
//! teacher-forced decoder row for row.

use super::layers::{cross_cope, embed_tokens, encode, feed_forward, output_logits, source_mask};
use super::{Forward, Signformer};
use crate::attention::{attend, merge_heads, padding_keep, split_heads};
use crate::error::{Error, Result};
use crate::tensor::{Mask, Tape, Tensor};

/// Encoder output plus per-layer projected cross-attention keys/values.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    pub memory: Tensor,
    pub keep: Vec<bool>,
    cross: Vec<(Vec<f32>, Vec<f32>)>,
}

impl EncodedSource {
    pub fn frames(&self) -> usize {
        self.keep.len()
    }
}

/// Tokens consumed so far and their cached self-attention keys/values.
#[derive(Clone, Debug, Default)]
pub struct DecoderState {
    pub tokens: Vec<u32>,
    cache: Vec<(Vec<f32>, Vec<f32>)>,
}

impl DecoderState {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl Signformer {
    /// Runs the encoder over the first `valid_len` rows of `frames[T, F]`.
    pub fn encode(&self, frames: &Tensor, valid_len: usize) -> Result<EncodedSource> {
        let cfg = &self.cfg;
        let t = frames.shape()[0];
        if valid_len == 0 || valid_len > t {
            return Err(Error::invalid(format!("valid length {valid_len} for {t} frames")));
        }
        let keep = padding_keep(valid_len, t);
        let mut tape = Tape::<f32>::new();
        let mut fwd = Forward::eval(&mut tape, &self.params);
        let x = fwd.tape.leaf(frames);
        let memory = encode(&mut fwd, cfg, &self.ape, x, &keep)?;
        let mut cross = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            let w = fwd.attention(&format!("dec.{l}.cross_attn"))?;
            let k = w.k.apply(fwd.tape, memory)?;
            let v = w.v.apply(fwd.tape, memory)?;
            cross.push((fwd.tape.value(k).to_vec(), fwd.tape.value(v).to_vec()));
        }
        Ok(EncodedSource {
            memory: fwd.tape.to_tensor(memory),
            keep,
            cross,
        })
    }

    pub fn start(&self) -> DecoderState {
        DecoderState {
            tokens: Vec::new(),
            cache: vec![(Vec::new(), Vec::new()); self.cfg.dec_layers],
        }
    }

    /// Feeds `token` and returns next-token logits `[V]`.
    pub fn step(&self, src: &EncodedSource, state: &mut DecoderState, token: u32) -> Result<Vec<f32>> {
        let cfg = &self.cfg;
        let (d, heads) = (cfg.hidden, cfg.heads());
        let pos = state.len();
        let t_src = src.frames();
        let src_mask = source_mask(&src.keep)?;
        let mut tape = Tape::<f32>::new();
        let mut fwd = Forward::eval(&mut tape, &self.params);
        let mut e = embed_tokens(&mut fwd, cfg, &self.ape, &[token], pos)?;
        let self_mask = Mask::new(vec![pos + 1], vec![true; pos + 1])?;
        for l in 0..cfg.dec_layers {
            let p = format!("dec.{l}");

            let a = fwd.layer_norm(e, &format!("{p}.self_norm"), cfg.ln_eps)?;
            let w = fwd.attention(&format!("{p}.self_attn"))?;
            let q = w.q.apply(fwd.tape, a)?;
            let k = w.k.apply(fwd.tape, a)?;
            let v = w.v.apply(fwd.tape, a)?;
            let (kc, vc) = &mut state.cache[l];
            kc.extend_from_slice(fwd.tape.value(k));
            vc.extend_from_slice(fwd.tape.value(v));
            let k = fwd.tape.constant_f32(&[pos + 1, d], kc)?;
            let v = fwd.tape.constant_f32(&[pos + 1, d], vc)?;
            let q = split_heads(fwd.tape, q, heads)?;
            let k = split_heads(fwd.tape, k, heads)?;
            let v = split_heads(fwd.tape, v, heads)?;
            let o = attend(fwd.tape, q, k, v, Some(&self_mask), None)?;
            let o = merge_heads(fwd.tape, o)?;
            let o = w.o.apply(fwd.tape, o)?;
            e = fwd.tape.add(e, o)?;

            let c = fwd.layer_norm(e, &format!("{p}.cross_norm"), cfg.ln_eps)?;
            let w = fwd.attention(&format!("{p}.cross_attn"))?;
            let q = w.q.apply(fwd.tape, c)?;
            let (kx, vx) = &src.cross[l];
            let k = fwd.tape.constant_f32(&[t_src, d], kx)?;
            let v = fwd.tape.constant_f32(&[t_src, d], vx)?;
            let q = split_heads(fwd.tape, q, heads)?;
            let k = split_heads(fwd.tape, k, heads)?;
            let v = split_heads(fwd.tape, v, heads)?;
            let cope = cross_cope(&mut fwd, cfg, l)?;
            let o = attend(fwd.tape, q, k, v, src_mask.as_ref(), cope.as_ref())?;
            let o = merge_heads(fwd.tape, o)?;
            let o = w.o.apply(fwd.tape, o)?;
            e = fwd.tape.add(e, o)?;

            let f = fwd.layer_norm(e, &format!("{p}.ff_norm"), cfg.ln_eps)?;
            let f = feed_forward(&mut fwd, &format!("{p}.ff"), f)?;
            e = fwd.tape.add(e, f)?;
        }
        let logits = output_logits(&mut fwd, cfg, e)?;
        state.tokens.push(token);
        Ok(fwd.tape.value(logits).to_vec())
    }
}
