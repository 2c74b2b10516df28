//! Analytic multiply-accumulate counts and wall-clock translation latency.
//!
//! A matrix product `[m, k] x [k, n]` counts `m n k` MACs. Attention score
//! and value products, depthwise convolution taps and the CoPE per-position
//! logits are counted the same way; elementwise work, softmax and
//! normalization are ignored.

use std::fmt;
use std::time::Instant;

use crate::decode::{beam_search, DecodeOptions, ModelScorer};
use crate::error::{Error, Result};
use crate::model::{ConvStyle, ModelConfig, Signformer};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCount {
    pub frame_proj: u64,
    pub gloss_attention: u64,
    pub conv: u64,
    pub encoder_ff: u64,
    pub decoder: u64,
    pub output_proj: u64,
}

impl MacCount {
    pub fn encoder(&self) -> u64 {
        self.frame_proj + self.gloss_attention + self.conv + self.encoder_ff
    }

    pub fn total(&self) -> u64 {
        self.encoder() + self.decoder + self.output_proj
    }
}

fn dims(cfg: &ModelConfig) -> (u64, u64, u64, u64, u64) {
    let d = cfg.hidden as u64;
    let ff = cfg.ff_dim() as u64;
    let s = cfg.gloss_samples as u64;
    let p = cfg.cope_p_max as u64 + 1;
    let v = cfg.vocab as u64;
    (d, ff, s, p, v)
}

/// Encoder MACs for `t` frames; linear in `t`.
pub fn encoder_macs(cfg: &ModelConfig, t: usize) -> MacCount {
    let (d, ff, s, p, _) = dims(cfg);
    let t = t as u64;
    let k = cfg.kernel as u64;
    let layers = cfg.enc_layers as u64;
    let cope = if cfg.use_cope && cfg.cope_in_gloss() { t * p * d } else { 0 };
    let gloss = 4 * t * d * d + 2 * t * s * d + cope;
    let conv = match cfg.conv_style {
        ConvStyle::Signformer => {
            let e = cfg.conv_expansion as u64 * d;
            t * d * e + t * e * k + t * e * d
        }
        ConvStyle::ConformerOriginal => t * d * 2 * d + t * d * k + t * d * d,
    };
    MacCount {
        frame_proj: t * cfg.feature_dim as u64 * d,
        gloss_attention: layers * gloss,
        conv: layers * conv,
        encoder_ff: layers * 2 * t * d * ff,
        decoder: 0,
        output_proj: 0,
    }
}

/// Teacher-forced forward over `t` frames and `l` decoder positions.
pub fn forward_macs(cfg: &ModelConfig, t: usize, l: usize) -> MacCount {
    let (d, ff, _, p, v) = dims(cfg);
    let (t64, l64) = (t as u64, l as u64);
    let cope = if cfg.use_cope && cfg.cope_in_cross() { l64 * p * d } else { 0 };
    let layer = 4 * l64 * d * d + 2 * l64 * l64 * d // self attention
        + 2 * l64 * d * d + 2 * t64 * d * d + 2 * l64 * t64 * d + cope // cross attention
        + 2 * l64 * d * ff;
    MacCount {
        decoder: cfg.dec_layers as u64 * layer,
        output_proj: l64 * d * v,
        ..encoder_macs(cfg, t)
    }
}

/// Cached beam-search translation: one encoder pass, cross keys/values
/// projected once, then `beam` hypotheses for each of `steps` positions.
pub fn translate_macs(cfg: &ModelConfig, t: usize, steps: usize, beam: usize) -> MacCount {
    let (d, ff, _, p, v) = dims(cfg);
    let t64 = t as u64;
    let cope = if cfg.use_cope && cfg.cope_in_cross() { p * d } else { 0 };
    let mut per_layer = 2 * t64 * d * d;
    for pos in 1..=steps as u64 {
        let step = 4 * d * d + 2 * pos * d + 2 * d * d + 2 * t64 * d + cope + 2 * d * ff;
        per_layer += beam as u64 * step;
    }
    MacCount {
        decoder: cfg.dec_layers as u64 * per_layer,
        output_proj: (beam * steps) as u64 * d * v,
        ..encoder_macs(cfg, t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub frames: usize,
    pub beam: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    /// Tokens emitted by the timed translation.
    pub output_len: usize,
    pub macs_encoder: u64,
    pub macs_translate: u64,
    /// Teacher-forced forward with one position per output token plus EOS.
    pub macs_forward: u64,
    pub params: usize,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "frames={}", self.frames)?;
        writeln!(f, "beam={}", self.beam)?;
        writeln!(f, "repeats={}", self.repeats)?;
        writeln!(f, "warmup={}", self.warmup)?;
        writeln!(f, "median_ms={:.3}", self.median_ms)?;
        writeln!(f, "p95_ms={:.3}", self.p95_ms)?;
        writeln!(f, "min_ms={:.3}", self.min_ms)?;
        writeln!(f, "output_len={}", self.output_len)?;
        writeln!(f, "params={}", self.params)?;
        writeln!(f, "macs_encoder={}", self.macs_encoder)?;
        writeln!(f, "macs_forward={}", self.macs_forward)?;
        write!(f, "macs_translate={}", self.macs_translate)
    }
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times full translations of `frames` on the calling thread.
pub fn bench_translate(
    model: &Signformer,
    frames: &Tensor,
    opts: &DecodeOptions,
    repeats: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let t = frames.shape()[0];
    let run = || -> Result<Vec<u32>> {
        let scorer = ModelScorer::new(model, frames, t)?;
        beam_search(&scorer, opts)
    };
    let mut out = Vec::new();
    for _ in 0..warmup {
        out = run()?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        out = run()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let cfg = model.config();
    let steps = (out.len() + 1).min(opts.max_len);
    Ok(BenchReport {
        frames: t,
        beam: opts.beam,
        repeats,
        warmup,
        median_ms: percentile(&times, 0.5),
        p95_ms: percentile(&times, 0.95),
        min_ms: times[0],
        output_len: out.len(),
        macs_encoder: encoder_macs(cfg, t).total(),
        macs_translate: translate_macs(cfg, t, steps, opts.beam).total(),
        macs_forward: forward_macs(cfg, t, out.len() + 1).total(),
        params: model.param_count(),
    })
}
