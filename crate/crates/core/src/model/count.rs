use std::fmt;

use super::{ConvStyle, ModelConfig};

/// Trainable parameter totals per component.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub frame_proj: usize,
    pub token_embed: usize,
    pub output_proj: usize,
    pub enc_gloss_attn: usize,
    pub enc_cope: usize,
    pub enc_conv: usize,
    pub enc_ff: usize,
    pub enc_norms: usize,
    pub dec_self_attn: usize,
    pub dec_cross_attn: usize,
    pub dec_cope: usize,
    pub dec_ff: usize,
    pub dec_norms: usize,
}

impl ParamBreakdown {
    pub fn rows(&self) -> [(&'static str, usize); 13] {
        [
            ("frame_proj", self.frame_proj),
            ("token_embed", self.token_embed),
            ("output_proj", self.output_proj),
            ("enc.gloss_attn", self.enc_gloss_attn),
            ("enc.cope", self.enc_cope),
            ("enc.conv", self.enc_conv),
            ("enc.ff", self.enc_ff),
            ("enc.norms", self.enc_norms),
            ("dec.self_attn", self.dec_self_attn),
            ("dec.cross_attn", self.dec_cross_attn),
            ("dec.cope", self.dec_cope),
            ("dec.ff", self.dec_ff),
            ("dec.norms", self.dec_norms),
        ]
    }

    pub fn total(&self) -> usize {
        self.rows().iter().map(|(_, n)| n).sum()
    }
}

impl fmt::Display for ParamBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, n) in self.rows() {
            writeln!(f, "{name}\t{n}")?;
        }
        write!(f, "total\t{}", self.total())
    }
}

/// Closed-form trainable parameter count (batch-norm running statistics
/// excluded).
pub fn param_count(cfg: &ModelConfig) -> ParamBreakdown {
    let d = cfg.hidden;
    let ff = cfg.ff_dim();
    let lin = |i: usize, o: usize| i * o + o;
    let attn = 4 * lin(d, d);
    let ffn = lin(d, ff) + lin(ff, d);
    let cope = (cfg.cope_p_max + 1) * d;
    let (le, ld) = (cfg.enc_layers, cfg.dec_layers);

    let conv = match cfg.conv_style {
        ConvStyle::Signformer => {
            let e = cfg.conv_expansion * d;
            2 * d + lin(d, e) + (cfg.kernel + 1) * e + lin(e, d) + 2 * d
        }
        ConvStyle::ConformerOriginal => 2 * d + lin(d, 2 * d) + (cfg.kernel + 1) * d + 2 * d + lin(d, d),
    };

    ParamBreakdown {
        frame_proj: lin(cfg.feature_dim, d),
        token_embed: cfg.vocab * d,
        output_proj: if cfg.tie_output_embedding { 0 } else { d * cfg.vocab },
        enc_gloss_attn: le * (attn + cfg.heads() * cfg.gloss_samples),
        enc_cope: if cfg.cope_in_gloss() { le * cope } else { 0 },
        enc_conv: le * conv,
        enc_ff: le * ffn,
        enc_norms: le * 4 * d + 2 * d,
        dec_self_attn: ld * attn,
        dec_cross_attn: ld * attn,
        dec_cope: if cfg.cope_in_cross() { ld * cope } else { 0 },
        dec_ff: ld * ffn,
        dec_norms: ld * 6 * d + 2 * d,
    }
}
