use std::fmt;
use std::str::FromStr;

use crate::attention::{CopeMode, GlossAttentionConfig};
use crate::error::{Error, Result};

/// Layout of the encoder convolution block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvStyle {
    /// LN → PW → ReLU6 → DW → ReLU6 → PW → LN, no gating, no batch norm.
    Signformer,
    /// LN → PW → GLU → DW → BatchNorm → Swish → PW, for comparison runs.
    ConformerOriginal,
}

impl ConvStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            ConvStyle::Signformer => "signformer",
            ConvStyle::ConformerOriginal => "conformer_original",
        }
    }
}

impl FromStr for ConvStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signformer" => Ok(ConvStyle::Signformer),
            "conformer_original" => Ok(ConvStyle::ConformerOriginal),
            _ => Err(Error::config("conv_style", format!("expected signformer|conformer_original, got `{s}`"))),
        }
    }
}

/// Which attention blocks receive CoPE when `use_cope` is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CopeScope {
    Both,
    Gloss,
    Cross,
}

impl CopeScope {
    pub fn as_str(self) -> &'static str {
        match self {
            CopeScope::Both => "both",
            CopeScope::Gloss => "gloss",
            CopeScope::Cross => "cross",
        }
    }
}

impl FromStr for CopeScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(CopeScope::Both),
            "gloss" => Ok(CopeScope::Gloss),
            "cross" => Ok(CopeScope::Cross),
            _ => Err(Error::config("cope_scope", format!("expected both|gloss|cross, got `{s}`"))),
        }
    }
}

/// Architecture hyperparameters.
///
/// `heads` and `ff_dim` default to "auto": 8 heads (4 at hidden size 32)
/// and `4 · hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: Option<usize>,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_dim: Option<usize>,
    pub kernel: usize,
    pub conv_expansion: usize,
    pub conv_style: ConvStyle,
    pub use_cope: bool,
    pub cope_scope: CopeScope,
    pub cope_mode: CopeMode,
    pub cope_p_max: usize,
    pub gloss_samples: usize,
    pub gloss_radius: usize,
    pub vocab: usize,
    pub feature_dim: usize,
    pub dropout: f64,
    pub tie_output_embedding: bool,
    pub use_ape: bool,
    pub ape_scale: bool,
    pub ape_max_len: usize,
    pub ln_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: None,
            enc_layers: 2,
            dec_layers: 2,
            ff_dim: None,
            kernel: 31,
            conv_expansion: 2,
            conv_style: ConvStyle::Signformer,
            use_cope: false,
            cope_scope: CopeScope::Both,
            cope_mode: CopeMode::Prefix,
            cope_p_max: 128,
            gloss_samples: 8,
            gloss_radius: 16,
            vocab: 2891,
            feature_dim: 1024,
            dropout: 0.1,
            tie_output_embedding: false,
            use_ape: true,
            ape_scale: true,
            ape_max_len: 512,
            ln_eps: 1e-6,
            bn_momentum: 0.1,
        }
    }
}

/// Largest hidden size the architecture accepts.
pub const MAX_HIDDEN: usize = 256;

impl ModelConfig {
    pub fn heads(&self) -> usize {
        self.heads.unwrap_or(if self.hidden == 32 { 4 } else { 8 })
    }

    pub fn ff_dim(&self) -> usize {
        self.ff_dim.unwrap_or(4 * self.hidden)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads()
    }

    pub fn cope_in_gloss(&self) -> bool {
        self.use_cope && matches!(self.cope_scope, CopeScope::Both | CopeScope::Gloss)
    }

    pub fn cope_in_cross(&self) -> bool {
        self.use_cope && matches!(self.cope_scope, CopeScope::Both | CopeScope::Cross)
    }

    pub fn gloss(&self) -> GlossAttentionConfig {
        GlossAttentionConfig {
            heads: self.heads(),
            samples: self.gloss_samples,
            radius: self.gloss_radius,
        }
    }

    pub fn ape_scale_factor(&self) -> f64 {
        if self.ape_scale {
            (self.hidden as f64).sqrt()
        } else {
            1.0
        }
    }

    /// Frames on each side of a position that can influence its encoder
    /// output.
    pub fn encoder_receptive_radius(&self) -> usize {
        self.enc_layers * (self.gloss_radius + 1) + self.enc_layers * (self.kernel - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, why: String| Err(Error::config(f, why));
        if self.hidden == 0 || self.hidden > MAX_HIDDEN {
            return bad("hidden_size", format!("must be in 1..={MAX_HIDDEN}, got {}", self.hidden));
        }
        let h = self.heads();
        if h == 0 || !self.hidden.is_multiple_of(h) {
            return bad("heads", format!("{h} does not divide hidden size {}", self.hidden));
        }
        if self.enc_layers == 0 {
            return bad("enc_layers", "must be >= 1".into());
        }
        if self.dec_layers == 0 {
            return bad("dec_layers", "must be >= 1".into());
        }
        if self.ff_dim() == 0 {
            return bad("ff_dim", "must be >= 1".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad("kernel_size", format!("must be odd, got {}", self.kernel));
        }
        if self.conv_expansion == 0 {
            return bad("conv_expansion", "must be >= 1".into());
        }
        if self.cope_p_max == 0 {
            return bad("cope_p_max", "must be >= 1".into());
        }
        if self.cope_mode == CopeMode::Causal {
            return bad("cope_mode", "cross attention supports prefix|suffix only".into());
        }
        if self.gloss_samples == 0 {
            return bad("gloss_samples", "must be >= 1".into());
        }
        if self.vocab < 5 {
            return bad("vocab_size", format!("needs the 4 reserved tokens plus at least one word, got {}", self.vocab));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("must be in [0, 1), got {}", self.dropout));
        }
        if self.ape_max_len == 0 {
            return bad("ape_max_len", "must be >= 1".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps", "must be positive".into());
        }
        Ok(())
    }

    /// Flat `key = value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let auto = |v: Option<usize>| v.map_or_else(|| "auto".to_string(), |v| v.to_string());
        vec![
            ("hidden_size", self.hidden.to_string()),
            ("heads", auto(self.heads)),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("ff_dim", auto(self.ff_dim)),
            ("kernel_size", self.kernel.to_string()),
            ("conv_expansion", self.conv_expansion.to_string()),
            ("conv_style", self.conv_style.as_str().to_string()),
            ("use_cope", self.use_cope.to_string()),
            ("cope_scope", self.cope_scope.as_str().to_string()),
            ("cope_mode", self.cope_mode.as_str().to_string()),
            ("cope_p_max", self.cope_p_max.to_string()),
            ("gloss_samples", self.gloss_samples.to_string()),
            ("gloss_radius", self.gloss_radius.to_string()),
            ("vocab_size", self.vocab.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("dropout", self.dropout.to_string()),
            ("tie_output_embedding", self.tie_output_embedding.to_string()),
            ("use_ape", self.use_ape.to_string()),
            ("ape_scale", self.ape_scale.to_string()),
            ("ape_max_len", self.ape_max_len.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
            ("bn_momentum", self.bn_momentum.to_string()),
        ]
    }

    /// Sets one field from text. Returns `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let value = value.trim();
        match key {
            "hidden_size" => self.hidden = parse(key, value)?,
            "heads" => self.heads = parse_auto(key, value)?,
            "enc_layers" => self.enc_layers = parse(key, value)?,
            "dec_layers" => self.dec_layers = parse(key, value)?,
            "ff_dim" => self.ff_dim = parse_auto(key, value)?,
            "kernel_size" => self.kernel = parse(key, value)?,
            "conv_expansion" => self.conv_expansion = parse(key, value)?,
            "conv_style" => self.conv_style = value.parse()?,
            "use_cope" => self.use_cope = parse_bool(key, value)?,
            "cope_scope" => self.cope_scope = value.parse()?,
            "cope_mode" => self.cope_mode = value.parse()?,
            "cope_p_max" => self.cope_p_max = parse(key, value)?,
            "gloss_samples" => self.gloss_samples = parse(key, value)?,
            "gloss_radius" => self.gloss_radius = parse(key, value)?,
            "vocab_size" => self.vocab = parse(key, value)?,
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "tie_output_embedding" => self.tie_output_embedding = parse_bool(key, value)?,
            "use_ape" => self.use_ape = parse_bool(key, value)?,
            "ape_scale" => self.ape_scale = parse_bool(key, value)?,
            "ape_max_len" => self.ape_max_len = parse(key, value)?,
            "ln_eps" => self.ln_eps = parse(key, value)?,
            "bn_momentum" => self.bn_momentum = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{value}`"))),
    }
}

fn parse_auto(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}
