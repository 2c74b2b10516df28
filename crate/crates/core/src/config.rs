//! Flat `key = value` run configuration covering model, training and
//! decoding settings.
//!
//! Blank lines and `#` comments are ignored, unknown keys are rejected and
//! later assignments win, so command-line overrides are simply appended.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::data::SynthSpec;
use crate::decode::DecodeOptions;
use crate::error::{Error, Result};
use crate::model::{parse, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: usize,
    pub length_penalty: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DecodeOptions::default();
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            beam: d.beam,
            length_penalty: d.alpha,
        }
    }
}

/// Splits text into `(line number, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::invalid(format!("line {}: empty key", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let known = match key {
            "beam" => {
                self.beam = parse(key, value)?;
                true
            }
            "length_penalty" => {
                self.length_penalty = parse(key, value)?;
                true
            }
            _ => self.model.set(key, value)? || self.train.set(key, value)?,
        };
        if known {
            Ok(())
        } else {
            Err(Error::config(key, "unknown configuration key"))
        }
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line, k, v) in parse_pairs(text)? {
            self.set(&k, &v).map_err(|e| Error::invalid(format!("line {line}: {e}")))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.beam == 0 {
            return Err(Error::config("beam", "must be at least 1"));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::config("length_penalty", "must be finite"));
        }
        Ok(())
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            beam: self.beam,
            alpha: self.length_penalty,
            max_len: self.train.max_decode_len,
            ..DecodeOptions::default()
        }
    }
}

/// Fully resolved configuration; parsing it back yields the same value.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# model")?;
        for (k, v) in self.model.to_pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        writeln!(f, "\n# training")?;
        for (k, v) in self.train.to_pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        writeln!(f, "\n# decoding")?;
        writeln!(f, "beam = {}", self.beam)?;
        writeln!(f, "length_penalty = {}", self.length_penalty)
    }
}

/// A shipped model configuration with its reference parameter budget.
#[derive(Clone, Copy, Debug)]
pub struct Preset {
    pub name: &'static str,
    pub label: &'static str,
    pub target_millions: f64,
    pub text: &'static str,
}

/// The size lineup, smallest first.
pub const PRESETS: [Preset; 6] = [
    Preset {
        name: "feather",
        label: "Feather",
        target_millions: 0.57,
        text: include_str!("../presets/feather.conf"),
    },
    Preset {
        name: "feather_cope",
        label: "Feather+CoPE",
        target_millions: 1.22,
        text: include_str!("../presets/feather_cope.conf"),
    },
    Preset {
        name: "mid",
        label: "Mid",
        target_millions: 1.41,
        text: include_str!("../presets/mid.conf"),
    },
    Preset {
        name: "mid_cope",
        label: "Mid+CoPE",
        target_millions: 2.70,
        text: include_str!("../presets/mid_cope.conf"),
    },
    Preset {
        name: "full",
        label: "Full",
        target_millions: 3.88,
        text: include_str!("../presets/full.conf"),
    },
    Preset {
        name: "full_cope",
        label: "Full+CoPE",
        target_millions: 6.44,
        text: include_str!("../presets/full_cope.conf"),
    },
];

impl Preset {
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_text(self.text).map_err(|e| Error::invalid(format!("preset `{}`: {e}", self.name)))
    }
}

pub fn preset(name: &str) -> Result<RunConfig> {
    PRESETS
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| {
            let names: Vec<_> = PRESETS.iter().map(|p| p.name).collect();
            Error::config("preset", format!("unknown preset `{name}`, expected one of {}", names.join(", ")))
        })?
        .config()
}

/// Reads a synthetic-task spec in the same `key = value` format.
pub fn read_synth_spec(path: &Path) -> Result<SynthSpec> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read spec {}: {e}", path.display())))?;
    parse_synth_spec(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

pub fn parse_synth_spec(text: &str) -> Result<SynthSpec> {
    let mut spec = SynthSpec::default();
    for (line, k, v) in parse_pairs(text)? {
        if !spec.set(&k, &v).map_err(|e| Error::invalid(format!("line {line}: {e}")))? {
            return Err(Error::invalid(format!("line {line}: {}", Error::config(k, "unknown spec key"))));
        }
    }
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthTask;
    use crate::model::ConvStyle;

    #[test]
    fn comments_blank_lines_and_overrides() {
        let mut c = RunConfig::from_text("# feather\nhidden_size = 64  # D\n\nuse_cope = true\nbeam=3\n").unwrap();
        assert!(c.model.use_cope);
        assert_eq!(c.beam, 3);
        c.apply_overrides(&["conv_style=conformer_original", "epochs = 4"]).unwrap();
        assert_eq!(c.model.conv_style, ConvStyle::ConformerOriginal);
        assert_eq!(c.train.epochs, 4);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_text("hidden_size = 64\nhiden_size = 32\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("hiden_size"), "{err}");
        assert!(RunConfig::default().apply_overrides(&["nope=1"]).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_text("hidden_size = 512").is_err());
        assert!(RunConfig::from_text("kernel_size = 4").is_err());
        assert!(RunConfig::from_text("beam = 0").is_err());
        assert!(RunConfig::from_text("hidden_size").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["hidden_size=128", "use_cope=true", "target_bleu=90", "optimizer=adamw", "length_penalty=0.6"])
            .unwrap();
        let back = RunConfig::from_text(&c.to_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn presets_parse_and_grow() {
        let mut last = 0;
        for p in PRESETS {
            let c = p.config().unwrap();
            let n = crate::model::param_count(&c.model).total();
            assert!(n > last, "{}", p.name);
            last = n;
        }
        assert!(preset("feather").is_ok());
        assert!(preset("tiny").unwrap_err().to_string().contains("tiny"));
    }

    #[test]
    fn synth_spec_text() {
        let s = parse_synth_spec("task = order\nvocab_size = 12 # small\ntrain=10\n").unwrap();
        assert_eq!((s.task, s.vocab_size, s.train), (SynthTask::Order, 12, 10));
        assert!(parse_synth_spec("task = juggle").is_err());
        assert!(parse_synth_spec("colour = 1").is_err());
        assert!(parse_synth_spec("vocab_size = 3").is_err());
        assert_eq!(parse_synth_spec(&s.to_string()).unwrap(), s);
    }
}
