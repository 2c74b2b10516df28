//! The Signformer encoder-decoder.
//!
//! The encoder embeds frame features with one linear layer plus sinusoidal
//! positions, then stacks pre-LN layers of gloss attention, the convolution
//! block and a ReLU6 feed-forward. The decoder is a standard pre-LN
//! transformer decoder whose cross attention can carry a CoPE bias.

mod config;
mod conv;
mod count;
mod forward;
mod infer;
mod layers;
mod params;

pub use config::{ConvStyle, CopeScope, ModelConfig, MAX_HIDDEN};
pub use conv::conv_module;
pub use count::{param_count, ParamBreakdown};
pub use forward::Forward;
pub use infer::{DecoderState, EncodedSource};
pub use layers::{decode, decoder_layer, encode, encoder_layer, feed_forward, output_logits, source_mask};
pub use params::{init_parameters, xavier_bound, Parameters};

pub(crate) use config::{parse, parse_bool};
pub(crate) use params::expected_shapes;

use crate::attention::{padding_keep, ApeTable};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// A configured model and its parameters.
#[derive(Clone, Debug)]
pub struct Signformer {
    cfg: ModelConfig,
    params: Parameters,
    ape: ApeTable,
}

impl Signformer {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_parameters(&cfg, seed)?;
        Ok(Self::assemble(cfg, params))
    }

    /// Wraps existing parameters, refusing any name or shape that does not
    /// match `cfg`.
    pub fn from_parameters(cfg: ModelConfig, params: Parameters) -> Result<Self> {
        cfg.validate()?;
        let expected = expected_shapes(&cfg);
        for (name, shape, _) in &expected {
            match params.get(name) {
                None => return Err(Error::invalid(format!("parameter `{name}` missing for this config"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::invalid(format!(
                        "parameter `{name}` has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = params.names().find(|n| !expected.iter().any(|(e, _, _)| e == n)) {
            return Err(Error::invalid(format!("parameter `{extra}` is not part of this config")));
        }
        Ok(Self::assemble(cfg, params))
    }

    fn assemble(cfg: ModelConfig, params: Parameters) -> Self {
        let ape = ApeTable::new(cfg.ape_max_len, cfg.hidden);
        Self { cfg, params, ape }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn into_parameters(self) -> Parameters {
        self.params
    }

    pub fn ape(&self) -> &ApeTable {
        &self.ape
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Teacher-forced logits `[L, V]` in eval mode.
    ///
    /// Only the first `valid_len` rows of `frames[T, F]` are real.
    pub fn logits(&self, frames: &Tensor, valid_len: usize, tokens: &[u32]) -> Result<Tensor> {
        let t = frames.shape()[0];
        if valid_len == 0 || valid_len > t {
            return Err(Error::invalid(format!("valid length {valid_len} for {t} frames")));
        }
        let keep = padding_keep(valid_len, t);
        let mut tape = Tape::<f32>::new();
        let mut fwd = Forward::eval(&mut tape, &self.params);
        let x = fwd.tape.leaf(frames);
        let memory = encode(&mut fwd, &self.cfg, &self.ape, x, &keep)?;
        let logits = decode(&mut fwd, &self.cfg, &self.ape, tokens, memory, &keep)?;
        Ok(fwd.tape.to_tensor(logits))
    }
}
