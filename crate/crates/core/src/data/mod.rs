//! Feature, vocabulary and checkpoint files, batching, and the synthetic
//! desk-scale tasks.
//!
//! All binary formats are little-endian and fixed-width. Writers go through
//! a temporary file and an atomic rename so readers never observe a partial
//! file.

mod batch;
mod bytes;
mod checkpoint;
mod features;
mod synth;
mod vocab;

pub use batch::{batch_order, make_batches, Batch};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Progress, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use features::{decode_features, encode_features, read_features, write_features, FEATURE_MAGIC, FEATURE_VERSION};
pub use synth::{synth_generate, SynthSpec, SynthSplits, SynthTask};
pub use vocab::{read_vocab, write_vocab, Vocab};

pub(crate) use bytes::{atomic_write, read_file, ByteReader};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One source sequence and its target tokens (no BOS/EOS).
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: String,
    /// `[T, F]`
    pub frames: Tensor,
    pub target: Vec<u32>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sequences sharing one feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    pub feature_dim: usize,
    pub sequences: Vec<Sequence>,
}

impl FeatureDataset {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            sequences: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn push(&mut self, seq: Sequence) -> Result<()> {
        let s = seq.frames.shape();
        if s.len() != 2 || s[1] != self.feature_dim {
            return Err(Error::Shape {
                op: "FeatureDataset::push",
                lhs: s.to_vec(),
                rhs: vec![0, self.feature_dim],
            });
        }
        self.sequences.push(seq);
        Ok(())
    }

    /// Fails if any target id is outside a vocabulary of `size` tokens.
    pub fn check_vocab(&self, size: usize) -> Result<()> {
        for s in &self.sequences {
            if let Some(&t) = s.target.iter().find(|&&t| t as usize >= size) {
                return Err(Error::invalid(format!(
                    "sequence `{}` has token id {t}, vocabulary has {size} entries",
                    s.id
                )));
            }
        }
        Ok(())
    }

    pub fn max_frames(&self) -> usize {
        self.sequences.iter().map(Sequence::len).max().unwrap_or(0)
    }
}
