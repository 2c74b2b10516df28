//! Signformer: a from-scratch, dependency-light transformer for gloss-free
//! sign language translation on CPU-only edge devices.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: `f32` tensors and a tape-based reverse-mode autodiff engine
//! - [`attention`]: sinusoidal APE, deformable gloss attention, contextual
//!   position encoding (CoPE), multi-head attention and masks
//! - [`model`]: configuration, parameters, the convolution module, encoder,
//!   decoder and analytic parameter accounting
//! - [`train`]: loss, AdamW, SophiaG, gradient clipping, plateau scheduling
//!   and the training loop
//! - [`decode`]: greedy and beam search decoding plus BLEU-4, ROUGE-L,
//!   Information Density and NetScore
//! - [`data`]: feature, vocabulary and checkpoint files, batching and the
//!   synthetic desk-scale tasks
//! - [`cli`]: the commands behind the `signformer` binary
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod attention;
pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, Parameters, Signformer};
pub use tensor::{Tape, Tensor, Var};

/// Reserved token ids shared by vocabularies, datasets and checkpoints.
pub mod tokens {
    pub const UNK: u32 = 0;
    pub const PAD: u32 = 1;
    pub const BOS: u32 = 2;
    pub const EOS: u32 = 3;
    pub const RESERVED: [&str; 4] = ["<unk>", "<pad>", "<bos>", "<eos>"];
}
