//! Greedy and beam-search decoding, and the corpus metrics used to score
//! translations.

mod metrics;
mod search;

pub use metrics::{bleu4, information_density, lcs_len, netscore, rouge_l, NetScoreWeights};
pub use search::{
    beam_search, beam_search_all, greedy_decode, length_penalty, log_softmax, DecodeOptions, Hypothesis, ModelScorer,
    StepScorer,
};
