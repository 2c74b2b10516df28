use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{DecoderState, EncodedSource, Signformer};
use crate::tensor::Tensor;
use crate::tokens::{BOS, EOS};

/// Incremental next-token distribution.
pub trait StepScorer {
    type State: Clone;

    fn start(&self) -> Self::State;

    /// Feeds `token` and returns log-probabilities of the next token.
    fn step(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>>;
}

/// A model bound to one encoded source.
pub struct ModelScorer<'a> {
    model: &'a Signformer,
    src: EncodedSource,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Signformer, frames: &Tensor, valid_len: usize) -> Result<Self> {
        Ok(Self {
            model,
            src: model.encode(frames, valid_len)?,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = DecoderState;

    fn start(&self) -> DecoderState {
        self.model.start()
    }

    fn step(&self, state: &mut DecoderState, token: u32) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.model.step(&self.src, state, token)?))
    }
}

pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max + logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v as f64 - lse).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Length-penalty exponent.
    pub alpha: f64,
    /// Generated tokens allowed, the end token included.
    pub max_len: usize,
    pub bos: u32,
    pub eos: u32,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam: 5,
            alpha: 1.0,
            max_len: 60,
            bos: BOS,
            eos: EOS,
        }
    }
}

impl DecodeOptions {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            beam: 1,
            alpha: 0.0,
            max_len,
            ..Self::default()
        }
    }
}

/// `((5 + L) / 6)^alpha`
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, the end token included when present.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.tokens.len(), alpha)
    }

    /// Tokens with a trailing end token removed.
    pub fn output(&self, eos: u32) -> Vec<u32> {
        let mut t = self.tokens.clone();
        if t.last() == Some(&eos) {
            t.pop();
        }
        t
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding, ties to the lowest id. Returns tokens without the end
/// token.
pub fn greedy_decode<S: StepScorer>(scorer: &S, max_len: usize) -> Result<Vec<u32>> {
    greedy_with(scorer, &DecodeOptions::greedy(max_len))
}

fn greedy_with<S: StepScorer>(scorer: &S, opts: &DecodeOptions) -> Result<Vec<u32>> {
    let mut state = scorer.start();
    let mut token = opts.bos;
    let mut out = Vec::new();
    for _ in 0..opts.max_len {
        let lp = scorer.step(&mut state, token)?;
        token = argmax(&lp) as u32;
        if token == opts.eos {
            break;
        }
        out.push(token);
    }
    Ok(out)
}

fn by_score(alpha: f64) -> impl Fn(&Hypothesis, &Hypothesis) -> Ordering {
    move |a, b| {
        b.score(alpha)
            .partial_cmp(&a.score(alpha))
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    }
}

/// Every finished hypothesis, best first.
pub fn beam_search_all<S: StepScorer>(scorer: &S, opts: &DecodeOptions) -> Result<Vec<Hypothesis>> {
    if opts.beam == 0 || opts.max_len == 0 {
        return Err(Error::invalid("beam and max_len must be at least 1"));
    }
    let mut alive = vec![(
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
        scorer.start(),
    )];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for t in 0..opts.max_len {
        // (log-prob, parent, token); hypotheses are built for survivors only
        let (parents, mut states): (Vec<Hypothesis>, Vec<S::State>) = alive.into_iter().unzip();
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (i, (hyp, state)) in parents.iter().zip(&mut states).enumerate() {
            let last = hyp.tokens.last().copied().unwrap_or(opts.bos);
            let lp = scorer.step(state, last)?;
            cands.extend(lp.iter().enumerate().map(|(v, &l)| (hyp.log_prob + l, i, v as u32)));
        }
        // Higher log-probability first, then lexicographically smaller
        // extended tokens.
        let order = |a: &(f64, usize, u32), b: &(f64, usize, u32)| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| parents[a.1].tokens.cmp(&parents[b.1].tokens).then(a.2.cmp(&b.2)))
        };
        if cands.len() > opts.beam {
            cands.select_nth_unstable_by(opts.beam - 1, order);
            cands.truncate(opts.beam);
        }
        cands.sort_by(order);
        alive = Vec::new();
        for (log_prob, i, v) in cands {
            let mut tokens = parents[i].tokens.clone();
            tokens.push(v);
            let hyp = Hypothesis {
                tokens,
                log_prob,
                finished: v == opts.eos || t + 1 == opts.max_len,
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                alive.push((hyp, states[i].clone()));
            }
        }
        if alive.is_empty() || finished.len() >= opts.beam {
            break;
        }
        // Without a length bonus, no extension can beat a finished score.
        if opts.alpha == 0.0 {
            let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if alive.iter().all(|(h, _)| h.log_prob < best_done) {
                break;
            }
        }
    }
    finished.sort_by(by_score(opts.alpha));
    Ok(finished)
}

/// Highest-scoring finished hypothesis's tokens, end token removed.
pub fn beam_search<S: StepScorer>(scorer: &S, opts: &DecodeOptions) -> Result<Vec<u32>> {
    let all = beam_search_all(scorer, opts)?;
    Ok(all.first().map(|h| h.output(opts.eos)).unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    /// Log-probabilities drawn per prefix from a seeded table.
    struct Toy {
        vocab: usize,
        seed: u64,
    }

    impl Toy {
        fn dist(&self, prefix: &[u32]) -> Vec<f64> {
            let mut h = self.seed;
            for &t in prefix {
                h = h.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(t as u64 + 1);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let logits: Vec<f32> = (0..self.vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
            log_softmax(&logits)
        }
    }

    impl StepScorer for Toy {
        type State = Vec<u32>;

        fn start(&self) -> Vec<u32> {
            Vec::new()
        }

        fn step(&self, state: &mut Vec<u32>, token: u32) -> Result<Vec<f64>> {
            state.push(token);
            Ok(self.dist(state))
        }
    }

    fn exhaustive(toy: &Toy, opts: &DecodeOptions) -> Hypothesis {
        let mut all: HashMap<Vec<u32>, f64> = HashMap::new();
        let v = toy.vocab as u32;
        let total = v.pow(opts.max_len as u32);
        for code in 0..total {
            let mut seq = Vec::new();
            let mut c = code;
            for _ in 0..opts.max_len {
                seq.push(c % v);
                c /= v;
            }
            if let Some(p) = seq.iter().position(|&t| t == opts.eos) {
                seq.truncate(p + 1);
            }
            let mut prefix = vec![opts.bos];
            let mut lp = 0.0;
            for &t in &seq {
                lp += toy.dist(&prefix)[t as usize];
                prefix.push(t);
            }
            all.insert(seq, lp);
        }
        let mut hyps: Vec<Hypothesis> = all
            .into_iter()
            .map(|(tokens, log_prob)| Hypothesis {
                tokens,
                log_prob,
                finished: true,
            })
            .collect();
        hyps.sort_by(by_score(opts.alpha));
        hyps.swap_remove(0)
    }

    #[test]
    fn full_beam_equals_exhaustive_search() {
        for seed in 0..200 {
            for max_len in 1..=3 {
                for alpha in [0.0, 1.0] {
                    let toy = Toy { vocab: 3, seed };
                    let opts = DecodeOptions {
                        beam: 27,
                        alpha,
                        max_len,
                        bos: 0,
                        eos: 2,
                    };
                    let best = exhaustive(&toy, &opts);
                    let got = &beam_search_all(&toy, &opts).unwrap()[0];
                    assert_eq!(got.tokens, best.tokens, "seed {seed} len {max_len} alpha {alpha}");
                    assert!((got.log_prob - best.log_prob).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn beam_one_is_greedy_on_toys() {
        for seed in 0..100 {
            let toy = Toy { vocab: 6, seed };
            let opts = DecodeOptions {
                beam: 1,
                alpha: 0.7,
                max_len: 9,
                bos: 0,
                eos: 1,
            };
            assert_eq!(beam_search(&toy, &opts).unwrap(), greedy_with(&toy, &opts).unwrap());
        }
    }

    #[test]
    fn returned_score_beats_competitors() {
        let toy = Toy { vocab: 7, seed: 5 };
        let opts = DecodeOptions {
            beam: 4,
            alpha: 1.0,
            max_len: 8,
            bos: 0,
            eos: 3,
        };
        let all = beam_search_all(&toy, &opts).unwrap();
        for h in &all[1..] {
            assert!(all[0].score(1.0) >= h.score(1.0));
        }
        for h in &all {
            assert!(h.finished);
            assert!(h.tokens.last() == Some(&3) || h.tokens.len() == 8);
        }
    }

    struct AlwaysEos;

    impl StepScorer for AlwaysEos {
        type State = ();
        fn start(&self) {}
        fn step(&self, _: &mut (), _: u32) -> Result<Vec<f64>> {
            Ok(log_softmax(&[0.0, 0.0, 0.0, 5.0, 0.0]))
        }
    }

    #[test]
    fn eos_peak_gives_empty_output() {
        assert!(greedy_decode(&AlwaysEos, 60).unwrap().is_empty());
        assert!(beam_search(&AlwaysEos, &DecodeOptions::default()).unwrap().is_empty());
    }

    fn tiny_model(seed: u64) -> Signformer {
        let cfg = ModelConfig {
            hidden: 16,
            heads: Some(2),
            enc_layers: 1,
            dec_layers: 1,
            ff_dim: Some(24),
            kernel: 5,
            vocab: 9,
            feature_dim: 5,
            ..ModelConfig::default()
        };
        Signformer::new(cfg, seed).unwrap()
    }

    #[test]
    fn beam_one_is_greedy_on_models() {
        for seed in 0..50 {
            let m = tiny_model(seed);
            let frames = Tensor::from_fn(&[6, 5], |i| ((i as f32 + seed as f32) * 0.37).sin());
            let s = ModelScorer::new(&m, &frames, 6).unwrap();
            let g = greedy_decode(&s, 12).unwrap();
            let b = beam_search(&s, &DecodeOptions { beam: 1, alpha: 0.0, max_len: 12, ..Default::default() }).unwrap();
            assert_eq!(g, b, "seed {seed}");
            assert_eq!(g, greedy_decode(&s, 12).unwrap());
        }
    }

    #[test]
    fn log_prob_never_increases() {
        let toy = Toy { vocab: 5, seed: 9 };
        let mut st = toy.start();
        let mut total = 0.0;
        let mut tok = 0;
        for _ in 0..6 {
            let lp = toy.step(&mut st, tok).unwrap();
            tok = argmax(&lp) as u32;
            let next = total + lp[tok as usize];
            assert!(next <= total);
            total = next;
        }
    }
}
