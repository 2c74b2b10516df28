//! Synthetic stand-ins for sign-video features.
//!
//! Every task maps target tokens to frames through one fixed random
//! projection (drawn from `projection_seed`), so train, dev and test share
//! the same "signer".

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{FeatureDataset, Sequence, Vocab};
use crate::error::{Error, Result};
use crate::model::{parse, parse_bool};
use crate::tensor::Tensor;
use crate::tokens::RESERVED;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthTask {
    /// One frame per token.
    Copy,
    /// Pairs of samples over one token multiset in two different orders.
    Order,
    /// Runs of frames per token with adjacent repeats.
    Segment,
}

impl SynthTask {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthTask::Copy => "copy",
            SynthTask::Order => "order",
            SynthTask::Segment => "segment",
        }
    }
}

impl FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SynthTask::Copy),
            "order" => Ok(SynthTask::Order),
            "segment" => Ok(SynthTask::Segment),
            _ => Err(Error::config("task", format!("`{s}` is not one of copy, order, segment"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub task: SynthTask,
    /// Word tokens, excluding the 4 reserved ones.
    pub vocab_size: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub frames_per_token_min: usize,
    pub frames_per_token_max: usize,
    pub noise_sigma: f64,
    pub feature_dim: usize,
    pub projection_seed: u64,
    /// Chance that a segment-task token repeats its predecessor.
    pub repeat_prob: f64,
    /// Adds a fixed marker vector to the first frame of every run.
    pub onset_marker: bool,
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            task: SynthTask::Copy,
            vocab_size: 30,
            seq_len_min: 4,
            seq_len_max: 8,
            frames_per_token_min: 4,
            frames_per_token_max: 12,
            noise_sigma: 0.1,
            feature_dim: 1024,
            projection_seed: 0,
            repeat_prob: 0.3,
            onset_marker: true,
            seed: 1,
            train: 500,
            dev: 100,
            test: 100,
        }
    }
}

impl SynthSpec {
    pub fn new(task: SynthTask) -> Self {
        Self {
            task,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::config("vocab_size", format!("{} < 5", self.vocab_size)));
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return Err(Error::config(
                "seq_len_min",
                format!("need 1 <= seq_len_min <= seq_len_max, got {}..{}", self.seq_len_min, self.seq_len_max),
            ));
        }
        if self.frames_per_token_min == 0 || self.frames_per_token_min > self.frames_per_token_max {
            return Err(Error::config(
                "frames_per_token_min",
                format!(
                    "need 1 <= frames_per_token_min <= frames_per_token_max, got {}..{}",
                    self.frames_per_token_min, self.frames_per_token_max
                ),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.repeat_prob) {
            return Err(Error::config("repeat_prob", "must lie in [0, 1]"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim", "must be positive"));
        }
        if self.task == SynthTask::Order && self.seq_len_max < 2 {
            return Err(Error::config("seq_len_max", "order task needs at least 2 tokens"));
        }
        Ok(())
    }

    /// Sets one `key = value` field; `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "task" => self.task = value.parse()?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "seq_len_min" => self.seq_len_min = parse(key, value)?,
            "seq_len_max" => self.seq_len_max = parse(key, value)?,
            "frames_per_token_min" => self.frames_per_token_min = parse(key, value)?,
            "frames_per_token_max" => self.frames_per_token_max = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "projection_seed" => self.projection_seed = parse(key, value)?,
            "repeat_prob" => self.repeat_prob = parse(key, value)?,
            "onset_marker" => self.onset_marker = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "train" => self.train = parse(key, value)?,
            "dev" => self.dev = parse(key, value)?,
            "test" => self.test = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("task", self.task.as_str().to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("seq_len_min", self.seq_len_min.to_string()),
            ("seq_len_max", self.seq_len_max.to_string()),
            ("frames_per_token_min", self.frames_per_token_min.to_string()),
            ("frames_per_token_max", self.frames_per_token_max.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("projection_seed", self.projection_seed.to_string()),
            ("repeat_prob", self.repeat_prob.to_string()),
            ("onset_marker", self.onset_marker.to_string()),
            ("seed", self.seed.to_string()),
            ("train", self.train.to_string()),
            ("dev", self.dev.to_string()),
            ("test", self.test.to_string()),
        ]
    }

    /// Reserved tokens plus `vocab_size` words `w0`, `w1`, ...
    pub fn vocab(&self) -> Vocab {
        Vocab::from_words((0..self.vocab_size).map(|i| format!("w{i}"))).expect("generated words are distinct")
    }
}

impl fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSplits {
    pub vocab: Vocab,
    pub train: FeatureDataset,
    pub dev: FeatureDataset,
    pub test: FeatureDataset,
}

struct Projection {
    rows: Vec<Vec<f32>>,
    onset: Vec<f32>,
}

impl Projection {
    fn new(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.projection_seed);
        let mut row = || -> Vec<f32> {
            (0..spec.feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        };
        let rows = (0..spec.vocab_size).map(|_| row()).collect();
        let onset = row();
        Self { rows, onset }
    }
}

/// Builds train/dev/test splits; a pure function of `spec`.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthSplits> {
    spec.validate()?;
    let proj = Projection::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = |name: &str, n: usize| -> Result<FeatureDataset> {
        let mut ds = FeatureDataset::new(spec.feature_dim);
        while ds.len() < n {
            let targets = match spec.task {
                SynthTask::Order => order_pair(spec, &mut rng),
                _ => vec![random_target(spec, &mut rng)],
            };
            for target in targets.into_iter().take(n - ds.len()) {
                let frames = render(spec, &proj, &target, &mut rng)?;
                ds.push(Sequence {
                    id: format!("{name}-{:05}", ds.len()),
                    frames,
                    target,
                })?;
            }
        }
        Ok(ds)
    };
    let train = split("train", spec.train)?;
    let dev = split("dev", spec.dev)?;
    let test = split("test", spec.test)?;
    Ok(SynthSplits {
        vocab: spec.vocab(),
        train,
        dev,
        test,
    })
}

fn word(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> u32 {
    (RESERVED.len() + rng.random_range(0..spec.vocab_size)) as u32
}

fn random_target(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let len = rng.random_range(spec.seq_len_min..=spec.seq_len_max);
    let mut out: Vec<u32> = Vec::with_capacity(len);
    for _ in 0..len {
        let repeat = spec.task == SynthTask::Segment && !out.is_empty() && rng.random_bool(spec.repeat_prob);
        let t = if repeat { *out.last().unwrap() } else { word(spec, rng) };
        out.push(t);
    }
    out
}

/// Two orderings of one multiset; they differ whenever the multiset has
/// two distinct tokens.
fn order_pair(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    let len = rng.random_range(spec.seq_len_min.max(2)..=spec.seq_len_max);
    let mut a: Vec<u32> = (0..len).map(|_| word(spec, rng)).collect();
    while a.iter().all(|&t| t == a[0]) {
        a[len - 1] = word(spec, rng);
    }
    let mut b = a.clone();
    while b == a {
        b.shuffle(rng);
    }
    vec![a, b]
}

fn render(spec: &SynthSpec, proj: &Projection, target: &[u32], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let f = spec.feature_dim;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let mut data = Vec::new();
    for &t in target {
        let run = match spec.task {
            SynthTask::Segment => rng.random_range(spec.frames_per_token_min..=spec.frames_per_token_max),
            _ => 1,
        };
        let row = &proj.rows[t as usize - RESERVED.len()];
        for k in 0..run {
            let marker = spec.task == SynthTask::Segment && spec.onset_marker && k == 0;
            for j in 0..f {
                let mut v = row[j];
                if marker {
                    v += proj.onset[j];
                }
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(rng) as f32;
                }
                data.push(v);
            }
        }
    }
    Tensor::new(vec![data.len() / f, f], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: SynthTask) -> SynthSpec {
        SynthSpec {
            feature_dim: 6,
            train: 40,
            dev: 9,
            test: 5,
            ..SynthSpec::new(task)
        }
    }

    #[test]
    fn copy_without_noise_is_a_function_of_target() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            vocab_size: 5,
            seq_len_min: 1,
            seq_len_max: 2,
            train: 200,
            ..small(SynthTask::Copy)
        };
        let s = synth_generate(&spec).unwrap();
        let seqs = &s.train.sequences;
        let mut pairs = 0;
        for a in seqs {
            for b in seqs {
                if a.target == b.target {
                    assert_eq!(a.frames, b.frames);
                    pairs += 1;
                }
            }
        }
        assert!(pairs > seqs.len());
        assert!(seqs.iter().all(|s| s.len() == s.target.len()));
    }

    #[test]
    fn order_pairs_are_frame_permutations() {
        let s = synth_generate(&SynthSpec {
            noise_sigma: 0.0,
            ..small(SynthTask::Order)
        })
        .unwrap();
        for pair in s.train.sequences.chunks(2) {
            let (a, b) = (&pair[0], &pair[1]);
            assert_ne!(a.target, b.target);
            let rows = |s: &Sequence| {
                let mut r: Vec<Vec<u32>> = s.frames.data().chunks(6).map(|c| c.iter().map(|x| x.to_bits()).collect()).collect();
                r.sort();
                r
            };
            assert_eq!(rows(a), rows(b));
        }
    }

    #[test]
    fn segment_frames_follow_run_lengths() {
        let spec = small(SynthTask::Segment);
        let s = synth_generate(&spec).unwrap();
        for seq in &s.train.sequences {
            let l = seq.target.len();
            assert!(seq.len() >= l * spec.frames_per_token_min);
            assert!(seq.len() <= l * spec.frames_per_token_max);
        }
        let repeats = s
            .train
            .sequences
            .iter()
            .flat_map(|q| q.target.windows(2).map(|w| (w[0] == w[1]) as usize))
            .sum::<usize>();
        assert!(repeats > 0);
    }

    #[test]
    fn counts_vocab_and_determinism() {
        let spec = small(SynthTask::Segment);
        let a = synth_generate(&spec).unwrap();
        assert_eq!((a.train.len(), a.dev.len(), a.test.len()), (40, 9, 5));
        assert_eq!(a.vocab.len(), 4 + spec.vocab_size);
        a.train.check_vocab(a.vocab.len()).unwrap();
        assert_eq!(a, synth_generate(&spec).unwrap());
        let b = synth_generate(&SynthSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a.train, b.train);
    }

    #[test]
    fn tiny_vocab_rejected() {
        let err = synth_generate(&SynthSpec {
            vocab_size: 4,
            ..small(SynthTask::Copy)
        })
        .unwrap_err();
        assert!(err.to_string().contains("vocab_size"));
    }

    #[test]
    fn set_round_trips_through_pairs() {
        let spec = SynthSpec {
            noise_sigma: 0.25,
            ..small(SynthTask::Order)
        };
        let mut back = SynthSpec::default();
        for (k, v) in spec.to_pairs() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, spec);
        assert!(!back.set("colour", "red").unwrap());
    }
}
