use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

fn check_corpus<T>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

fn ngram_counts<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 on a 0-100 scale: clipped 1-4-gram precisions, uniform
/// weights, brevity penalty, no smoothing.
pub fn bleu4<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            for (g, k) in &hc {
                matched[n - 1] += (*k).min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if c == 0 || (0..4).any(|i| matched[i] == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| 0.25 * (matched[i] as f64 / total[i] as f64).ln()).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(100.0 * bp * log_p.exp())
}

/// Longest common subsequence length.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean sentence-level ROUGE-L F1 (plain harmonic mean) on a 0-100 scale.
///
/// A pair of empty sequences scores 100; one empty side scores 0.
pub fn rouge_l<T: Eq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let sum: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| {
            if h.is_empty() && r.is_empty() {
                return 1.0;
            }
            let l = lcs_len(h, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / h.len() as f64;
            let rc = l / r.len() as f64;
            2.0 * p * rc / (p + rc)
        })
        .sum();
    Ok(100.0 * sum / hyps.len() as f64)
}

/// Score per million parameters.
pub fn information_density(score: f64, params_millions: f64) -> Result<f64> {
    if !(params_millions > 0.0) {
        return Err(Error::invalid(format!("parameter count {params_millions} must be positive")));
    }
    Ok(score / params_millions)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetScoreWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for NetScoreWeights {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 0.5,
            gamma: 0.5,
        }
    }
}

/// `20 log10(score^alpha / (params^beta macs^gamma))`, params in millions
/// and MACs in billions.
pub fn netscore(score: f64, params_millions: f64, macs_billions: f64, w: NetScoreWeights) -> Result<f64> {
    for (name, v) in [("score", score), ("params", params_millions), ("macs", macs_billions)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!("netscore {name} must be positive, got {v}")));
        }
    }
    Ok(20.0 * (w.alpha * score.log10() - w.beta * params_millions.log10() - w.gamma * macs_billions.log10()))
}
