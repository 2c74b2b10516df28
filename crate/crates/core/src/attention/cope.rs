//! Contextual position encoding.
//!
//! Positions are counted by accumulating sigmoid gates of query-key logits,
//! so a key's position depends on the content between it and the query.
//! The fractional positions index a learned table through linear
//! interpolation, and the result is added to the attention logits.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Mask, Real, Tape, Var};

/// Direction in which gates are accumulated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CopeMode {
    /// `p[i,j] = Σ_{t=j..=i} g[i,t]`; requires a square logit matrix.
    Causal,
    /// `p[i,j] = Σ_{t<=j} g[i,t]`: counts from the first source frame.
    Prefix,
    /// `p[i,j] = Σ_{t>=j} g[i,t]`: counts from the last source frame.
    Suffix,
}

impl CopeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CopeMode::Causal => "causal",
            CopeMode::Prefix => "prefix",
            CopeMode::Suffix => "suffix",
        }
    }
}

impl FromStr for CopeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(CopeMode::Causal),
            "prefix" => Ok(CopeMode::Prefix),
            "suffix" => Ok(CopeMode::Suffix),
            _ => Err(Error::config("cope_mode", format!("expected causal|prefix|suffix, got `{s}`"))),
        }
    }
}

/// Learned position table plus the settings used to index it.
#[derive(Clone, Copy, Debug)]
pub struct CopeBias {
    /// `[.., p_max + 1, d_head]`, matching the query's leading dims.
    pub table: Var,
    pub p_max: usize,
    pub mode: CopeMode,
}

/// Gated positions from precomputed logits `[.., Q, T]`.
///
/// Entries dropped by `keep` contribute a gate of 0. The result is capped
/// to `[0, p_max]`.
pub fn cope_positions_from_logits<R: Real>(
    tape: &mut Tape<'_, R>,
    logits: Var,
    mode: CopeMode,
    keep: Option<&Mask>,
    p_max: usize,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let r = shape.len();
    if r < 2 {
        return Err(Error::Shape {
            op: "cope_positions",
            lhs: shape,
            rhs: vec![],
        });
    }
    let (q, t) = (shape[r - 2], shape[r - 1]);
    let mut gates = tape.sigmoid(logits)?;
    if mode == CopeMode::Causal {
        if q != t {
            return Err(Error::Shape {
                op: "cope_positions(causal)",
                lhs: vec![q],
                rhs: vec![t],
            });
        }
        let tri: Vec<R> = (0..q * t)
            .map(|i| if i % t <= i / t { R::ONE } else { R::ZERO })
            .collect();
        let tri = tape.constant(&[q, t], tri)?;
        gates = tape.mul(gates, tri)?;
    }
    if let Some(m) = keep {
        let vals: Vec<R> = m.keep().iter().map(|&k| if k { R::ONE } else { R::ZERO }).collect();
        let c = tape.constant(m.shape(), vals)?;
        gates = tape.mul(gates, c)?;
    }
    let pos = tape.cumsum(gates, mode != CopeMode::Prefix)?;
    tape.clamp(pos, 0.0, p_max as f64)
}

/// Positions for queries `q[Q,d]` against keys `k[T,d]` with gates
/// `sigmoid(q·k)`.
pub fn cope_positions<R: Real>(
    tape: &mut Tape<'_, R>,
    q: Var,
    k: Var,
    mode: CopeMode,
    p_max: usize,
) -> Result<Var> {
    let logits = tape.matmul_nt(q, k)?;
    cope_positions_from_logits(tape, logits, mode, None, p_max)
}

/// `bias[i,j] = interp(q[i] · table[p]) at p = positions[i,j]`.
pub fn cope_logit_bias<R: Real>(tape: &mut Tape<'_, R>, q: Var, positions: Var, table: Var) -> Result<Var> {
    let per_position = tape.matmul_nt(q, table)?;
    tape.cope_interp(per_position, positions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(q: Vec<f64>, k: Vec<f64>, qn: usize, tn: usize, d: usize, mode: CopeMode, p_max: usize) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let qv = tape.constant(&[qn, d], q).unwrap();
        let kv = tape.constant(&[tn, d], k).unwrap();
        let p = cope_positions(&mut tape, qv, kv, mode, p_max).unwrap();
        tape.value(p).to_vec()
    }

    #[test]
    fn saturated_causal_gates_give_integer_distances() {
        // q·k = 400 for every pair: sigmoid rounds to exactly 1.
        let n = 5;
        let p = run(vec![20.0; n], vec![20.0; n], n, n, 1, CopeMode::Causal, 64);
        for i in 0..n {
            for j in 0..n {
                let want = if j <= i { (i - j + 1) as f64 } else { 0.0 };
                assert_eq!(p[i * n + j], want, "i={i} j={j}");
            }
        }
    }

    #[test]
    fn orthogonal_prefix_gates_are_half() {
        let p = run(vec![1.0, 0.0], vec![0.0, 1.0, 0.0, 2.0, 0.0, -3.0], 1, 3, 2, CopeMode::Prefix, 64);
        assert_eq!(p, vec![0.5, 1.0, 1.5]);
    }

    #[test]
    fn random_case_matches_cumulative_sum_oracle() {
        let (qn, tn, d) = (3, 4, 2);
        let q: Vec<f64> = (0..qn * d).map(|i| ((i as f64) * 0.77).sin()).collect();
        let k: Vec<f64> = (0..tn * d).map(|i| ((i as f64) * 1.31).cos()).collect();
        for mode in [CopeMode::Prefix, CopeMode::Suffix] {
            let got = run(q.clone(), k.clone(), qn, tn, d, mode, 64);
            for i in 0..qn {
                let g: Vec<f64> = (0..tn)
                    .map(|j| {
                        let dot: f64 = (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum();
                        1.0 / (1.0 + (-dot).exp())
                    })
                    .collect();
                for j in 0..tn {
                    let want: f64 = match mode {
                        CopeMode::Prefix => g[..=j].iter().sum(),
                        _ => g[j..].iter().sum(),
                    };
                    assert!((got[i * tn + j] - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn positions_are_capped() {
        let p = run(vec![20.0; 6], vec![20.0; 6], 6, 6, 1, CopeMode::Causal, 3);
        assert!(p.iter().all(|&v| (0.0..=3.0).contains(&v)));
        assert_eq!(p[5 * 6], 3.0);
    }

    #[test]
    fn causal_mode_needs_square_logits() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
        let k = tape.constant(&[3, 1], vec![1.0; 3]).unwrap();
        assert!(cope_positions(&mut tape, q, k, CopeMode::Causal, 8).is_err());
    }

    fn bias_for(table: Vec<f64>, pos: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let e = tape.constant(&[4, 2], table).unwrap();
        let p = tape.constant(&[1, 1], vec![pos]).unwrap();
        let b = cope_logit_bias(&mut tape, q, p, e).unwrap();
        tape.value(b)[0]
    }

    #[test]
    fn logit_bias_cases() {
        let e = vec![0.1, 0.2, 1.0, -1.0, 0.5, 0.25, 3.0, 1.0];
        let dot = |r: usize| e[2 * r] + 2.0 * e[2 * r + 1];
        assert_eq!(bias_for(vec![0.0; 8], 1.7), 0.0);
        assert_eq!(bias_for(e.clone(), 2.0), dot(2));
        assert!((bias_for(e.clone(), 1.5) - 0.5 * (dot(1) + dot(2))).abs() < 1e-12);
    }
}
