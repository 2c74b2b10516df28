use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Parameters;
use crate::attention::{AttentionWeights, Linear};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Parameter binding and mode state for one forward pass on a tape.
///
/// Parameters are bound lazily the first time a layer asks for them, so a
/// pass only records the tensors it uses. Names can be pre-bound to other
/// tape values, which is how gradient checks feed `f64` copies in.
pub struct Forward<'t, 'p, R: Real> {
    pub tape: &'t mut Tape<'p, R>,
    params: Option<&'p Parameters>,
    bound: HashMap<String, Var>,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
    /// New batch-norm running statistics computed in training mode,
    /// as `(parameter name, values)`.
    pub bn_updates: Vec<(String, Vec<f32>)>,
}

impl<'t, 'p, R: Real> Forward<'t, 'p, R> {
    /// Inference mode: no dropout, batch norm uses running statistics.
    pub fn eval(tape: &'t mut Tape<'p, R>, params: &'p Parameters) -> Self {
        Self {
            tape,
            params: Some(params),
            bound: HashMap::new(),
            dropout: 0.0,
            rng: None,
            bn_updates: Vec::new(),
        }
    }

    /// Training mode with dropout drawn from `seed`.
    pub fn train(tape: &'t mut Tape<'p, R>, params: &'p Parameters, dropout: f64, seed: u64) -> Self {
        Self {
            tape,
            params: Some(params),
            bound: HashMap::new(),
            dropout,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            bn_updates: Vec::new(),
        }
    }

    /// Eval mode where every parameter must be supplied through [`bind`].
    ///
    /// [`bind`]: Forward::bind
    pub fn detached(tape: &'t mut Tape<'p, R>) -> Self {
        Self {
            tape,
            params: None,
            bound: HashMap::new(),
            dropout: 0.0,
            rng: None,
            bn_updates: Vec::new(),
        }
    }

    pub fn bind(&mut self, name: impl Into<String>, v: Var) {
        self.bound.insert(name.into(), v);
    }

    /// Every parameter name bound so far with its tape variable.
    pub fn bindings(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let params = self
            .params
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` not bound")))?;
        let v = self.tape.leaf(params.require(name)?);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.bound.contains_key(name) || self.params.is_some_and(|p| p.contains(name))
    }

    pub fn linear(&mut self, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            weight: self.param(&format!("{prefix}.weight"))?,
            bias: self.param(&format!("{prefix}.bias"))?,
        })
    }

    pub fn attention(&mut self, prefix: &str) -> Result<AttentionWeights> {
        Ok(AttentionWeights {
            q: self.linear(&format!("{prefix}.q"))?,
            k: self.linear(&format!("{prefix}.k"))?,
            v: self.linear(&format!("{prefix}.v"))?,
            o: self.linear(&format!("{prefix}.o"))?,
        })
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str, eps: f64) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gain"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, g, b, eps)
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let shape = self.tape.shape(x).to_vec();
        let n = self.tape.value(x).len();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<R> = (0..n)
            .map(|_| if rng.random::<f64>() < p { R::ZERO } else { R::of(keep) })
            .collect();
        let m = self.tape.constant(&shape, mask)?;
        self.tape.mul(x, m)
    }

    /// Zeroes the rows of `x[T, C]` whose `keep` entry is false.
    pub fn zero_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        if keep.iter().all(|&k| k) {
            return Ok(x);
        }
        let m: Vec<R> = keep.iter().map(|&k| if k { R::ONE } else { R::ZERO }).collect();
        let m = self.tape.constant(&[keep.len(), 1], m)?;
        self.tape.mul(x, m)
    }
}
