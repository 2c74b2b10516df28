use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    SophiaG,
}

impl OptimizerKind {
    /// Small models use AdamW; hidden sizes of 128 and up use SophiaG.
    pub fn for_hidden(hidden: usize) -> Self {
        if hidden >= 128 {
            OptimizerKind::SophiaG
        } else {
            OptimizerKind::AdamW
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::SophiaG => "sophiag",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            OptimizerKind::AdamW => 1,
            OptimizerKind::SophiaG => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(OptimizerKind::AdamW),
            2 => Some(OptimizerKind::SophiaG),
            _ => None,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(OptimizerKind::AdamW),
            "sophiag" | "sophia" => Ok(OptimizerKind::SophiaG),
            _ => Err(Error::config("optimizer", format!("`{s}` is not one of auto, adamw, sophiag"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SophiaConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub rho: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub hessian_interval: u64,
}

impl Default for SophiaConfig {
    fn default() -> Self {
        Self {
            beta1: 0.965,
            beta2: 0.99,
            rho: 0.04,
            eps: 1e-12,
            weight_decay: 0.1,
            hessian_interval: 10,
        }
    }
}

/// Moment buffers keyed by parameter name, plus the step counter.
///
/// `second` holds AdamW's `v` or SophiaG's diagonal Hessian estimate `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: BTreeMap<String, Vec<f32>>,
    pub second: BTreeMap<String, Vec<f32>>,
}

impl OptimizerState {
    /// Zeroed buffers for every trainable parameter.
    pub fn new(kind: OptimizerKind, params: &Parameters) -> Self {
        let zeros = || -> BTreeMap<String, Vec<f32>> {
            params
                .iter()
                .filter(|(_, t)| t.requires_grad())
                .map(|(n, t)| (n.to_string(), vec![0.0; t.numel()]))
                .collect()
        };
        Self {
            kind,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Fails unless buffers mirror the trainable parameters exactly.
    pub fn check(&self, params: &Parameters) -> Result<()> {
        let trainable: Vec<(&str, usize)> = params
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, t)| (n, t.numel()))
            .collect();
        for bufs in [&self.first, &self.second] {
            if bufs.len() != trainable.len() {
                return Err(Error::invalid(format!(
                    "optimizer has {} buffers for {} trainable parameters",
                    bufs.len(),
                    trainable.len()
                )));
            }
            for &(n, len) in &trainable {
                match bufs.get(n) {
                    Some(b) if b.len() == len => {}
                    Some(b) => {
                        return Err(Error::invalid(format!(
                            "optimizer buffer `{n}` has {} values, parameter has {len}",
                            b.len()
                        )))
                    }
                    None => return Err(Error::invalid(format!("optimizer buffer for `{n}` missing"))),
                }
            }
        }
        Ok(())
    }
}

fn check_grads(params: &Parameters) -> Result<()> {
    for (name, t) in params.iter().filter(|(_, t)| t.requires_grad()) {
        match t.grad() {
            Some(g) if g.iter().all(|v| v.is_finite()) => {}
            Some(_) => {
                return Err(Error::NonFinite {
                    op: format!("gradient of `{name}`"),
                })
            }
            None => return Err(Error::invalid(format!("gradient of `{name}` not populated"))),
        }
    }
    Ok(())
}

/// One decoupled-weight-decay Adam step using each tensor's stored gradient.
///
/// Nothing is modified when any gradient is non-finite.
pub fn adamw_step(params: &mut Parameters, state: &mut OptimizerState, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    check_grads(params)?;
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (name, p) in params.iter_mut().filter(|(_, t)| t.requires_grad()) {
        let m = state.first.get_mut(name).expect("checked buffers");
        let v = state.second.get_mut(name).expect("checked buffers");
        let g = p.grad().expect("checked grads").to_vec();
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i] as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let xi = *x as f64 * (1.0 - lr * cfg.weight_decay);
            *x = (xi - lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps)) as f32;
        }
    }
    Ok(())
}

/// Folds a sampled-label gradient into SophiaG's Hessian estimate:
/// `h <- beta2 h + (1 - beta2) B g^2`.
pub fn sophia_update_hessian(
    state: &mut OptimizerState,
    sampled: &BTreeMap<String, Vec<f32>>,
    batch_tokens: f64,
    cfg: &SophiaConfig,
) -> Result<()> {
    for (name, h) in state.second.iter_mut() {
        let g = sampled
            .get(name)
            .ok_or_else(|| Error::invalid(format!("sampled gradient for `{name}` missing")))?;
        if g.len() != h.len() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("sampled gradient of `{name}`"),
            });
        }
        for (hi, &gi) in h.iter_mut().zip(g) {
            let gi = gi as f64;
            *hi = (cfg.beta2 * *hi as f64 + (1.0 - cfg.beta2) * batch_tokens * gi * gi) as f32;
        }
    }
    Ok(())
}

/// One SophiaG step: `p <- p - lr clip(m / max(rho h, eps), -1, 1) - lr wd p`.
pub fn sophiag_step(params: &mut Parameters, state: &mut OptimizerState, lr: f64, cfg: &SophiaConfig) -> Result<()> {
    check_grads(params)?;
    state.step += 1;
    for (name, p) in params.iter_mut().filter(|(_, t)| t.requires_grad()) {
        let m = state.first.get_mut(name).expect("checked buffers");
        let h = &state.second[name];
        let g = p.grad().expect("checked grads").to_vec();
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g[i] as f64;
            m[i] = mi as f32;
            let ratio = (mi / (cfg.rho * h[i] as f64).max(cfg.eps)).clamp(-1.0, 1.0);
            let xi = *x as f64;
            *x = (xi - lr * ratio - lr * cfg.weight_decay * xi) as f32;
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the applied scale.
pub fn clip_grad_norm(params: &mut Parameters, max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|&v| v as f64 * v as f64)
        .sum();
    let norm = sq.sqrt();
    if !(norm > max_norm) {
        return 1.0;
    }
    let scale = max_norm / norm;
    for (_, t) in params.iter_mut() {
        if let Some(g) = t.grad_mut() {
            for v in g {
                *v = (*v as f64 * scale) as f32;
            }
        }
    }
    scale
}

/// Global L2 norm of all stored gradients.
pub fn grad_norm(params: &Parameters) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn one(data: Vec<f32>, grad: Vec<f32>) -> Parameters {
        let mut t = Tensor::new(vec![data.len()], data).unwrap().with_grad();
        t.set_grad(grad).unwrap();
        let mut p = Parameters::new();
        p.insert("w", t);
        p
    }

    fn w(p: &Parameters) -> Vec<f32> {
        p.get("w").unwrap().data().to_vec()
    }

    #[test]
    fn adamw_zero_grad_zero_wd_is_noop() {
        let mut p = one(vec![0.5, -2.0], vec![0.0, 0.0]);
        let mut s = OptimizerState::new(OptimizerKind::AdamW, &p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &mut s, 0.004, &cfg).unwrap();
        assert_eq!(w(&p), vec![0.5, -2.0]);
    }

    #[test]
    fn adamw_first_step_matches_formula() {
        let mut p = one(vec![0.3, -1.2, 2.0], vec![0.5, -0.01, 3.0]);
        let mut s = OptimizerState::new(OptimizerKind::AdamW, &p);
        let cfg = AdamWConfig::default();
        let lr = 0.004;
        adamw_step(&mut p, &mut s, lr, &cfg).unwrap();
        // After bias correction m_hat = g and v_hat = g^2.
        let oracle = |x: f64, g: f64| x * (1.0 - lr * 1e-3) - lr * g / (g.abs() + 1e-8);
        let got = w(&p);
        for (i, (x, g)) in [(0.3, 0.5), (-1.2, -0.01), (2.0, 3.0)].into_iter().enumerate() {
            let x = x as f32 as f64;
            let g = g as f32 as f64;
            assert!((got[i] as f64 - oracle(x, g)).abs() < 1e-7, "{i}");
        }
    }

    #[test]
    fn adamw_weight_decay_only() {
        let mut p = one(vec![2.0], vec![0.0]);
        let mut s = OptimizerState::new(OptimizerKind::AdamW, &p);
        adamw_step(&mut p, &mut s, 0.1, &AdamWConfig::default()).unwrap();
        assert_eq!(w(&p)[0], (2.0f64 * (1.0 - 0.1 * 1e-3)) as f32);
    }

    #[test]
    fn nan_grad_aborts_and_names_parameter() {
        let mut p = one(vec![1.0], vec![f32::NAN]);
        let mut s = OptimizerState::new(OptimizerKind::AdamW, &p);
        let err = adamw_step(&mut p, &mut s, 0.1, &AdamWConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(w(&p), vec![1.0]);
        assert_eq!(s.step, 0);
        assert!(sophiag_step(&mut p, &mut s, 0.1, &SophiaConfig::default()).is_err());
    }

    #[test]
    fn sophia_zero_hessian_saturates() {
        let mut p = one(vec![0.0, 0.0, 0.0], vec![0.5, -1e-6, 3.0]);
        let mut s = OptimizerState::new(OptimizerKind::SophiaG, &p);
        let cfg = SophiaConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        sophiag_step(&mut p, &mut s, 0.01, &cfg).unwrap();
        assert_eq!(w(&p), vec![-0.01, 0.01, -0.01]);
    }

    #[test]
    fn sophia_huge_hessian_gives_small_steps() {
        let mut p = one(vec![0.0], vec![1.0]);
        let mut s = OptimizerState::new(OptimizerKind::SophiaG, &p);
        s.second.insert("w".into(), vec![1e6]);
        let cfg = SophiaConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        sophiag_step(&mut p, &mut s, 0.01, &cfg).unwrap();
        let expect = -0.01 * 0.035 / (0.04 * 1e6);
        assert!((w(&p)[0] as f64 - expect).abs() < 1e-12);
        assert!(w(&p)[0].abs() < 1e-6);
    }

    #[test]
    fn sophia_hand_coordinate() {
        let mut p = one(vec![0.7], vec![0.2]);
        let mut s = OptimizerState::new(OptimizerKind::SophiaG, &p);
        s.first.insert("w".into(), vec![0.1]);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), vec![0.5f32]);
        let cfg = SophiaConfig::default();
        sophia_update_hessian(&mut s, &g, 8.0, &cfg).unwrap();
        let h = 0.01 * 8.0 * 0.25;
        assert!((s.second["w"][0] as f64 - h).abs() < 1e-9);
        sophiag_step(&mut p, &mut s, 0.004, &cfg).unwrap();
        let m = 0.965 * 0.1f32 as f64 + 0.035 * 0.2f32 as f64;
        let ratio = (m / (0.04 * (h as f32) as f64)).clamp(-1.0, 1.0);
        let x = 0.7f32 as f64;
        let expect = x - 0.004 * ratio - 0.004 * 0.1 * x;
        assert!((w(&p)[0] as f64 - expect).abs() < 1e-7);
    }

    #[test]
    fn clip_three_four_five() {
        let mut p = one(vec![0.0, 0.0], vec![3.0, 4.0]);
        let s = clip_grad_norm(&mut p, 1.0);
        assert!((s - 0.2).abs() < 1e-12);
        let g = p.get("w").unwrap().grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-7 && (g[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn clip_below_threshold_untouched() {
        let mut p = one(vec![0.0], vec![2.5]);
        assert_eq!(clip_grad_norm(&mut p, 5.0), 1.0);
        assert_eq!(p.get("w").unwrap().grad().unwrap(), &[2.5]);
    }

    #[test]
    fn kind_rule() {
        assert_eq!(OptimizerKind::for_hidden(64), OptimizerKind::AdamW);
        assert_eq!(OptimizerKind::for_hidden(128), OptimizerKind::SophiaG);
        assert_eq!(OptimizerKind::for_hidden(256), OptimizerKind::SophiaG);
    }

    proptest! {
        #[test]
        fn clip_bounds_and_idempotence(g in prop::collection::vec(-100.0f32..100.0, 1..20), max in 0.1f64..10.0) {
            let mut p = one(vec![0.0; g.len()], g);
            clip_grad_norm(&mut p, max);
            prop_assert!(grad_norm(&p) <= max + 1e-6 * max.max(1.0));
            let once = p.get("w").unwrap().grad().unwrap().to_vec();
            clip_grad_norm(&mut p, max);
            let twice = p.get("w").unwrap().grad().unwrap();
            for (a, b) in once.iter().zip(twice) {
                prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-6));
            }
        }

        #[test]
        fn sophia_update_bounded(
            x in prop::collection::vec(-10.0f32..10.0, 1..10),
            h in 0.0f32..100.0,
            m0 in -5.0f32..5.0,
            lr in 1e-5f64..0.1,
        ) {
            let n = x.len();
            let grads: Vec<f32> = (0..n).map(|i| (i as f32 - 3.0) * 0.7).collect();
            let mut p = one(x.clone(), grads);
            let mut s = OptimizerState::new(OptimizerKind::SophiaG, &p);
            s.first.insert("w".into(), vec![m0; n]);
            s.second.insert("w".into(), vec![h; n]);
            let cfg = SophiaConfig::default();
            sophiag_step(&mut p, &mut s, lr, &cfg).unwrap();
            for (a, b) in x.iter().zip(w(&p)) {
                let bound = lr * (1.0 + cfg.weight_decay * a.abs() as f64);
                prop_assert!(((b - a).abs() as f64) <= bound * (1.0 + 1e-5) + 1e-6);
                prop_assert!(b.is_finite());
            }
        }

        #[test]
        fn adamw_finite_on_finite_grads(
            x in prop::collection::vec(-10.0f32..10.0, 1..10),
            steps in 1usize..6,
        ) {
            let n = x.len();
            let mut p = one(x, vec![0.0; n]);
            let mut s = OptimizerState::new(OptimizerKind::AdamW, &p);
            for k in 0..steps {
                let g: Vec<f32> = (0..n).map(|i| ((i + k) as f32).sin() * 1e3).collect();
                p.get_mut("w").unwrap().set_grad(g).unwrap();
                adamw_step(&mut p, &mut s, 0.004, &AdamWConfig::default()).unwrap();
            }
            prop_assert!(p.all_finite());
            prop_assert_eq!(s.step, steps as u64);
        }
    }
}
