use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ConvStyle, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parameters {
    map: BTreeMap<String, Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.map.values().filter(|t| t.requires_grad()).map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.map.values_mut() {
            t.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
    Offsets,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    trainable: bool,
}

fn linear(specs: &mut Vec<Spec>, name: &str, fan_in: usize, fan_out: usize) {
    specs.push(Spec {
        name: format!("{name}.weight"),
        shape: vec![fan_in, fan_out],
        init: Init::Xavier { fan_in, fan_out },
        trainable: true,
    });
    specs.push(Spec {
        name: format!("{name}.bias"),
        shape: vec![fan_out],
        init: Init::Zeros,
        trainable: true,
    });
}

fn norm(specs: &mut Vec<Spec>, name: &str, d: usize) {
    specs.push(Spec {
        name: format!("{name}.gain"),
        shape: vec![d],
        init: Init::Ones,
        trainable: true,
    });
    specs.push(Spec {
        name: format!("{name}.bias"),
        shape: vec![d],
        init: Init::Zeros,
        trainable: true,
    });
}

fn attention(specs: &mut Vec<Spec>, name: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        linear(specs, &format!("{name}.{p}"), d, d);
    }
}

fn cope_table(specs: &mut Vec<Spec>, name: &str, cfg: &ModelConfig) {
    specs.push(Spec {
        name: format!("{name}.cope"),
        shape: vec![cfg.heads(), cfg.cope_p_max + 1, cfg.head_dim()],
        init: Init::Zeros,
        trainable: true,
    });
}

fn param_specs(cfg: &ModelConfig) -> Vec<Spec> {
    let d = cfg.hidden;
    let mut s = Vec::new();
    linear(&mut s, "frame_proj", cfg.feature_dim, d);
    s.push(Spec {
        name: "token_embed".into(),
        shape: vec![cfg.vocab, d],
        init: Init::Normal {
            std: (d as f64).powf(-0.5),
        },
        trainable: true,
    });
    if !cfg.tie_output_embedding {
        s.push(Spec {
            name: "output_proj".into(),
            shape: vec![d, cfg.vocab],
            init: Init::Xavier {
                fan_in: d,
                fan_out: cfg.vocab,
            },
            trainable: true,
        });
    }
    for l in 0..cfg.enc_layers {
        let p = format!("enc.{l}");
        norm(&mut s, &format!("{p}.attn_norm"), d);
        attention(&mut s, &format!("{p}.gloss"), d);
        s.push(Spec {
            name: format!("{p}.gloss.offsets"),
            shape: vec![cfg.heads(), cfg.gloss_samples],
            init: Init::Offsets,
            trainable: true,
        });
        if cfg.cope_in_gloss() {
            cope_table(&mut s, &format!("{p}.gloss"), cfg);
        }
        let c = format!("{p}.conv");
        match cfg.conv_style {
            ConvStyle::Signformer => {
                let e = cfg.conv_expansion * d;
                norm(&mut s, &format!("{c}.norm_in"), d);
                linear(&mut s, &format!("{c}.pw1"), d, e);
                depthwise(&mut s, &c, e, cfg.kernel);
                linear(&mut s, &format!("{c}.pw2"), e, d);
                norm(&mut s, &format!("{c}.norm_out"), d);
            }
            ConvStyle::ConformerOriginal => {
                norm(&mut s, &format!("{c}.norm"), d);
                linear(&mut s, &format!("{c}.pw1"), d, 2 * d);
                depthwise(&mut s, &c, d, cfg.kernel);
                norm(&mut s, &format!("{c}.bn"), d);
                for (stat, init) in [("running_mean", Init::Zeros), ("running_var", Init::Ones)] {
                    s.push(Spec {
                        name: format!("{c}.bn.{stat}"),
                        shape: vec![d],
                        init,
                        trainable: false,
                    });
                }
                linear(&mut s, &format!("{c}.pw2"), d, d);
            }
        }
        norm(&mut s, &format!("{p}.ff_norm"), d);
        linear(&mut s, &format!("{p}.ff.w1"), d, cfg.ff_dim());
        linear(&mut s, &format!("{p}.ff.w2"), cfg.ff_dim(), d);
    }
    norm(&mut s, "enc.final_norm", d);
    for l in 0..cfg.dec_layers {
        let p = format!("dec.{l}");
        norm(&mut s, &format!("{p}.self_norm"), d);
        attention(&mut s, &format!("{p}.self_attn"), d);
        norm(&mut s, &format!("{p}.cross_norm"), d);
        attention(&mut s, &format!("{p}.cross_attn"), d);
        if cfg.cope_in_cross() {
            cope_table(&mut s, &format!("{p}.cross_attn"), cfg);
        }
        norm(&mut s, &format!("{p}.ff_norm"), d);
        linear(&mut s, &format!("{p}.ff.w1"), d, cfg.ff_dim());
        linear(&mut s, &format!("{p}.ff.w2"), cfg.ff_dim(), d);
    }
    norm(&mut s, "dec.final_norm", d);
    s
}

fn depthwise(specs: &mut Vec<Spec>, conv: &str, channels: usize, kernel: usize) {
    specs.push(Spec {
        name: format!("{conv}.dw.weight"),
        shape: vec![channels, kernel],
        init: Init::Xavier {
            fan_in: kernel,
            fan_out: kernel,
        },
        trainable: true,
    });
    specs.push(Spec {
        name: format!("{conv}.dw.bias"),
        shape: vec![channels],
        init: Init::Zeros,
        trainable: true,
    });
}

/// Name, shape and trainability of every tensor a config owns, in
/// creation order.
pub(crate) fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    param_specs(cfg)
        .into_iter()
        .map(|s| (s.name, s.shape, s.trainable))
        .collect()
}

/// Xavier-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Builds every tensor for `cfg`, fully determined by `seed`.
///
/// Projections are Xavier-uniform, token embeddings normal with standard
/// deviation `hidden^-0.5`, biases zero, gains one, gloss offsets evenly
/// spread over the window and CoPE tables zero.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Result<Parameters> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets = cfg.gloss().initial_offsets();
    let mut params = Parameters::new();
    for spec in param_specs(cfg) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f32> = match spec.init {
            Init::Xavier { fan_in, fan_out } => {
                let b = xavier_bound(fan_in, fan_out);
                (0..n).map(|_| rng.random_range(-b..b) as f32).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Offsets => offsets.clone(),
        };
        let mut t = Tensor::new(spec.shape, data)?;
        t.set_requires_grad(spec.trainable);
        params.insert(spec.name, t);
    }
    Ok(params)
}
