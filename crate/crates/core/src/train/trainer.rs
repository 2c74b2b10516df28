use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::optim::{adamw_step, clip_grad_norm, sophia_update_hessian, sophiag_step};
use super::{AdamWConfig, OptimizerKind, OptimizerState, PlateauScheduler, SophiaConfig};
use crate::data::{batch_order, save_checkpoint, Checkpoint, FeatureDataset, Progress, Sequence};
use crate::decode::{beam_search, bleu4, greedy_decode, rouge_l, DecodeOptions, ModelScorer};
use crate::error::{Error, Result};
use crate::model::{decode, encode, parse, Forward, Signformer};
use crate::tensor::Tape;
use crate::tokens::{BOS, EOS};

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_factor: f64,
    pub lr_patience: u64,
    pub min_lr: f64,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// `None` picks by hidden size.
    pub optimizer: Option<OptimizerKind>,
    pub adamw: AdamWConfig,
    pub sophia: SophiaConfig,
    pub max_decode_len: usize,
    /// Stop once dev BLEU-4 reaches this value.
    pub target_bleu: Option<f64>,
    /// Stop after the first epoch that ends past this many seconds.
    pub time_limit_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.004,
            lr_factor: 0.5,
            lr_patience: 5,
            min_lr: 1e-7,
            clip_norm: 5.0,
            label_smoothing: 0.0,
            seed: 1,
            optimizer: None,
            adamw: AdamWConfig::default(),
            sophia: SophiaConfig::default(),
            max_decode_len: 60,
            target_bleu: None,
            time_limit_secs: None,
        }
    }
}

fn parse_opt(key: &str, value: &str) -> Result<Option<f64>> {
    match value {
        "none" | "off" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn show_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::config("lr_factor", "must lie in (0, 1)"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing", "must lie in [0, 1)"));
        }
        if self.sophia.hessian_interval == 0 {
            return Err(Error::config("hessian_interval", "must be at least 1"));
        }
        if self.max_decode_len == 0 {
            return Err(Error::config("max_decode_len", "must be at least 1"));
        }
        Ok(())
    }

    pub fn optimizer_for(&self, hidden: usize) -> OptimizerKind {
        self.optimizer.unwrap_or_else(|| OptimizerKind::for_hidden(hidden))
    }

    pub fn scheduler(&self) -> PlateauScheduler {
        PlateauScheduler::new(self.learning_rate, self.lr_factor, self.lr_patience, self.min_lr)
    }

    /// Sets one `key = value` field; `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "lr_factor" => self.lr_factor = parse(key, value)?,
            "lr_patience" => self.lr_patience = parse(key, value)?,
            "min_lr" => self.min_lr = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "label_smoothing" => self.label_smoothing = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "auto" => None,
                    v => Some(v.parse()?),
                }
            }
            "adam_beta1" => self.adamw.beta1 = parse(key, value)?,
            "adam_beta2" => self.adamw.beta2 = parse(key, value)?,
            "adam_eps" => self.adamw.eps = parse(key, value)?,
            "adam_weight_decay" => self.adamw.weight_decay = parse(key, value)?,
            "sophia_beta1" => self.sophia.beta1 = parse(key, value)?,
            "sophia_beta2" => self.sophia.beta2 = parse(key, value)?,
            "sophia_rho" => self.sophia.rho = parse(key, value)?,
            "sophia_eps" => self.sophia.eps = parse(key, value)?,
            "sophia_weight_decay" => self.sophia.weight_decay = parse(key, value)?,
            "hessian_interval" => self.sophia.hessian_interval = parse(key, value)?,
            "max_decode_len" => self.max_decode_len = parse(key, value)?,
            "target_bleu" => self.target_bleu = parse_opt(key, value)?,
            "time_limit_secs" => self.time_limit_secs = parse_opt(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("lr_factor", self.lr_factor.to_string()),
            ("lr_patience", self.lr_patience.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("seed", self.seed.to_string()),
            ("optimizer", self.optimizer.map_or("auto", OptimizerKind::as_str).to_string()),
            ("adam_beta1", self.adamw.beta1.to_string()),
            ("adam_beta2", self.adamw.beta2.to_string()),
            ("adam_eps", self.adamw.eps.to_string()),
            ("adam_weight_decay", self.adamw.weight_decay.to_string()),
            ("sophia_beta1", self.sophia.beta1.to_string()),
            ("sophia_beta2", self.sophia.beta2.to_string()),
            ("sophia_rho", self.sophia.rho.to_string()),
            ("sophia_eps", self.sophia.eps.to_string()),
            ("sophia_weight_decay", self.sophia.weight_decay.to_string()),
            ("hessian_interval", self.sophia.hessian_interval.to_string()),
            ("max_decode_len", self.max_decode_len.to_string()),
            ("target_bleu", show_opt(self.target_bleu)),
            ("time_limit_secs", show_opt(self.time_limit_secs)),
        ]
    }
}

/// splitmix64 over a running state.
fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Token-mean cross entropy of the batch.
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    pub tokens: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DevScores {
    pub bleu4: f64,
    pub rouge_l: f64,
}

/// One line of the metrics history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: u64,
    pub train_loss: f64,
    pub dev_bleu4: f64,
    pub dev_rouge_l: f64,
    pub lr: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} train_loss={:.6} dev_bleu4={:.4} dev_rouge_l={:.4} lr={:e}",
            self.epoch, self.train_loss, self.dev_bleu4, self.dev_rouge_l, self.lr
        )
    }
}

enum Labels {
    Gold,
    /// Drawn from the model's own output distribution.
    Sampled(u64),
}

struct ItemOut {
    loss: f64,
    grads: Vec<(String, Vec<f32>)>,
    bn: Vec<(String, Vec<f32>)>,
}

fn item_pass(
    model: &Signformer,
    seq: &Sequence,
    weight: f64,
    seed: u64,
    labels: Labels,
    smoothing: f64,
) -> Result<ItemOut> {
    let cfg = model.config();
    let mut tape = Tape::<f32>::new();
    let mut fwd = Forward::train(&mut tape, model.params(), cfg.dropout, seed);
    let x = fwd.tape.leaf(&seq.frames);
    let keep = vec![true; seq.len()];
    let memory = encode(&mut fwd, cfg, model.ape(), x, &keep)?;
    let mut input = Vec::with_capacity(seq.target.len() + 1);
    input.push(BOS);
    input.extend_from_slice(&seq.target);
    let logits = decode(&mut fwd, cfg, model.ape(), &input, memory, &keep)?;
    let targets: Vec<usize> = match labels {
        Labels::Gold => seq.target.iter().chain([&EOS]).map(|&t| t as usize).collect(),
        Labels::Sampled(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            fwd.tape
                .value(logits)
                .chunks(cfg.vocab)
                .map(|row| {
                    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
                    let w: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
                    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
                    for (j, wj) in w.iter().enumerate() {
                        u -= wj;
                        if u <= 0.0 {
                            return j;
                        }
                    }
                    w.len() - 1
                })
                .collect()
        }
    };
    let ce = fwd.tape.cross_entropy(logits, &targets, usize::MAX, smoothing)?;
    let loss = fwd.tape.scalar(ce) as f64;
    if !loss.is_finite() {
        return Ok(ItemOut {
            loss,
            grads: Vec::new(),
            bn: Vec::new(),
        });
    }
    let scaled = fwd.tape.scale(ce, weight)?;
    let grads = fwd.tape.backward(scaled)?;
    let params = model.params();
    let mut out: Vec<(String, Vec<f32>)> = fwd
        .bindings()
        .filter(|(n, _)| params.get(n).is_some_and(|t| t.requires_grad()))
        .filter_map(|(n, v)| grads.get(v).map(|g| (n.to_string(), g.to_vec())))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(ItemOut {
        loss,
        grads: out,
        bn: std::mem::take(&mut fwd.bn_updates),
    })
}

/// Weighted per-item passes in parallel, summed in item order.
fn batch_pass(
    model: &Signformer,
    ds: &FeatureDataset,
    idx: &[usize],
    seed_of: impl Fn(usize) -> u64 + Sync,
    sampled: bool,
    smoothing: f64,
) -> Result<(f64, BTreeMap<String, Vec<f32>>, Vec<ItemOut>, usize)> {
    let tokens: usize = idx.iter().map(|&i| ds.sequences[i].target.len() + 1).sum();
    let outs: Vec<ItemOut> = idx
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let seq = &ds.sequences[i];
            let w = (seq.target.len() + 1) as f64 / tokens as f64;
            let labels = if sampled {
                Labels::Sampled(mix(&[seed_of(k), 0x5A])) // label stream
            } else {
                Labels::Gold
            };
            item_pass(model, seq, w, seed_of(k), labels, smoothing)
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut sum: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (o, &i) in outs.iter().zip(idx) {
        let w = (ds.sequences[i].target.len() + 1) as f64 / tokens as f64;
        loss += o.loss * w;
        for (name, g) in &o.grads {
            match sum.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    sum.insert(name.clone(), g.clone());
                }
            }
        }
    }
    Ok((loss, sum, outs, tokens))
}

/// Owns a model, its optimizer and schedule, and drives training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Signformer,
    pub cfg: TrainConfig,
    pub optimizer: OptimizerState,
    pub progress: Progress,
}

impl Trainer {
    pub fn new(model: Signformer, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let kind = cfg.optimizer_for(model.config().hidden);
        let optimizer = OptimizerState::new(kind, model.params());
        let progress = Progress {
            scheduler: cfg.scheduler(),
            ..Progress::default()
        };
        Ok(Self {
            model,
            cfg,
            optimizer,
            progress,
        })
    }

    /// Resumes from `ck`; missing optimizer state starts fresh.
    pub fn from_checkpoint(ck: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Signformer::from_parameters(ck.config, ck.params)?;
        let optimizer = match ck.optimizer {
            Some(st) => {
                st.check(model.params())?;
                st
            }
            None => OptimizerState::new(cfg.optimizer_for(model.config().hidden), model.params()),
        };
        Ok(Self {
            model,
            cfg,
            optimizer,
            progress: ck.progress,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config().clone(),
            params: self.model.params().clone(),
            optimizer: Some(self.optimizer.clone()),
            progress: self.progress.clone(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.progress.scheduler.lr
    }

    /// One optimizer step on the dataset items `idx`.
    pub fn train_step(&mut self, ds: &FeatureDataset, idx: &[usize]) -> Result<StepReport> {
        if idx.is_empty() {
            return Err(Error::invalid("train_step: empty batch"));
        }
        let step = self.progress.step;
        let seed = self.cfg.seed;
        let diverged = |reason: String| Error::Divergence { step, reason };

        let (loss, grads, outs, tokens) = batch_pass(
            &self.model,
            ds,
            idx,
            |k| mix(&[seed, step, k as u64]),
            false,
            self.cfg.label_smoothing,
        )
        .map_err(|e| match e {
            Error::NonFinite { op } => diverged(format!("non-finite value in {op}")),
            e => e,
        })?;
        if !loss.is_finite() {
            return Err(diverged(format!("loss is {loss}")));
        }

        // Batch-norm running statistics: mean of the per-item updates.
        let mut bn: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
        for o in &outs {
            for (name, v) in &o.bn {
                let e = bn.entry(name).or_insert_with(|| (vec![0.0; v.len()], 0));
                e.0.iter_mut().zip(v).for_each(|(a, &b)| *a += b as f64);
                e.1 += 1;
            }
        }

        let params = self.model.params_mut();
        for (name, (acc, n)) in bn {
            if let Some(t) = params.get_mut(name) {
                for (x, a) in t.data_mut().iter_mut().zip(&acc) {
                    *x = (a / n as f64) as f32;
                }
            }
        }
        let names: Vec<String> = params
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n.to_string())
            .collect();
        let mut grads = grads;
        for name in names {
            let t = params.get_mut(&name).expect("listed above");
            let g = grads.remove(&name).unwrap_or_else(|| vec![0.0; t.numel()]);
            t.set_grad(g)?;
        }
        let norm = super::grad_norm(params);
        if !norm.is_finite() {
            return Err(diverged(format!("gradient norm is {norm}")));
        }
        clip_grad_norm(params, self.cfg.clip_norm);

        let lr = self.lr();
        let result = match self.optimizer.kind {
            OptimizerKind::AdamW => adamw_step(self.model.params_mut(), &mut self.optimizer, lr, &self.cfg.adamw),
            OptimizerKind::SophiaG => {
                if self.optimizer.step.is_multiple_of(self.cfg.sophia.hessian_interval) {
                    let (_, sampled, _, _) = batch_pass(
                        &self.model,
                        ds,
                        idx,
                        |k| mix(&[seed, step, k as u64, 1]),
                        true,
                        0.0,
                    )?;
                    sophia_update_hessian(&mut self.optimizer, &sampled, tokens as f64, &self.cfg.sophia)
                        .map_err(|e| diverged(e.to_string()))?;
                }
                sophiag_step(self.model.params_mut(), &mut self.optimizer, lr, &self.cfg.sophia)
            }
        };
        result.map_err(|e| match e {
            Error::NonFinite { op } => diverged(format!("non-finite {op}")),
            e => e,
        })?;
        if !self.model.params().all_finite() {
            return Err(diverged("parameters became non-finite".into()));
        }
        self.model.params_mut().zero_grads();
        self.progress.step += 1;
        Ok(StepReport {
            step: self.progress.step,
            loss,
            grad_norm: norm,
            lr,
            tokens,
        })
    }

    /// Batches of the current epoch, in the order they are consumed.
    pub fn epoch_batches(&self, n: usize) -> Vec<Vec<usize>> {
        batch_order(n, self.cfg.batch_size, mix(&[self.cfg.seed, self.progress.epoch, 0xE9]), true)
    }

    /// Runs the remaining batches of the current epoch and returns the
    /// token-weighted mean loss.
    pub fn run_epoch(&mut self, train: &FeatureDataset) -> Result<f64> {
        let batches = self.epoch_batches(train.len());
        let (mut loss, mut tokens) = (0.0, 0usize);
        for b in &batches[self.progress.batch_in_epoch as usize..] {
            let r = self.train_step(train, b)?;
            loss += r.loss * r.tokens as f64;
            tokens += r.tokens;
            self.progress.batch_in_epoch += 1;
        }
        Ok(if tokens == 0 { 0.0 } else { loss / tokens as f64 })
    }

    /// Trains until `cfg.epochs`, a BLEU target or the time limit. With
    /// `out_dir`, writes `last.sgck` after every epoch and `best.sgck` on
    /// every dev improvement.
    pub fn fit(
        &mut self,
        train: &FeatureDataset,
        dev: &FeatureDataset,
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>> {
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let start = Instant::now();
        let mut history = Vec::new();
        while self.progress.epoch < self.cfg.epochs {
            let train_loss = self.run_epoch(train)?;
            let scores = if dev.is_empty() {
                DevScores {
                    bleu4: 0.0,
                    rouge_l: 0.0,
                }
            } else {
                evaluate(&self.model, dev, self.cfg.max_decode_len)?
            };
            let improved = scores.bleu4 > self.progress.scheduler.best;
            let lr = self.progress.scheduler.step(scores.bleu4);
            self.progress.epoch += 1;
            self.progress.batch_in_epoch = 0;
            let rec = EpochRecord {
                epoch: self.progress.epoch,
                train_loss,
                dev_bleu4: scores.bleu4,
                dev_rouge_l: scores.rouge_l,
                lr,
            };
            if let Some(dir) = out_dir {
                let ck = self.checkpoint();
                save_checkpoint(&dir.join("last.sgck"), &ck)?;
                if improved {
                    save_checkpoint(&dir.join("best.sgck"), &ck)?;
                }
            }
            on_epoch(&rec);
            history.push(rec);
            if self.cfg.target_bleu.is_some_and(|t| scores.bleu4 >= t) {
                break;
            }
            if self.cfg.time_limit_secs.is_some_and(|t| start.elapsed().as_secs_f64() >= t) {
                break;
            }
        }
        Ok(history)
    }
}

/// Decodes every sequence (in parallel, order preserved).
pub fn translate_all(model: &Signformer, ds: &FeatureDataset, opts: &DecodeOptions) -> Result<Vec<Vec<u32>>> {
    ds.sequences
        .par_iter()
        .map(|s| {
            let scorer = ModelScorer::new(model, &s.frames, s.len())?;
            if opts.beam == 1 {
                greedy_decode(&scorer, opts.max_len)
            } else {
                beam_search(&scorer, opts)
            }
        })
        .collect()
}

/// Greedy dev BLEU-4 and ROUGE-L over token ids.
pub fn evaluate(model: &Signformer, ds: &FeatureDataset, max_len: usize) -> Result<DevScores> {
    let hyps = translate_all(model, ds, &DecodeOptions::greedy(max_len))?;
    let refs: Vec<Vec<u32>> = ds.sequences.iter().map(|s| s.target.clone()).collect();
    Ok(DevScores {
        bleu4: bleu4(&hyps, &refs)?,
        rouge_l: rouge_l(&hyps, &refs)?,
    })
}
