//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness. Pass criterion numbers to run a subset:
//! `cargo test --release --test criteria -- 1 4`. The learning smoke tests
//! (criterion 5) train eleven small models and take roughly half an hour on
//! one core.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use signformer::attention::{cope_positions, gloss_attention, CopeMode, GlossAttentionConfig, GlossWeights, Linear};
use signformer::attention::AttentionWeights;
use signformer::bench::bench_translate;
use signformer::config::{preset, RunConfig, PRESETS};
use signformer::data::{
    decode_checkpoint, decode_features, encode_checkpoint, encode_features, load_checkpoint, save_checkpoint,
    synth_generate, SynthSpec, SynthSplits, SynthTask,
};
use signformer::decode::{beam_search_all, bleu4, log_softmax, rouge_l, DecodeOptions, StepScorer};
use signformer::gradsuite::{run_suite, SuiteOptions};
use signformer::model::{init_parameters, param_count, ConvStyle, CopeScope};
use signformer::tokens::BOS;
use signformer::train::{OptimizerKind, Trainer};
use signformer::{ModelConfig, Signformer, Tape, Tensor};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: signformer::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn one_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

// 1. gradient suite

fn gradients() -> Check {
    let start = Instant::now();
    let report = lib(run_suite(&SuiteOptions::default()))?;
    let secs = start.elapsed().as_secs_f64();
    let rows = report.per_op();
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    for want in [
        "conv_module",
        "conv_module_original",
        "gloss_attention",
        "gloss_attention_cope",
        "encoder_layer",
        "decoder_layer",
        "model",
    ] {
        ensure(names.contains(&want), || format!("suite has no `{want}` check"))?;
    }
    let worst = rows.iter().map(|r| r.worst).fold(0.0, f64::max);
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    ensure(failed.is_empty(), || format!("failing checks: {}", failed.join(", ")))?;
    ensure(worst <= 1e-3, || format!("worst relative error {worst:.3e}"))?;
    ensure(secs < 120.0, || format!("suite took {secs:.1}s"))?;
    Ok(format!("{} checks, worst rel err {worst:.2e}, {secs:.1}s", rows.len()))
}

// 2. structural invariants

fn tiny(use_cope: bool, conv_style: ConvStyle) -> ModelConfig {
    ModelConfig {
        hidden: 16,
        heads: Some(2),
        enc_layers: 2,
        dec_layers: 2,
        kernel: 5,
        vocab: 13,
        feature_dim: 6,
        use_cope,
        conv_style,
        gloss_radius: 2,
        gloss_samples: 3,
        cope_p_max: 8,
        ..Default::default()
    }
}

fn random_frames(rng: &mut ChaCha8Rng, t: usize, f: usize) -> Tensor {
    Tensor::from_fn(&[t, f], |_| rng.random_range(-1.5..1.5))
}

fn structure() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let styles = [ConvStyle::Signformer, ConvStyle::ConformerOriginal];

    // decoder causality: changing token k leaves logits at rows <= k-1 bit-identical
    for cope in [false, true] {
        let m = lib(Signformer::new(tiny(cope, styles[0]), 3))?;
        let x = random_frames(&mut rng, 9, 6);
        let a: Vec<u32> = vec![BOS, 4, 5, 6, 7, 8];
        for k in 1..a.len() {
            let mut b = a.clone();
            for tok in &mut b[k..] {
                *tok = 4 + (*tok + 3) % 9;
            }
            let la = lib(m.logits(&x, 9, &a))?;
            let lb = lib(m.logits(&x, 9, &b))?;
            ensure(la.data()[..k * 13] == lb.data()[..k * 13], || {
                format!("causality broken at position {k} (cope={cope})")
            })?;
        }
    }

    // gloss attention: frames beyond radius + 1 have no influence
    let (t, d, heads, samples, radius) = (16usize, 8usize, 2usize, 4usize, 3usize);
    let offsets: Vec<f64> = (0..heads * samples).map(|_| rng.random_range(-(radius as f64)..=radius as f64)).collect();
    let weights: Vec<Vec<f64>> = (0..4).map(|_| (0..d * d).map(|_| rng.random_range(-0.5..0.5)).collect()).collect();
    let gloss = |x: &[f64]| -> Result<Vec<f64>, String> {
        let mut tape = Tape::<f64>::new();
        let xv = lib(tape.constant(&[t, d], x.to_vec()))?;
        let mut lin = Vec::new();
        for w in &weights {
            lin.push(Linear {
                weight: lib(tape.constant(&[d, d], w.clone()))?,
                bias: lib(tape.constant(&[d], vec![0.0; d]))?,
            });
        }
        let w = GlossWeights {
            attn: AttentionWeights {
                q: lin[0],
                k: lin[1],
                v: lin[2],
                o: lin[3],
            },
            offsets: lib(tape.constant(&[heads, samples], offsets.clone()))?,
            cope: None,
        };
        let cfg = GlossAttentionConfig { heads, samples, radius };
        let y = lib(gloss_attention(&mut tape, xv, &w, &cfg, t))?;
        Ok(tape.value(y).to_vec())
    };
    let x: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base = gloss(&x)?;
    for j in 0..t {
        let mut moved = x.clone();
        for v in &mut moved[j * d..(j + 1) * d] {
            *v += 4.0;
        }
        let out = gloss(&moved)?;
        for i in (0..t).filter(|i| i.abs_diff(j) > radius + 1) {
            ensure(base[i * d..(i + 1) * d] == out[i * d..(i + 1) * d], || {
                format!("gloss output {i} moved when frame {j} changed")
            })?;
        }
    }

    // the whole encoder is local too
    for style in styles {
        let cfg = tiny(true, style);
        let reach = cfg.encoder_receptive_radius();
        let m = lib(Signformer::new(cfg, 4))?;
        let t = 2 * reach + 10;
        let x = random_frames(&mut rng, t, 6);
        let base = lib(m.encode(&x, t))?;
        let mut y = x.clone();
        for v in &mut y.data_mut()[(reach + 3) * 6..] {
            *v += 2.0;
        }
        let moved = lib(m.encode(&y, t))?;
        ensure(base.memory.data()[..2 * 16] == moved.memory.data()[..2 * 16], || {
            format!("{style:?} encoder reached past its receptive radius {reach}")
        })?;
    }

    // padding invariance
    let mut worst_pad = 0.0f32;
    for style in styles {
        for cope in [false, true] {
            let m = lib(Signformer::new(tiny(cope, style), 5))?;
            let real = random_frames(&mut rng, 7, 6);
            let tokens = [BOS, 4, 9, 6];
            let reference = lib(m.logits(&real, 7, &tokens))?;
            for extra in [1usize, 5, 11] {
                let mut padded = random_frames(&mut rng, 7 + extra, 6);
                padded.data_mut()[..42].copy_from_slice(real.data());
                let got = lib(m.logits(&padded, 7, &tokens))?;
                for (a, b) in reference.data().iter().zip(got.data()) {
                    worst_pad = worst_pad.max((a - b).abs());
                }
            }
        }
    }
    ensure(worst_pad <= 1e-5, || format!("padding changed logits by {worst_pad:e}"))?;

    // softmax rows sum to one
    let mut worst_sm = 0.0f64;
    for scale in [1e-3f32, 1.0, 30.0, 1e4] {
        let mut tape = Tape::<f32>::new();
        let (rows, cols) = (16usize, 37usize);
        let v: Vec<f32> = (0..rows * cols).map(|_| scale * rng.random_range(-1.0f32..1.0)).collect();
        let x = lib(tape.constant(&[rows, cols], v))?;
        let y = lib(tape.softmax(x, 1))?;
        for row in tape.value(y).chunks(cols) {
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            worst_sm = worst_sm.max((s - 1.0).abs());
        }
    }
    ensure(worst_sm <= 1e-6, || format!("softmax row sum off by {worst_sm:e}"))?;

    // CoPE positions stay in [0, p_max]; saturated gates count integer distances
    for (mode, p_max) in [(CopeMode::Prefix, 5), (CopeMode::Suffix, 3), (CopeMode::Causal, 4), (CopeMode::Prefix, 64)] {
        let n = 9;
        let q: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let k: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut tape = Tape::<f64>::new();
        let qv = lib(tape.constant(&[n, 4], q))?;
        let kv = lib(tape.constant(&[n, 4], k))?;
        let p = lib(cope_positions(&mut tape, qv, kv, mode, p_max))?;
        ensure(tape.value(p).iter().all(|&v| (0.0..=p_max as f64).contains(&v)), || {
            format!("{mode:?} position outside [0, {p_max}]")
        })?;
    }
    let n = 6;
    let mut tape = Tape::<f64>::new();
    let qv = lib(tape.constant(&[n, 1], vec![20.0; n]))?;
    let kv = lib(tape.constant(&[n, 1], vec![20.0; n]))?;
    let p = lib(cope_positions(&mut tape, qv, kv, CopeMode::Causal, 64))?;
    for i in 0..n {
        for j in 0..n {
            let want = if j <= i { (i - j + 1) as f64 } else { 0.0 };
            let got = tape.value(p)[i * n + j];
            ensure(got == want, || format!("saturated CoPE position ({i}, {j}) = {got}, want {want}"))?;
        }
    }
    Ok(format!("padding max diff {worst_pad:.1e}, softmax max dev {worst_sm:.1e}"))
}

// 3. parameter accounting

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        hidden: [8, 16, 24, 32, 64][rng.random_range(0..5)],
        heads: Some([1, 2, 4, 8][rng.random_range(0..4)]),
        enc_layers: rng.random_range(1..4),
        dec_layers: rng.random_range(1..4),
        ff_dim: if rng.random() { None } else { Some(rng.random_range(4..130)) },
        kernel: 2 * rng.random_range(0..16) + 1,
        conv_expansion: rng.random_range(1..4),
        conv_style: if rng.random() { ConvStyle::Signformer } else { ConvStyle::ConformerOriginal },
        use_cope: rng.random(),
        cope_scope: [CopeScope::Both, CopeScope::Gloss, CopeScope::Cross][rng.random_range(0..3)],
        cope_p_max: rng.random_range(1..130),
        gloss_samples: rng.random_range(1..9),
        vocab: rng.random_range(5..300),
        feature_dim: rng.random_range(1..100),
        tie_output_embedding: rng.random(),
        ..Default::default()
    }
}

fn params() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut tried = 0;
    while tried < 20 {
        let cfg = random_config(&mut rng);
        if cfg.validate().is_err() {
            continue;
        }
        let runtime = lib(init_parameters(&cfg, tried))?.trainable_count();
        let analytic = param_count(&cfg).total();
        ensure(analytic == runtime, || format!("analytic {analytic} vs runtime {runtime} for {cfg:?}"))?;
        tried += 1;
    }
    let mut lineup = Vec::new();
    for p in &PRESETS {
        let cfg = lib(p.config())?;
        ensure(cfg.model.vocab == 2891 && cfg.model.feature_dim == 1024, || {
            format!("{} preset is not at V=2891, F=1024", p.name)
        })?;
        lineup.push((p.name, param_count(&cfg.model).total() as f64 / 1e6, p.target_millions));
    }
    for w in lineup.windows(2) {
        ensure(w[0].1 < w[1].1, || format!("{} ({:.3} M) !< {} ({:.3} M)", w[0].0, w[0].1, w[1].0, w[1].1))?;
    }
    let mut detail = Vec::new();
    for name in ["feather", "full"] {
        let &(_, got, target) = lineup.iter().find(|r| r.0 == name).unwrap();
        let ratio = got / target;
        ensure((0.85..=1.15).contains(&ratio), || format!("{name} {got:.3} M is {ratio:.3}x its {target} M target"))?;
        detail.push(format!("{name} {got:.3} M ({ratio:.2}x)"));
    }
    Ok(format!("20 random configs exact, lineup increasing, {}", detail.join(", ")))
}

// 4. metric and search oracles

struct Toy {
    vocab: usize,
    seed: u64,
}

impl Toy {
    fn dist(&self, prefix: &[u32]) -> Vec<f64> {
        let mut h = self.seed ^ 0x5bd1_e995;
        for &t in prefix {
            h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(t as u64 + 7);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let logits: Vec<f32> = (0..self.vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
        log_softmax(&logits)
    }
}

impl StepScorer for Toy {
    type State = Vec<u32>;

    fn start(&self) -> Vec<u32> {
        Vec::new()
    }

    fn step(&self, state: &mut Vec<u32>, token: u32) -> signformer::Result<Vec<f64>> {
        state.push(token);
        Ok(self.dist(state))
    }
}

/// Every sequence up to `max_len` tokens, stopping at the first end token.
fn enumerate(v: u32, max_len: usize, eos: u32) -> Vec<Vec<u32>> {
    let mut done = Vec::new();
    let mut open = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in open {
            for t in 0..v {
                let mut s: Vec<u32> = p.clone();
                s.push(t);
                if t == eos {
                    done.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        open = next;
    }
    done.extend(open);
    done
}

fn close_rel(got: f64, want: f64) -> bool {
    (got - want).abs() <= 1e-9 * want.abs().max(1e-300)
}

fn oracles() -> Check {
    // word ids: the 1, cat 2, sat 3, on 4, mat 5, is 6
    let hyps = vec![vec![1, 2, 3, 4, 1, 5], vec![11, 12, 13, 14, 15]];
    let refs = vec![vec![1, 2, 6, 4, 1, 5], vec![11, 12, 13, 14, 15, 16]];
    // clipped matches 10/11, 7/9, 4/7, 2/5; c = 11, r = 12
    let want_bleu = 100.0 * (-1.0f64 / 11.0).exp() * (16.0f64 / 99.0).powf(0.25);
    let got = lib(bleu4(&hyps, &refs))?;
    ensure(close_rel(got, want_bleu), || format!("bleu4 {got} vs oracle {want_bleu}"))?;
    // LCS 5 and 5: F1 5/6 and 10/11
    let want_rouge = 100.0 * 115.0 / 132.0;
    let got = lib(rouge_l(&hyps, &refs))?;
    ensure(close_rel(got, want_rouge), || format!("rouge_l {got} vs oracle {want_rouge}"))?;
    // clipping: "the the the the" against "the cat" has no bigram match
    let got = lib(bleu4(&[vec![1, 1, 1, 1]], &[vec![1, 2]]))?;
    ensure(got == 0.0, || format!("bleu4 without bigram matches gave {got}"))?;
    // one of four tokens in an LCS of 1 against a 2-token reference: F1 = 1/3
    let got = lib(rouge_l(&[vec![1, 1, 1, 1]], &[vec![1, 2]]))?;
    ensure(close_rel(got, 100.0 / 3.0), || format!("rouge_l clipping case gave {got}"))?;
    let got = lib(bleu4(&refs, &refs))?;
    ensure(close_rel(got, 100.0), || format!("bleu4 of references against themselves gave {got}"))?;

    let (bos, eos) = (0u32, 2u32);
    let mut instances = 0;
    for seed in 0..300 {
        for max_len in 1..=3 {
            for alpha in [0.0, 0.6, 1.0] {
                let toy = Toy { vocab: 3, seed };
                let opts = DecodeOptions {
                    beam: 27,
                    alpha,
                    max_len,
                    bos,
                    eos,
                };
                let mut best: Option<(f64, f64, Vec<u32>)> = None;
                for s in enumerate(3, max_len, eos) {
                    let mut prefix = vec![bos];
                    let mut lp = 0.0;
                    for &t in &s {
                        lp += toy.dist(&prefix)[t as usize];
                        prefix.push(t);
                    }
                    let score = lp / ((5.0 + s.len() as f64) / 6.0).powf(alpha);
                    if best.as_ref().is_none_or(|b| score > b.0 || (score == b.0 && s < b.2)) {
                        best = Some((score, lp, s));
                    }
                }
                let (_, lp, tokens) = best.unwrap();
                let got = &lib(beam_search_all(&toy, &opts))?[0];
                ensure(got.tokens == tokens && (got.log_prob - lp).abs() <= 1e-12, || {
                    format!("seed {seed} L {max_len} alpha {alpha}: beam {:?} vs exhaustive {tokens:?}", got.tokens)
                })?;
                instances += 1;
            }
        }
    }
    Ok(format!("bleu4 {want_bleu:.6}, rouge_l {want_rouge:.6}, {instances} search instances"))
}

// 5. learning smoke tests

fn best_dev(cfg: &RunConfig, data: &SynthSplits) -> Result<(f64, usize, f64), String> {
    let mut cfg = cfg.clone();
    cfg.model.vocab = data.vocab.len();
    cfg.model.feature_dim = data.train.feature_dim;
    let start = Instant::now();
    let model = lib(Signformer::new(cfg.model.clone(), cfg.train.seed))?;
    let mut trainer = lib(Trainer::new(model, cfg.train.clone()))?;
    let history = lib(trainer.fit(&data.train, &data.dev, None, |_| {}))?;
    let best = history.iter().map(|r| r.dev_bleu4).fold(0.0, f64::max);
    Ok((best, history.len(), start.elapsed().as_secs_f64()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn learning() -> Check {
    let mut failures = Vec::new();
    let mut detail = Vec::new();

    let copy = lib(synth_generate(&SynthSpec::new(SynthTask::Copy)))?;
    let mut cfg = lib(preset("feather"))?;
    ensure(cfg.train.optimizer_for(cfg.model.hidden) == OptimizerKind::AdamW, || {
        "Feather does not train with AdamW".into()
    })?;
    cfg.train.epochs = 200;
    cfg.train.target_bleu = Some(90.0);
    cfg.train.time_limit_secs = Some(600.0);
    let (bleu, epochs, secs) = best_dev(&cfg, &copy)?;
    println!("  copy: dev BLEU-4 {bleu:.2} after {epochs} epochs in {secs:.0}s");
    if bleu < 90.0 || secs > 600.0 {
        failures.push(format!("copy reached {bleu:.2} in {secs:.0}s"));
    }
    detail.push(format!("copy {bleu:.1} in {secs:.0}s"));

    let order = lib(synth_generate(&SynthSpec::new(SynthTask::Order)))?;
    let mut with_ape = lib(preset("feather"))?;
    with_ape.train.epochs = 20;
    let mut without = with_ape.clone();
    without.model.use_ape = false;
    ensure(!without.model.use_cope, || "ablation still has CoPE".into())?;
    let (a, _, sa) = best_dev(&with_ape, &order)?;
    let (b, _, sb) = best_dev(&without, &order)?;
    println!("  order: APE {a:.2} ({sa:.0}s), no position encoding {b:.2} ({sb:.0}s)");
    if a - b < 10.0 {
        failures.push(format!("order gap {:.2} < 10", a - b));
    }
    detail.push(format!("order gap {:.1}", a - b));

    let segment = lib(synth_generate(&SynthSpec::new(SynthTask::Segment)))?;
    let (mut plain, mut cope) = (Vec::new(), Vec::new());
    for seed in 1..=3u64 {
        for (name, scores) in [("feather", &mut plain), ("feather_cope", &mut cope)] {
            let mut cfg = lib(preset(name))?;
            cfg.train.epochs = 30;
            cfg.train.seed = seed;
            let (bleu, _, secs) = best_dev(&cfg, &segment)?;
            println!("  segment: {name} seed {seed} dev BLEU-4 {bleu:.2} ({secs:.0}s)");
            scores.push(bleu);
        }
    }
    let (mp, mc) = (median(plain), median(cope));
    if mc < mp {
        failures.push(format!("segment median Feather+CoPE {mc:.2} < Feather {mp:.2}"));
    }
    detail.push(format!("segment medians {mc:.1} vs {mp:.1}"));

    if failures.is_empty() {
        Ok(detail.join(", "))
    } else {
        Err(failures.join("; "))
    }
}

// 6. edge benchmark

fn edge() -> Check {
    let cfg = lib(preset("feather"))?;
    let model = lib(Signformer::new(cfg.model.clone(), 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frames = random_frames(&mut rng, 64, cfg.model.feature_dim);
    let opts = DecodeOptions {
        beam: 5,
        ..DecodeOptions::default()
    };
    let report = lib(one_thread(|| bench_translate(&model, &frames, &opts, 20, 3)))?;
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("edge_bench.txt");
    std::fs::write(&path, format!("threads=1\n{report}")).map_err(|e| e.to_string())?;
    ensure(report.median_ms < 250.0, || format!("median {:.1} ms", report.median_ms))?;
    Ok(format!(
        "median {:.1} ms, {} output tokens, {:.3} GMACs, report at {}",
        report.median_ms,
        report.output_len,
        report.macs_translate as f64 / 1e9,
        path.display()
    ))
}

// 7. durability

fn durability() -> Check {
    let spec = SynthSpec {
        task: SynthTask::Segment,
        feature_dim: 12,
        vocab_size: 9,
        train: 40,
        dev: 0,
        test: 0,
        ..SynthSpec::default()
    };
    let data = lib(synth_generate(&spec))?;
    let bytes = lib(encode_features(&data.train))?;
    let back = lib(decode_features(&bytes, std::path::Path::new("mem")))?;
    ensure(back == data.train, || "feature file did not round-trip".into())?;
    ensure(lib(encode_features(&back))? == bytes, || "feature re-encoding changed bytes".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for kind in [OptimizerKind::AdamW, OptimizerKind::SophiaG] {
        let cfg = ModelConfig {
            vocab: data.vocab.len(),
            feature_dim: 12,
            ..tiny(true, ConvStyle::ConformerOriginal)
        };
        let mut tc = lib(preset("feather"))?.train;
        tc.batch_size = 8;
        tc.optimizer = Some(kind);
        tc.sophia.hessian_interval = 2;
        let uninterrupted = one_thread(|| -> Result<(Vec<u64>, Trainer, Trainer), String> {
            let mut a = lib(Trainer::new(lib(Signformer::new(cfg.clone(), 9))?, tc.clone()))?;
            let batches = a.epoch_batches(data.train.len());
            let mut losses = Vec::new();
            let mut resumed = None;
            for (k, b) in batches.iter().enumerate() {
                if k == 2 {
                    let p = dir.path().join(format!("{kind}.sgck"));
                    lib(save_checkpoint(&p, &a.checkpoint()))?;
                    let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
                    let ck = lib(decode_checkpoint(&bytes, &p, Some(&cfg)))?;
                    ensure(lib(encode_checkpoint(&ck))? == bytes, || "checkpoint re-encoding changed bytes".into())?;
                    resumed = Some(lib(Trainer::from_checkpoint(lib(load_checkpoint(&p, Some(&cfg)))?, tc.clone()))?);
                }
                losses.push(lib(a.train_step(&data.train, b))?.loss.to_bits());
                a.progress.batch_in_epoch += 1;
            }
            Ok((losses, a, resumed.unwrap()))
        })?;
        let (losses, a, mut b) = uninterrupted;
        let tail = one_thread(|| -> Result<Vec<u64>, String> {
            let batches = b.epoch_batches(data.train.len());
            let mut out = Vec::new();
            for bt in &batches[2..] {
                out.push(lib(b.train_step(&data.train, bt))?.loss.to_bits());
                b.progress.batch_in_epoch += 1;
            }
            Ok(out)
        })?;
        ensure(tail == losses[2..], || format!("{kind}: resumed losses differ"))?;
        ensure(a.model.params() == b.model.params(), || format!("{kind}: resumed parameters differ"))?;
        ensure(a.optimizer == b.optimizer, || format!("{kind}: resumed optimizer state differs"))?;
    }
    Ok("features and checkpoints bit-exact, AdamW and SophiaG resume bit-exact".into())
}

fn main() -> ExitCode {
    let checks: [(u32, &str, fn() -> Check); 7] = [
        (1, "gradient suite", gradients),
        (2, "structural invariants", structure),
        (3, "parameter accounting", params),
        (4, "metric and search oracles", oracles),
        (5, "learning smoke tests", learning),
        (6, "edge benchmark", edge),
        (7, "durability", durability),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in checks {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n} {name}: PASS ({d}) [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({d}) [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
