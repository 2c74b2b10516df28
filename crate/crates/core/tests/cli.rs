use std::fs;
use std::path::Path;
use std::process::Command;

use signformer::cli::main_with_args;
use signformer::data::{read_features, write_features, FeatureDataset, Sequence};
use signformer::Tensor;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = main_with_args(std::iter::once("signformer").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small copy dataset plus a tiny model that trains in seconds.
fn tiny_setup(dir: &Path) -> Vec<String> {
    let data = dir.join("data");
    let (code, _, err) = run(&[
        "synth",
        "--out",
        p(&data),
        "--set",
        "feature_dim=16",
        "--set",
        "train=24",
        "--set",
        "dev=6",
        "--set",
        "test=6",
        "--set",
        "vocab_size=8",
    ]);
    assert_eq!(code, 0, "{err}");
    [
        "hidden_size=32",
        "ff_dim=64",
        "kernel_size=3",
        "enc_layers=1",
        "dec_layers=1",
        "batch_size=8",
        "epochs=2",
        "max_decode_len=12",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .collect()
}

fn train(dir: &Path, extra: &[String], out: &str) -> (i32, String, String) {
    let data = dir.join("data");
    let out = dir.join(out);
    let mut args = vec!["train", "--data", p(&data), "--out", p(&out)];
    args.extend(extra.iter().map(String::as_str));
    run(&args)
}

fn epoch_line(out: &str, n: usize) -> String {
    out.lines()
        .find(|l| l.starts_with(&format!("epoch={n} ")))
        .unwrap_or_else(|| panic!("no epoch {n} in\n{out}"))
        .to_string()
}

#[test]
fn synth_is_byte_identical_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let (code, out, _) = run(&["synth", "--out", p(d), "--set", "feature_dim=32"]);
        assert_eq!(code, 0);
        assert!(out.contains("train=500") && out.contains("dev=100") && out.contains("test=100"));
    }
    for f in ["train.sgnf", "dev.sgnf", "test.sgnf", "vocab.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let counts: Vec<usize> = ["train", "dev", "test"]
        .iter()
        .map(|s| read_features(&a.join(format!("{s}.sgnf"))).unwrap().len())
        .collect();
    assert_eq!(counts, [500, 100, 100]);
    assert_eq!(fs::read_to_string(a.join("vocab.txt")).unwrap().lines().count(), 4 + 30);
}

#[test]
fn synth_rejects_invalid_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.conf");
    fs::write(&spec, "task = copy\nvocab_size = 2\n").unwrap();
    let (code, _, err) = run(&["synth", "--spec", p(&spec), "--out", p(dir.path())]);
    assert_eq!(code, 1);
    assert!(err.contains("vocab_size"), "{err}");
}

#[test]
fn train_translate_evaluate_round() {
    let dir = tempfile::tempdir().unwrap();
    let sets = tiny_setup(dir.path());

    let (code, out1, err) = train(dir.path(), &sets, "run1");
    assert_eq!(code, 0, "{err}");
    let run1 = dir.path().join("run1");
    for f in ["config.conf", "metrics.txt", "best.sgck", "last.sgck"] {
        assert!(run1.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(run1.join("metrics.txt")).unwrap().lines().count(), 2);

    // Same seed, same first epoch.
    let (_, out2, _) = train(dir.path(), &sets, "run2");
    assert_eq!(epoch_line(&out1, 1), epoch_line(&out2, 1));

    // The echoed config reproduces the run.
    let echo = run1.join("config.conf");
    let (code, out3, err) = run(&[
        "train",
        "--config",
        p(&echo),
        "--data",
        p(&dir.path().join("data")),
        "--out",
        p(&dir.path().join("run3")),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(epoch_line(&out1, 2), epoch_line(&out3, 2));

    let ck = run1.join("best.sgck");
    let test = dir.path().join("data/test.sgnf");
    let (code, greedy, _) = run(&["translate", "--checkpoint", p(&ck), "--features", p(&test), "--beam", "1"]);
    assert_eq!(code, 0);
    assert_eq!(greedy.lines().count(), 6);
    assert!(greedy.lines().all(|l| l.starts_with("test-") && l.contains('\t')));
    let (_, again, _) = run(&["translate", "--checkpoint", p(&ck), "--features", p(&test), "--beam", "1"]);
    assert_eq!(greedy, again);

    // Beam 1 through the library matches the greedy path.
    let ds = read_features(&test).unwrap();
    let model = {
        let c = signformer::data::load_checkpoint(&ck, None).unwrap();
        signformer::Signformer::from_parameters(c.config, c.params).unwrap()
    };
    let opts = signformer::decode::DecodeOptions {
        beam: 1,
        max_len: 60,
        ..Default::default()
    };
    let beam1 = signformer::train::translate_all(&model, &ds, &opts).unwrap();
    let greedy_ids = signformer::train::translate_all(&model, &ds, &signformer::decode::DecodeOptions::greedy(60)).unwrap();
    assert_eq!(beam1, greedy_ids);
    for (seq, hyp) in ds.sequences.iter().zip(&beam1) {
        let one = signformer::decode::ModelScorer::new(&model, &seq.frames, seq.len()).unwrap();
        let b = signformer::decode::beam_search(&one, &opts).unwrap();
        assert_eq!(&b, hyp);
    }

    let (code, report, err) = run(&["evaluate", "--checkpoint", p(&ck), "--features", p(&test)]);
    assert_eq!(code, 0, "{err}");
    for key in ["bleu4=", "rouge_l=", "info_density=", "netscore=", "params=", "macs="] {
        assert!(report.lines().any(|l| l.starts_with(key)), "{key} missing in\n{report}");
    }

    // References scored against themselves.
    let refs = dir.path().join("refs.txt");
    let vocab = signformer::data::read_vocab(&dir.path().join("data/vocab.txt")).unwrap();
    let text: String = ds
        .sequences
        .iter()
        .map(|s| format!("{}\t{}\n", s.id, vocab.decode(&s.target)))
        .collect();
    fs::write(&refs, &text).unwrap();
    let (code, report, err) = run(&[
        "evaluate",
        "--checkpoint",
        p(&ck),
        "--features",
        p(&test),
        "--refs",
        p(&refs),
        "--hyps",
        p(&refs),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(report.contains("bleu4=100.0000") && report.contains("rouge_l=100.0000"), "{report}");

    let short = dir.path().join("short.txt");
    fs::write(&short, text.lines().take(2).collect::<Vec<_>>().join("\n")).unwrap();
    let (code, _, err) = run(&["evaluate", "--checkpoint", p(&ck), "--features", p(&test), "--refs", p(&short)]);
    assert_eq!(code, 1);
    assert!(err.contains("2 references for 6 sequences"), "{err}");

    // Resume picks up from the last epoch and appends to the history.
    let mut more = sets.clone();
    more.extend(["--set".into(), "epochs=3".into(), "--resume".into()]);
    let (code, out, err) = train(dir.path(), &more, "run1");
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("resume epoch=2"), "{out}");
    assert_eq!(fs::read_to_string(run1.join("metrics.txt")).unwrap().lines().count(), 3);
}

#[test]
fn translate_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let sets = tiny_setup(dir.path());
    let mut one = sets.clone();
    one.extend(["--set".into(), "epochs=1".into()]);
    assert_eq!(train(dir.path(), &one, "run").0, 0);
    let ck = dir.path().join("run/last.sgck");

    let empty = dir.path().join("empty.sgnf");
    write_features(&empty, &FeatureDataset::new(16)).unwrap();
    let (code, out, _) = run(&["translate", "--checkpoint", p(&ck), "--features", p(&empty)]);
    assert_eq!((code, out.as_str()), (0, ""));

    let wide = dir.path().join("wide.sgnf");
    let mut ds = FeatureDataset::new(20);
    ds.push(Sequence {
        id: "x".into(),
        frames: Tensor::zeros(&[3, 20]),
        target: vec![4],
    })
    .unwrap();
    write_features(&wide, &ds).unwrap();
    let (code, _, err) = run(&["translate", "--checkpoint", p(&ck), "--features", p(&wide)]);
    assert_eq!(code, 1);
    assert!(err.contains("dimension 20"), "{err}");

    let (code, _, err) = run(&["translate", "--checkpoint", p(&dir.path().join("nope.sgck")), "--features", p(&wide)]);
    assert_eq!(code, 1);
    assert!(err.contains("nope.sgck"), "{err}");
}

#[test]
fn train_input_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let sets = tiny_setup(dir.path());

    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "hidden_size = 32\nlearning_rat = 0.1\n").unwrap();
    let (code, _, err) = run(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&dir.path().join("data")),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("learning_rat"), "{err}");

    let (code, _, err) = train(dir.path(), &["--set".into(), "optimiser=adamw".into()], "o");
    assert_eq!(code, 1);
    assert!(err.contains("optimiser"), "{err}");

    let empty = dir.path().join("nodata");
    fs::create_dir_all(&empty).unwrap();
    let (code, _, err) = run(&["train", "--data", p(&empty), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code, 1);
    assert!(err.contains("missing file") && err.contains("train.sgnf"), "{err}");
    let _ = sets;
}

#[test]
fn non_finite_features_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let sets = tiny_setup(dir.path());
    let path = dir.path().join("data/train.sgnf");
    let mut bytes = fs::read(&path).unwrap();
    // first frame value of the first sequence: header 16, id len 2, id, T 4
    let id_len = u16::from_le_bytes([bytes[16], bytes[17]]) as usize;
    let at = 18 + id_len + 4;
    bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&path, &bytes).unwrap();
    let (code, _, err) = train(dir.path(), &sets, "o");
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("non-finite"), "{err}");
}

#[test]
fn overflowing_training_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let sets = tiny_setup(dir.path());
    let path = dir.path().join("data/train.sgnf");
    let mut ds = read_features(&path).unwrap();
    for v in ds.sequences[0].frames.data_mut() {
        *v = f32::MAX;
    }
    write_features(&path, &ds).unwrap();
    let (code, _, err) = train(dir.path(), &sets, "o");
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("diverged"), "{err}");
}

#[test]
fn params_and_bench_reports() {
    let (code, out, _) = run(&["params", "--lineup"]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().count(), 7);

    let (code, out, err) = run(&[
        "bench",
        "--frames",
        "8",
        "--repeats",
        "1",
        "--max-len",
        "4",
        "--set",
        "hidden_size=32",
        "--set",
        "feature_dim=16",
        "--set",
        "vocab_size=20",
    ]);
    assert_eq!(code, 0, "{err}");
    for key in [
        "threads=1",
        "frames=8",
        "beam=5",
        "repeats=1",
        "warmup=3",
        "median_ms=",
        "p95_ms=",
        "min_ms=",
        "macs_encoder=",
        "macs_forward=",
        "macs_translate=",
        "params=",
    ] {
        assert!(out.lines().any(|l| l.starts_with(key)), "{key} missing in\n{out}");
    }
    let (code, _, err) = run(&["bench", "--warmup", "1"]);
    assert_eq!(code, 1);
    assert!(err.contains("warmup"), "{err}");
}

#[test]
fn gradcheck_passes_and_names_faulty_op() {
    let (code, out, err) = run(&["gradcheck", "--scale", "1"]);
    assert_eq!(code, 0, "{out}{err}");
    assert!(out.lines().any(|l| l == "result=PASS"));
    assert!(out.lines().next().unwrap().starts_with("check\tworst_rel_err"));

    let (code, out, err) = run(&["gradcheck", "--scale", "1", "--inject-fault", "softmax"]);
    assert_eq!(code, 1, "{out}");
    assert!(err.contains("softmax") && err.contains("max relative error"), "{err}");
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_signformer");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap();
    let ok = status(&["params", "--preset", "feather"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("total\t526336"));
    assert_eq!(status(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(status(&["params", "--preset", "huge"]).status.code(), Some(1));
}
