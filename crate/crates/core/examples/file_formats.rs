//! Writes and reads back a feature file, a vocabulary and a checkpoint.

use signformer::data::{
    load_checkpoint, read_features, read_vocab, save_checkpoint, synth_generate, write_features, write_vocab,
    Checkpoint, Progress, SynthSpec, SynthTask,
};
use signformer::gradsuite::tiny_config;
use signformer::model::ConvStyle;
use signformer::Signformer;

fn main() -> signformer::Result<()> {
    let dir = std::env::temp_dir().join(format!("signformer-formats-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;

    let spec = SynthSpec {
        feature_dim: 16,
        train: 8,
        dev: 2,
        test: 2,
        ..SynthSpec::new(SynthTask::Segment)
    };
    let data = synth_generate(&spec)?;
    let feats = dir.join("train.sgnf");
    write_features(&feats, &data.train)?;
    write_vocab(&dir.join("vocab.txt"), &data.vocab)?;
    let back = read_features(&feats)?;
    println!(
        "{} sequences, {} bytes, identical: {}",
        back.len(),
        std::fs::metadata(&feats)?.len(),
        back == data.train
    );
    println!("vocab entries: {}", read_vocab(&dir.join("vocab.txt"))?.len());

    let cfg = tiny_config(true, ConvStyle::Signformer);
    let model = Signformer::new(cfg.clone(), 3)?;
    let ck = Checkpoint {
        config: cfg.clone(),
        params: model.params().clone(),
        optimizer: None,
        progress: Progress::default(),
    };
    let path = dir.join("model.sgck");
    save_checkpoint(&path, &ck)?;
    let loaded = load_checkpoint(&path, Some(&cfg))?;
    println!("checkpoint round trip identical: {}", loaded == ck);

    // Loading into a wider model names the first tensor that disagrees.
    let wider = signformer::ModelConfig {
        hidden: cfg.hidden * 2,
        ..cfg
    };
    if let Err(e) = load_checkpoint(&path, Some(&wider)) {
        println!("mismatch: {e}");
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
