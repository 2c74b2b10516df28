//! Trains the Feather preset on a small synthetic copy task and prints the
//! per-epoch history.
//!
//! cargo run --release --example copy_task

use signformer::config::preset;
use signformer::data::{synth_generate, SynthSpec, SynthTask};
use signformer::train::{evaluate, Trainer};
use signformer::Signformer;

fn main() -> signformer::Result<()> {
    let spec = SynthSpec {
        task: SynthTask::Copy,
        feature_dim: 128,
        train: 300,
        dev: 50,
        test: 50,
        ..SynthSpec::new(SynthTask::Copy)
    };
    let data = synth_generate(&spec)?;

    let mut cfg = preset("feather")?;
    cfg.model.vocab = data.vocab.len();
    cfg.model.feature_dim = spec.feature_dim;
    cfg.train.epochs = 25;
    cfg.train.target_bleu = Some(90.0);

    let model = Signformer::new(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    trainer.fit(&data.train, &data.dev, None, |rec| println!("{rec}"))?;

    let test = evaluate(&trainer.model, &data.test, 30)?;
    println!("test bleu4={:.2} rouge_l={:.2}", test.bleu4, test.rouge_l);
    let s = &data.test.sequences[0];
    let hyp = signformer::train::translate_all(
        &trainer.model,
        &signformer::data::FeatureDataset {
            feature_dim: spec.feature_dim,
            sequences: vec![s.clone()],
        },
        &cfg.decode_options(),
    )?;
    println!("ref: {}", data.vocab.decode(&s.target));
    println!("hyp: {}", data.vocab.decode(&hyp[0]));
    Ok(())
}
