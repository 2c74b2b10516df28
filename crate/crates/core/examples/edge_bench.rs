//! Single-threaded beam-5 translation latency of the Feather preset on 64
//! random frames, with analytic MAC counts.
//!
//! cargo run --release --example edge_bench

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use signformer::bench::bench_translate;
use signformer::config::preset;
use signformer::{Signformer, Tensor};

fn main() -> signformer::Result<()> {
    let cfg = preset("feather")?;
    let model = Signformer::new(cfg.model.clone(), 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frames = Tensor::from_fn(&[64, cfg.model.feature_dim], |_| StandardNormal.sample(&mut rng));
    let report = bench_translate(&model, &frames, &cfg.decode_options(), 10, 3)?;
    println!("{report}");
    Ok(())
}
