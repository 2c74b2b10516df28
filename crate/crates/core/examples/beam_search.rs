//! Greedy and beam decoding over a hand-written step scorer.

use signformer::decode::{beam_search_all, greedy_decode, DecodeOptions, StepScorer};

/// Token 4 looks best first, but only the path through 5 reaches a
/// confident end token.
struct Toy;

impl StepScorer for Toy {
    type State = Vec<u32>;

    fn start(&self) -> Self::State {
        Vec::new()
    }

    fn step(&self, state: &mut Self::State, token: u32) -> signformer::Result<Vec<f64>> {
        state.push(token);
        let mut p = [1e-3; 6];
        match state.as_slice() {
            [2] => {
                p[4] = 0.55;
                p[5] = 0.45;
            }
            [2, 4] => p[4..6].copy_from_slice(&[0.5, 0.5]),
            [2, 5] => p[3] = 0.99,
            _ => p[3] = 0.9,
        }
        let z: f64 = p.iter().sum();
        Ok(p.iter().map(|v| (v / z).ln()).collect())
    }
}

fn main() -> signformer::Result<()> {
    let greedy = greedy_decode(&Toy, 6)?;
    println!("greedy: {greedy:?}");
    for beam in [1, 2, 4] {
        let opts = DecodeOptions {
            beam,
            alpha: 0.0,
            max_len: 6,
            ..DecodeOptions::default()
        };
        let hyps = beam_search_all(&Toy, &opts)?;
        let best = &hyps[0];
        println!("beam {beam}: {:?} logp={:.4}", best.output(opts.eos), best.log_prob);
    }
    Ok(())
}
