//! Gated contextual positions and sinusoidal positions on toy inputs.

use signformer::attention::{cope_positions, ApeTable, CopeMode};
use signformer::tensor::{Tape, Tensor};

fn main() -> signformer::Result<()> {
    let ape = ApeTable::new(16, 8);
    println!("APE row 0: {:?}", ape.row(0));
    println!("APE row 3: {:?}", &ape.row(3)[..4]);

    // Large aligned query/key products saturate every gate at 1, so the
    // contextual positions become plain integer distances.
    let q = Tensor::full(&[1, 4], 10.0);
    let k = Tensor::full(&[5, 4], 10.0);
    let mut tape = Tape::<f64>::new();
    let qv = tape.input(&[1, 4], q.data().iter().map(|&v| v as f64).collect(), false)?;
    let kv = tape.input(&[5, 4], k.data().iter().map(|&v| v as f64).collect(), false)?;
    for mode in [CopeMode::Prefix, CopeMode::Suffix] {
        let p = cope_positions(&mut tape, qv, kv, mode, 16)?;
        println!("{:>6} positions: {:?}", mode.as_str(), tape.value(p));
    }

    // Mixed-sign keys: only keys the query agrees with advance the count.
    let signs = [1.0, -1.0, 1.0, 1.0, -1.0];
    let k2: Vec<f64> = signs.iter().flat_map(|&s| [s * 10.0; 4]).collect();
    let kv2 = tape.input(&[5, 4], k2, false)?;
    let p = cope_positions(&mut tape, qv, kv2, CopeMode::Suffix, 16)?;
    let rounded: Vec<f64> = tape.value(p).iter().map(|v| (v * 1e3).round() / 1e3).collect();
    println!("gated suffix positions: {rounded:?}");
    Ok(())
}
