//! Records a small two-layer network on a tape, runs backward, and checks
//! the gradients against central differences.

use signformer::tensor::{grad_check, Tape, Tensor};

fn main() -> signformer::Result<()> {
    let x = Tensor::from_fn(&[3, 4], |i| (i as f32 * 0.37).sin());
    let w = Tensor::from_fn(&[4, 2], |i| (i as f32 * 0.11).cos()).with_grad();

    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(&x);
    let wv = tape.leaf(&w);
    let h = tape.matmul(xv, wv)?;
    let h = tape.relu6(h)?;
    let loss = tape.mean(h)?;
    println!("loss = {:.6}", tape.scalar(loss));
    let grads = tape.backward(loss)?;
    println!("dL/dw = {:?}", grads.get(wv).unwrap());

    // Same function in f64 against finite differences.
    let report = grad_check(
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.sigmoid(h)?;
            t.softmax(h, 1)
        },
        &[("x".into(), x.clone()), ("w".into(), w.clone())],
        1e-3,
        1e-3,
        12,
        7,
    );
    match report {
        Ok(r) => {
            for i in &r.inputs {
                println!("{}: max relative error {:.2e}", i.name, i.max_rel_err);
            }
            println!("passed = {}", r.passed());
        }
        Err(e) => println!("grad check failed to run: {e}"),
    }
    Ok(())
}
