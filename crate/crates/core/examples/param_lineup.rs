//! Parameter counts of the shipped presets next to their reference sizes.

use signformer::config::PRESETS;
use signformer::model::param_count;

fn main() -> signformer::Result<()> {
    println!("{:<14}{:>12}{:>10}{:>10}", "preset", "params", "target M", "ratio");
    for p in PRESETS {
        let cfg = p.config()?;
        let n = param_count(&cfg.model).total();
        let m = n as f64 / 1e6;
        println!("{:<14}{:>12}{:>10.2}{:>10.3}", p.label, n, p.target_millions, m / p.target_millions);
    }
    println!();
    let feather = PRESETS[0].config()?;
    println!("{}", param_count(&feather.model));
    Ok(())
}
