//! Central finite-difference gradient checking in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Worst relative error for one input of the checked function.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Probes dropped because the function is not smooth within `h`.
    pub kinks_skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tol
    }
}

/// Absolute gradient scale below which differences are not amplified.
const SCALE_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` maps the inputs (recorded as trainable `f64` leaves) to any tensor;
/// it is reduced to a scalar through a fixed random projection. For each
/// input, up to `max_coords` randomly chosen coordinates are probed. The
/// reported error for an input is `max|analytic - numeric| /
/// max(|analytic|∞, |numeric|∞)` over the probed coordinates, with
/// `numeric` the central difference at step `h`.
///
/// Piecewise-linear ops (ReLU6, clamps, interpolation) have kinks. When a
/// kink falls inside `[x - h, x + h]` the central difference is not a
/// derivative of anything, so each probe is repeated at `h / 2`: if the two
/// differences disagree by more than `tol / 4` of their size, the
/// coordinate is counted in `kinks_skipped` and another one is drawn, up to
/// `8 · max_coords` probes per input. The decision uses only function
/// values, never the analytic gradient.
pub fn grad_check<F>(
    f: F,
    inputs: &[(String, Tensor)],
    h: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let base: Vec<Vec<f64>> = inputs
        .iter()
        .map(|(_, t)| t.data().iter().map(|&v| v as f64).collect())
        .collect();

    let eval = |values: &[Vec<f64>], want_grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::<f64>::new();
        let vars = inputs
            .iter()
            .zip(values)
            .map(|((_, t), v)| tape.input(t.shape(), v.clone(), want_grads))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let shape = tape.shape(out).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let n = tape.value(out).len();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = tape.constant(&shape, w)?;
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod)?;
        let value = tape.scalar(loss);
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let mut grads = tape.backward(loss)?;
        let gs = vars
            .iter()
            .zip(values)
            .map(|(&v, vals)| grads.take(v).unwrap_or_else(|| vec![0.0; vals.len()]))
            .collect();
        Ok((value, gs))
    };

    let (_, analytic) = eval(&base, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(inputs.len());
    for (idx, (name, t)) in inputs.iter().enumerate() {
        let n = t.numel();
        let order: Vec<usize> = sample(&mut rng, n, n).into_vec();
        let budget = 8 * max_coords.max(1);
        let mut values = base.clone();
        let mut max_diff = 0.0f64;
        let mut scale = SCALE_FLOOR;
        let (mut checked, mut skipped) = (0, 0);
        for &c in order.iter().take(budget) {
            if checked == max_coords {
                break;
            }
            let mut central = |step: f64| -> Result<f64> {
                let orig = values[idx][c];
                values[idx][c] = orig + step;
                let (plus, _) = eval(&values, false)?;
                values[idx][c] = orig - step;
                let (minus, _) = eval(&values, false)?;
                values[idx][c] = orig;
                Ok((plus - minus) / (2.0 * step))
            };
            let numeric = central(h)?;
            let half = central(h / 2.0)?;
            let size = numeric.abs().max(half.abs()).max(SCALE_FLOOR);
            if (numeric - half).abs() > 0.25 * tol * size {
                skipped += 1;
                continue;
            }
            let a = analytic[idx][c];
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            checked += 1;
        }
        reports.push(InputReport {
            name: name.clone(),
            max_rel_err: max_diff / scale,
            coords_checked: checked,
            kinks_skipped: skipped,
        });
    }
    Ok(GradCheckReport { inputs: reports, tol })
}
