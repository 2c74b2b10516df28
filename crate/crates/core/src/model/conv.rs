//! Encoder convolution blocks.

use super::{ConvStyle, Forward, ModelConfig};
use crate::error::Result;
use crate::tensor::{Real, Var};

const BN_EPS: f64 = 1e-5;

/// Residual convolution block for `x[T, D]`; dispatches on `cfg.conv_style`.
pub fn conv_module<R: Real>(
    fwd: &mut Forward<'_, '_, R>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    keep: &[bool],
) -> Result<Var> {
    match cfg.conv_style {
        ConvStyle::Signformer => conv_signformer(fwd, cfg, prefix, x, keep),
        ConvStyle::ConformerOriginal => conv_original(fwd, cfg, prefix, x, keep),
    }
}

/// `x + Dropout(LN_out(PW2(ReLU6(DW(ReLU6(PW1(LN_in(x))))))))`
fn conv_signformer<R: Real>(
    fwd: &mut Forward<'_, '_, R>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    keep: &[bool],
) -> Result<Var> {
    let eps = cfg.ln_eps;
    let h = fwd.layer_norm(x, &format!("{prefix}.norm_in"), eps)?;
    let pw1 = fwd.linear(&format!("{prefix}.pw1"))?;
    let h = pw1.apply(fwd.tape, h)?;
    let h = fwd.tape.relu6(h)?;
    let dw = fwd.linear(&format!("{prefix}.dw"))?;
    let h = fwd.tape.conv1d_depthwise(h, dw.weight, dw.bias, keep)?;
    let h = fwd.tape.relu6(h)?;
    let pw2 = fwd.linear(&format!("{prefix}.pw2"))?;
    let h = pw2.apply(fwd.tape, h)?;
    let h = fwd.layer_norm(h, &format!("{prefix}.norm_out"), eps)?;
    let h = fwd.dropout(h)?;
    fwd.tape.add(x, h)
}

/// `x + PW2(Dropout(Swish(BN(DW(GLU(PW1(LN(x))))))))`
fn conv_original<R: Real>(
    fwd: &mut Forward<'_, '_, R>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    keep: &[bool],
) -> Result<Var> {
    let d = cfg.hidden;
    let h = fwd.layer_norm(x, &format!("{prefix}.norm"), cfg.ln_eps)?;
    let pw1 = fwd.linear(&format!("{prefix}.pw1"))?;
    let h = pw1.apply(fwd.tape, h)?;
    let h = glu(fwd, h, d)?;
    let dw = fwd.linear(&format!("{prefix}.dw"))?;
    let h = fwd.tape.conv1d_depthwise(h, dw.weight, dw.bias, keep)?;
    let h = batch_norm(fwd, cfg, &format!("{prefix}.bn"), h, keep)?;
    let g = fwd.tape.sigmoid(h)?;
    let h = fwd.tape.mul(h, g)?;
    let h = fwd.dropout(h)?;
    let pw2 = fwd.linear(&format!("{prefix}.pw2"))?;
    let h = pw2.apply(fwd.tape, h)?;
    let h = fwd.zero_rows(h, keep)?;
    fwd.tape.add(x, h)
}

/// `a[.., :d] ⊙ sigmoid(a[.., d:])` for `a[.., 2d]`.
pub(crate) fn glu<R: Real>(fwd: &mut Forward<'_, '_, R>, a: Var, d: usize) -> Result<Var> {
    let value = fwd.tape.slice_last(a, 0, d)?;
    let gate = fwd.tape.slice_last(a, d, d)?;
    let gate = fwd.tape.sigmoid(gate)?;
    fwd.tape.mul(value, gate)
}

/// Batch norm over the valid frames of one sequence.
///
/// Training normalizes with the sequence statistics and records updated
/// running statistics in `fwd.bn_updates`; eval uses the stored ones.
fn batch_norm<R: Real>(
    fwd: &mut Forward<'_, '_, R>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    keep: &[bool],
) -> Result<Var> {
    let gain = fwd.param(&format!("{prefix}.gain"))?;
    let bias = fwd.param(&format!("{prefix}.bias"))?;
    let (mean, rstd) = if fwd.is_training() {
        let n = keep.iter().filter(|&&k| k).count().max(1) as f64;
        let xm = fwd.zero_rows(x, keep)?;
        let s = fwd.tape.sum_axis(xm, 0)?;
        let mean = fwd.tape.scale(s, 1.0 / n)?;
        let c = fwd.tape.sub(x, mean)?;
        let c = fwd.zero_rows(c, keep)?;
        let sq = fwd.tape.mul(c, c)?;
        let s = fwd.tape.sum_axis(sq, 0)?;
        let var = fwd.tape.scale(s, 1.0 / n)?;
        record_running(fwd, cfg, prefix, mean, var)?;
        let rstd = fwd.tape.rsqrt_eps(var, BN_EPS)?;
        (mean, rstd)
    } else {
        let mean = fwd.param(&format!("{prefix}.running_mean"))?;
        let var = fwd.param(&format!("{prefix}.running_var"))?;
        let rstd = fwd.tape.rsqrt_eps(var, BN_EPS)?;
        (mean, rstd)
    };
    let c = fwd.tape.sub(x, mean)?;
    let n = fwd.tape.mul(c, rstd)?;
    let n = fwd.tape.mul(n, gain)?;
    let y = fwd.tape.add(n, bias)?;
    fwd.zero_rows(y, keep)
}

fn record_running<R: Real>(
    fwd: &mut Forward<'_, '_, R>,
    cfg: &ModelConfig,
    prefix: &str,
    mean: Var,
    var: Var,
) -> Result<()> {
    let m = cfg.bn_momentum;
    for (stat, v) in [("running_mean", mean), ("running_var", var)] {
        let name = format!("{prefix}.{stat}");
        let old = fwd.param(&name)?;
        let old = fwd.tape.value(old).to_vec();
        let new = fwd.tape.value(v);
        let upd = old
            .iter()
            .zip(new)
            .map(|(o, n)| ((1.0 - m) * o.as_f64() + m * n.as_f64()) as f32)
            .collect();
        fwd.bn_updates.push((name, upd));
    }
    Ok(())
}
