//! Central-finite-difference verification of reverse-mode gradients.

use super::{NumError, Result, Tape, TensorId};

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at `point`. Returns the max over coordinates of
/// |analytic - central| / max(|analytic|, |central|, 1e-8).
pub fn gradcheck<F>(f: F, point: &[f64], shape: &[usize], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    assert!(step > 0.0, "gradcheck step must be positive");

    let mut tape = Tape::new();
    let x = tape.leaf(point.to_vec(), shape.to_vec(), true);
    let loss = f(&mut tape, x)?;
    if tape.values(loss).len() != 1 {
        return Err(NumError::NonScalarLoss(tape.shape(loss).to_vec()));
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let mut max_rel = 0.0_f64;
    for i in 0..point.len() {
        let eval = |v: f64| -> Result<f64> {
            let mut t = Tape::no_grad();
            let mut p = point.to_vec();
            p[i] = v;
            let x = t.leaf(p, shape.to_vec(), false);
            let out = f(&mut t, x)?;
            Ok(t.scalar_value(out))
        };
        let plus = eval(point[i] + step)?;
        let minus = eval(point[i] - step)?;
        let central = (plus - minus) / (2.0 * step);
        if !central.is_finite() || !analytic[i].is_finite() {
            return Err(NumError::NonFinite {
                context: "gradcheck".into(),
                index: i,
            });
        }
        let denom = analytic[i].abs().max(central.abs()).max(1e-8);
        max_rel = max_rel.max((analytic[i] - central).abs() / denom);
    }
    Ok(max_rel)
}

/// Relative error between an analytic gradient and a set of central
/// differences computed by the caller. Shared by the model-level checks.
pub fn max_relative_error(analytic: &[f64], central: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(central)
        .map(|(a, c)| (a - c).abs() / a.abs().max(c.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
