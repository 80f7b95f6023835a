//! Adaptive warp module: content-dependent positive time increments and
//! their cumulative clock.
//!
//! Each token contributes an increment softplus(w . h_t + bias) > 0; the
//! inclusive cumulative sum is the warped clock that replaces the integer
//! index inside the attention flows. With zero weight and
//! [`identity_bias`], every increment is exactly 1.0 and the clock equals
//! [`identity_clock`] bit for bit, which is what the static-clock ablation
//! relies on.

use crate::numcore::{self, NumError, Tape, TensorId};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WarpError {
    #[error("increment at index {index} is non-positive ({value}); upstream numerical fault")]
    NonPositiveIncrement { index: usize, value: f64 },
    #[error("clock length must be at least 1")]
    Empty,
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Learnable warp parameters of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpParams {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl WarpParams {
    /// Start at the unwarped clock: zero weight, bias such that every
    /// increment is exactly 1.
    pub fn identity_init(d_model: usize) -> Self {
        WarpParams {
            weight: vec![0.0; d_model],
            bias: identity_bias(),
        }
    }
}

/// Per-token increments and their inclusive cumulative sum.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpClock {
    increments: Vec<f64>,
    clock: Vec<f64>,
}

impl WarpClock {
    pub fn increments(&self) -> &[f64] {
        &self.increments
    }
    pub fn clock(&self) -> &[f64] {
        &self.clock
    }
    pub fn len(&self) -> usize {
        self.clock.len()
    }
    pub fn is_empty(&self) -> bool {
        self.clock.is_empty()
    }
}

/// The f64 nearest ln(e-1) whose softplus is exactly 1.0.
///
/// ln(1 + e^x) = 1 has the real solution x = ln(e-1), but rounding through
/// exp/ln_1p can land one ulp off; the deterministic search below pins the
/// representable bias that makes the unwarped initialization exact.
pub fn identity_bias() -> f64 {
    let base = (std::f64::consts::E - 1.0).ln();
    if numcore::kernels::softplus(base) == 1.0 {
        return base;
    }
    for dist in 1i64..=8 {
        for signed in [dist, -dist] {
            let candidate = f64::from_bits((base.to_bits() as i64 + signed) as u64);
            if numcore::kernels::softplus(candidate) == 1.0 {
                return candidate;
            }
        }
    }
    // softplus is monotone and continuous; within 8 ulps of the real root a
    // representable preimage of 1.0 always exists in practice.
    unreachable!("no representable bias maps to softplus == 1.0");
}

/// Tape route: increments[t] = softplus(tokens[t] . weight + bias).
///
/// `tokens` is (N, d_model), `weight` is (d_model,) and `bias` a scalar;
/// the result is (N,), differentiable through all three.
pub fn increments_on_tape(
    tape: &mut Tape,
    tokens: TensorId,
    weight: TensorId,
    bias: TensorId,
) -> Result<TensorId, NumError> {
    let d = tape.shape(weight)[0];
    let w_col = tape.reshape(weight, vec![d, 1])?;
    let proj = tape.matmul(tokens, w_col)?;
    let n = tape.shape(proj)[0];
    let flat = tape.reshape(proj, vec![n])?;
    let shifted = tape.add(flat, bias)?;
    Ok(tape.softplus(shifted))
}

/// Tape route: inclusive cumulative sum of (N,) increments.
pub fn clock_on_tape(tape: &mut Tape, increments: TensorId) -> Result<TensorId, NumError> {
    tape.cumsum(increments, 0)
}

/// increments[t] = softplus(weight . tokens[t] + bias) for an (n, d) token
/// matrix. Evaluates the same graph as [`increments_on_tape`].
pub fn warp_increments(tokens: &[f64], n: usize, d: usize, params: &WarpParams) -> Vec<f64> {
    assert_eq!(tokens.len(), n * d, "token buffer does not match (n, d)");
    assert_eq!(params.weight.len(), d, "weight length does not match d");
    let mut tape = Tape::no_grad();
    let toks = tape.constant(tokens.to_vec(), vec![n, d]);
    let w = tape.constant(params.weight.clone(), vec![d]);
    let b = tape.constant(vec![params.bias], vec![]);
    let id = increments_on_tape(&mut tape, toks, w, b).expect("shapes are consistent");
    tape.values(id).to_vec()
}

/// Validate positivity and accumulate the clock.
pub fn warp_clock(increments: &[f64]) -> Result<WarpClock, WarpError> {
    if increments.is_empty() {
        return Err(WarpError::Empty);
    }
    for (i, &v) in increments.iter().enumerate() {
        if !v.is_finite() || v <= 0.0 {
            return Err(WarpError::NonPositiveIncrement { index: i, value: v });
        }
    }
    let mut clock = Vec::with_capacity(increments.len());
    let mut acc = 0.0;
    for &v in increments {
        acc += v;
        clock.push(acc);
    }
    Ok(WarpClock {
        increments: increments.to_vec(),
        clock,
    })
}

/// The unwarped clock (1, 2, ..., n) used by the static-clock ablation and
/// the rotary baseline.
pub fn identity_clock(n: usize) -> Result<WarpClock, WarpError> {
    if n == 0 {
        return Err(WarpError::Empty);
    }
    let increments = vec![1.0; n];
    let clock = (1..=n).map(|i| i as f64).collect();
    Ok(WarpClock { increments, clock })
}
