//! Attention with pluggable positional mechanisms (symplectic flow, rotary,
//! none), multi-head assembly, and the pre-norm encoder layer.
//!
//! The flow entries are rebuilt on the tape from the raw band parameters so
//! that gradients reach (alpha, beta, gamma) and, through the clock, the
//! warp parameters. The scalar closed form in [`crate::sype`] is the
//! reference these tensors are checked against.

use crate::numcore::{NumError, Tape, TensorId};
use crate::warp;

/// Positional mechanism of a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeKind {
    Sype,
    Rope,
    None,
}

/// Clock source for an encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpMode {
    Adaptive,
    Identity,
}

/// Per-head tensors bound on the active tape.
#[derive(Debug, Clone)]
pub struct HeadBinding {
    /// (d_h, d_model)
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub kernel: PositionKernel,
}

/// Band parameters (sype), fixed frequencies (rope), or nothing.
#[derive(Debug, Clone)]
pub enum PositionKernel {
    Sype {
        alpha: TensorId,
        beta: TensorId,
        gamma: TensorId,
    },
    Rope {
        freqs: TensorId,
    },
    None,
}

/// Feed-forward tensors of one layer.
#[derive(Debug, Clone)]
pub struct FfnBinding {
    pub ln_gamma: TensorId,
    pub ln_beta: TensorId,
    /// (4*d_model, d_model)
    pub w1: TensorId,
    pub b1: TensorId,
    /// (d_model, 4*d_model)
    pub w2: TensorId,
    pub b2: TensorId,
}

/// All tensors of one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerBinding {
    pub ln_gamma: TensorId,
    pub ln_beta: TensorId,
    pub heads: Vec<HeadBinding>,
    /// (d_model, n_heads * d_h)
    pub wo: TensorId,
    /// Present when the layer computes an adaptive clock.
    pub warp_weight: Option<TensorId>,
    pub warp_bias: Option<TensorId>,
    pub ffn: Option<FfnBinding>,
}

/// Pre-sampled dropout masks for one layer (values 0 or 1/keep).
#[derive(Debug, Clone, Copy)]
pub struct LayerMasks {
    pub attn: TensorId,
    pub ffn: TensorId,
}

/// Four (N, n_bands) entry matrices [S11, S12, S21, S22] of the per-band
/// flow evaluated at each clock value, differentiable in the band
/// parameters and the clock.
///
/// omega is produced through log-space identities that stay inside the
/// primitive set: ln(omega) = ln 2 + (alpha+beta)/2 - gamma minus
/// softplus(-2 gamma), and sin(wt)/omega switches to the cubic/quintic
/// series below |wt| < 1e-4 so the value and its derivatives stay smooth
/// across the branch.
pub fn sype_flow_entries(
    tape: &mut Tape,
    alpha: TensorId,
    beta: TensorId,
    gamma: TensorId,
    clock: TensorId,
) -> Result<[TensorId; 4], NumError> {
    let nb = tape.shape(alpha)[0];
    let n = tape.shape(clock)[0];

    let sum_ab = tape.add(alpha, beta)?;
    let half = tape.scalar_mul(sum_ab, 0.5);
    let neg2g = tape.scalar_mul(gamma, -2.0);
    let sp = tape.softplus(neg2g);
    let d1 = tape.sub(half, gamma)?;
    let d2 = tape.sub(d1, sp)?;
    let log_omega = tape.scalar_add(d2, std::f64::consts::LN_2);
    let omega = tape.exp(log_omega);
    let neg_log_omega = tape.neg(log_omega);
    let inv_omega = tape.exp(neg_log_omega);

    let coeff_a = tape.exp(alpha);
    let coeff_b = tape.exp(beta);
    let sqrt_ab = tape.exp(half);
    let rho = tape.tanh(gamma);
    let coeff_c = tape.mul(rho, sqrt_ab)?;

    // angles (N, nb) = clock (N,1) x omega (1,nb)
    let clock_col = tape.reshape(clock, vec![n, 1])?;
    let omega_row = tape.reshape(omega, vec![1, nb])?;
    let angles = tape.matmul(clock_col, omega_row)?;
    let cos_a = tape.cos(angles);
    let sin_a = tape.sin(angles);

    // Regular branch: sin(wt) / omega.
    let regular = tape.mul(sin_a, inv_omega)?;

    // Series branch: t * (1 - (wt)^2/6 + (wt)^4/120); needs t tiled to (N, nb).
    let ones_row = tape.constant(vec![1.0; nb], vec![1, nb]);
    let clock_mat = tape.matmul(clock_col, ones_row)?;
    let u2 = tape.mul(angles, angles)?;
    let u4 = tape.mul(u2, u2)?;
    let term2 = tape.scalar_mul(u2, -1.0 / 6.0);
    let term4 = tape.scalar_mul(u4, 1.0 / 120.0);
    let poly_partial = tape.add(term2, term4)?;
    let poly = tape.scalar_add(poly_partial, 1.0);
    let series = tape.mul(clock_mat, poly)?;

    // Select per element on |angle| < 1e-4; the mask is data, not gradient.
    let mask_small: Vec<f64> = tape
        .values(angles)
        .iter()
        .map(|a| if a.abs() < 1e-4 { 1.0 } else { 0.0 })
        .collect();
    let mask_regular: Vec<f64> = mask_small.iter().map(|m| 1.0 - m).collect();
    let m_small = tape.constant(mask_small, vec![n, nb]);
    let m_regular = tape.constant(mask_regular, vec![n, nb]);
    let series_sel = tape.masked_zero(series, m_small)?;
    let regular_sel = tape.masked_zero(regular, m_regular)?;
    let sinc = tape.add(series_sel, regular_sel)?;

    // S11 = cos + c*sinc, S12 = b*sinc, S21 = -a*sinc, S22 = cos - c*sinc.
    let c_sinc = tape.mul(sinc, coeff_c)?;
    let s11 = tape.add(cos_a, c_sinc)?;
    let s12 = tape.mul(sinc, coeff_b)?;
    let a_sinc = tape.mul(sinc, coeff_a)?;
    let s21 = tape.neg(a_sinc);
    let s22 = tape.sub(cos_a, c_sinc)?;
    Ok([s11, s12, s21, s22])
}

/// Rotation entries [cos, sin, -sin, cos] at angle freq*clock, (N, n_bands).
pub fn rope_flow_entries(
    tape: &mut Tape,
    freqs: TensorId,
    clock: TensorId,
) -> Result<[TensorId; 4], NumError> {
    let nb = tape.shape(freqs)[0];
    let n = tape.shape(clock)[0];
    let clock_col = tape.reshape(clock, vec![n, 1])?;
    let freq_row = tape.reshape(freqs, vec![1, nb])?;
    let angles = tape.matmul(clock_col, freq_row)?;
    let cos_a = tape.cos(angles);
    let sin_a = tape.sin(angles);
    let neg_sin = tape.neg(sin_a);
    Ok([cos_a, sin_a, neg_sin, cos_a])
}

/// Split (N, d_h) into its even/odd pair components, each (N, d_h/2).
fn split_pairs(tape: &mut Tape, x: TensorId) -> Result<(TensorId, TensorId), NumError> {
    let s = tape.shape(x).to_vec();
    let (n, dh) = (s[0], s[1]);
    if dh % 2 != 0 {
        return Err(NumError::Invalid(format!(
            "head dim {dh} must be even for paired flows"
        )));
    }
    let nb = dh / 2;
    let paired = tape.reshape(x, vec![n, nb, 2])?;
    let even3 = tape.slice(paired, 2, 0, 1)?;
    let odd3 = tape.slice(paired, 2, 1, 1)?;
    let even = tape.reshape(even3, vec![n, nb])?;
    let odd = tape.reshape(odd3, vec![n, nb])?;
    Ok((even, odd))
}

/// Reassemble interleaved pairs from (N, d_h/2) components.
fn join_pairs(tape: &mut Tape, even: TensorId, odd: TensorId) -> Result<TensorId, NumError> {
    let s = tape.shape(even).to_vec();
    let (n, nb) = (s[0], s[1]);
    let e3 = tape.reshape(even, vec![n, nb, 1])?;
    let o3 = tape.reshape(odd, vec![n, nb, 1])?;
    let joined = tape.concat(&[e3, o3])?;
    tape.reshape(joined, vec![n, 2 * nb])
}

/// Per row n and band i, multiply the pair by the 2x2 matrix with entries
/// taken from row n, column i of the four entry matrices.
fn modulate_pairs(
    tape: &mut Tape,
    x: TensorId,
    entries: &[TensorId; 4],
) -> Result<TensorId, NumError> {
    let (even, odd) = split_pairs(tape, x)?;
    let [s11, s12, s21, s22] = *entries;
    let e11 = tape.mul(s11, even)?;
    let e12 = tape.mul(s12, odd)?;
    let new_even = tape.add(e11, e12)?;
    let o21 = tape.mul(s21, even)?;
    let o22 = tape.mul(s22, odd)?;
    let new_odd = tape.add(o21, o22)?;
    join_pairs(tape, new_even, new_odd)
}

/// Apply J = [[0, 1], [-1, 0]] per pair: (x, y) -> (y, -x).
fn apply_j_pairs(tape: &mut Tape, x: TensorId) -> Result<TensorId, NumError> {
    let (even, odd) = split_pairs(tape, x)?;
    let neg_even = tape.neg(even);
    join_pairs(tape, odd, neg_even)
}

/// N x N attention scores for already-projected queries and keys.
///
/// sype:  s[m, n] = <S(tau_m) q_m, J S(tau_n) k_n> / sqrt(d_h)
/// rope:  s[m, n] = <R(tau_m) q_m, R(tau_n) k_n> / sqrt(d_h)
/// none:  plain scaled dot product. Attention is full bidirectional.
pub fn attention_scores(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    clock: TensorId,
    kernel: &PositionKernel,
) -> Result<TensorId, NumError> {
    let sq = tape.shape(q).to_vec();
    let sk = tape.shape(k).to_vec();
    if sq.len() != 2 || sq != sk {
        return Err(NumError::Invalid(format!(
            "attention_scores: Q {sq:?} and K {sk:?} must be identical rank-2 shapes"
        )));
    }
    let n = sq[0];
    if tape.shape(clock) != [n] {
        return Err(NumError::Invalid(format!(
            "attention_scores: clock length {:?} does not match N = {n}",
            tape.shape(clock)
        )));
    }
    let dh = sq[1];
    let (q_mod, k_mod) = match kernel {
        PositionKernel::Sype { alpha, beta, gamma } => {
            let entries = sype_flow_entries(tape, *alpha, *beta, *gamma, clock)?;
            let qf = modulate_pairs(tape, q, &entries)?;
            let kf = modulate_pairs(tape, k, &entries)?;
            let kj = apply_j_pairs(tape, kf)?;
            (qf, kj)
        }
        PositionKernel::Rope { freqs } => {
            let entries = rope_flow_entries(tape, *freqs, clock)?;
            let qf = modulate_pairs(tape, q, &entries)?;
            let kf = modulate_pairs(tape, k, &entries)?;
            (qf, kf)
        }
        PositionKernel::None => (q, k),
    };
    let kt = tape.transpose(k_mod)?;
    let raw = tape.matmul(q_mod, kt)?;
    Ok(tape.scalar_mul(raw, 1.0 / (dh as f64).sqrt()))
}

/// One head: project tokens, score, softmax over rows, mix values.
pub fn attention_head(
    tape: &mut Tape,
    tokens: TensorId,
    clock: TensorId,
    head: &HeadBinding,
) -> Result<TensorId, NumError> {
    let wq_t = tape.transpose(head.wq)?;
    let wk_t = tape.transpose(head.wk)?;
    let wv_t = tape.transpose(head.wv)?;
    let q = tape.matmul(tokens, wq_t)?;
    let k = tape.matmul(tokens, wk_t)?;
    let v = tape.matmul(tokens, wv_t)?;
    let scores = attention_scores(tape, q, k, clock, &head.kernel)?;
    let weights = tape.softmax(scores)?;
    tape.matmul(weights, v)
}

/// Concatenate head outputs and project by W_O (d_model, n_heads*d_h).
pub fn multi_head(
    tape: &mut Tape,
    tokens: TensorId,
    clock: TensorId,
    heads: &[HeadBinding],
    wo: TensorId,
) -> Result<TensorId, NumError> {
    if heads.is_empty() {
        return Err(NumError::Invalid("multi_head: no heads".into()));
    }
    let mut outs = Vec::with_capacity(heads.len());
    for head in heads {
        outs.push(attention_head(tape, tokens, clock, head)?);
    }
    let cat = tape.concat(&outs)?;
    let wo_t = tape.transpose(wo)?;
    tape.matmul(cat, wo_t)
}

/// Smooth tanh-form GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
pub fn gelu(tape: &mut Tape, x: TensorId) -> Result<TensorId, NumError> {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    let x2 = tape.mul(x, x)?;
    let x3 = tape.mul(x2, x)?;
    let cubic = tape.scalar_mul(x3, 0.044715);
    let inner = tape.add(x, cubic)?;
    let scaled = tape.scalar_mul(inner, SQRT_2_OVER_PI);
    let th = tape.tanh(scaled);
    let one_plus = tape.scalar_add(th, 1.0);
    let halfx = tape.scalar_mul(x, 0.5);
    tape.mul(halfx, one_plus)
}

/// Pre-norm residual encoder layer: x + MHA(LN(x)), then optionally
/// x + FFN(LN(x)). When `warp_mode` is adaptive the layer derives its own
/// clock from its input tokens; otherwise the clock is (1, ..., N).
/// Dropout masks, when given, multiply the sublayer outputs.
pub fn encoder_layer(
    tape: &mut Tape,
    x: TensorId,
    layer: &LayerBinding,
    warp_mode: WarpMode,
    use_mlp: bool,
    masks: Option<&LayerMasks>,
) -> Result<TensorId, NumError> {
    let n = tape.shape(x)[0];
    let clock = match warp_mode {
        WarpMode::Adaptive => {
            let (w, b) = match (layer.warp_weight, layer.warp_bias) {
                (Some(w), Some(b)) => (w, b),
                _ => {
                    return Err(NumError::Invalid(
                        "encoder_layer: adaptive warp requires warp parameters".into(),
                    ))
                }
            };
            let inc = warp::increments_on_tape(tape, x, w, b)?;
            warp::clock_on_tape(tape, inc)?
        }
        WarpMode::Identity => tape.constant((1..=n).map(|i| i as f64).collect(), vec![n]),
    };

    let normed = tape.layer_norm(x, layer.ln_gamma, layer.ln_beta)?;
    let mut attn_out = multi_head(tape, normed, clock, &layer.heads, layer.wo)?;
    if let Some(m) = masks {
        attn_out = tape.masked_zero(attn_out, m.attn)?;
    }
    let mut h = tape.add(x, attn_out)?;

    if use_mlp {
        let ffn = layer.ffn.as_ref().ok_or_else(|| {
            NumError::Invalid("encoder_layer: use_mlp set but no FFN parameters bound".into())
        })?;
        let normed2 = tape.layer_norm(h, ffn.ln_gamma, ffn.ln_beta)?;
        let w1_t = tape.transpose(ffn.w1)?;
        let pre = tape.matmul(normed2, w1_t)?;
        let pre_b = tape.add(pre, ffn.b1)?;
        let act = gelu(tape, pre_b)?;
        let w2_t = tape.transpose(ffn.w2)?;
        let post = tape.matmul(act, w2_t)?;
        let mut post_b = tape.add(post, ffn.b2)?;
        if let Some(m) = masks {
            post_b = tape.masked_zero(post_b, m.ffn)?;
        }
        h = tape.add(h, post_b)?;
    }
    Ok(h)
}
