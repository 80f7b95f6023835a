//! The StretchTime forecaster: last-value residual, channel-value mixed
//! tokenization, random-ratio channel dropout, encoder stack, affine
//! readout over the horizon slots.
//!
//! Parameters live in a named, ordered registry ([`ParamSet`]); every
//! forward pass binds them as leaves on a fresh tape, which keeps per-sample
//! gradient accumulation bit-reproducible regardless of batching.

use crate::attention::{
    encoder_layer, FfnBinding, HeadBinding, LayerBinding, LayerMasks, PeKind, PositionKernel,
    WarpMode,
};
use crate::numcore::{NumError, Tape, TensorId};
use crate::sype::rope_frequencies;
use crate::warp;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Architecture description. `d_global + d_local = d_model` splits each
/// token between the cross-channel context and the channel-local signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub d_model: usize,
    pub d_global: usize,
    pub d_local: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub pe_kind: PeKind,
    pub warp_mode: WarpMode,
    pub use_mlp: bool,
    pub dropout_rate: f64,
    pub channel_dropout_min_keep: f64,
}

impl ModelConfig {
    /// Symmetric-split constructor with the common flags defaulted to the
    /// full model (sype kernel, adaptive warp, MLP on).
    pub fn new(lookback: usize, horizon: usize, channels: usize, d_model: usize) -> Self {
        ModelConfig {
            lookback,
            horizon,
            channels,
            d_model,
            d_global: d_model / 2,
            d_local: d_model - d_model / 2,
            n_layers: 1,
            n_heads: 4,
            pe_kind: PeKind::Sype,
            warp_mode: WarpMode::Adaptive,
            use_mlp: true,
            dropout_rate: 0.1,
            channel_dropout_min_keep: 0.5,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.lookback + self.horizon
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.lookback == 0 || self.horizon == 0 || self.channels == 0 {
            return bad("lookback, horizon and channels must be >= 1".into());
        }
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1".into());
        }
        if self.d_model == 0 || self.n_heads == 0 {
            return bad("d_model and n_heads must be >= 1".into());
        }
        if self.d_global + self.d_local != self.d_model {
            return bad(format!(
                "d_global {} + d_local {} != d_model {}",
                self.d_global, self.d_local, self.d_model
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dim {} must be even", self.head_dim()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        if !(self.channel_dropout_min_keep > 0.0 && self.channel_dropout_min_keep <= 1.0) {
            return bad(format!(
                "channel_dropout_min_keep {} not in (0, 1]",
                self.channel_dropout_min_keep
            ));
        }
        Ok(())
    }
}

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered, named parameter registry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        let name = name.into();
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "param {name}: shape/value mismatch"
        );
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            shape,
            values,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i])
    }

    pub fn at(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

/// Parameters of a model bound as leaves on one tape, aligned with the
/// registry order.
pub struct Bindings {
    ids: Vec<TensorId>,
}

impl Bindings {
    pub fn id(&self, pos: usize) -> TensorId {
        self.ids[pos]
    }
}

/// Pre-sampled stochastic state for one training sample: the channel
/// dropout scale vector and per-(channel, layer) sublayer dropout masks.
#[derive(Debug, Clone)]
pub struct SampleMasks {
    /// Length C; entries are 0 (dropped) or 1/keep (kept, rescaled).
    pub channel_scale: Vec<f64>,
    /// [channel][layer] masks, each (N * d_model) with entries 0 or
    /// 1/(1-rate). Empty when dropout_rate is 0.
    pub attn: Vec<Vec<Vec<f64>>>,
    pub ffn: Vec<Vec<Vec<f64>>>,
}

impl SampleMasks {
    /// Draw masks in a fixed order: keep ratio, then per-channel Bernoulli,
    /// then per (channel, layer) attention / ffn masks.
    pub fn sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> SampleMasks {
        let keep = rng.gen_range(cfg.channel_dropout_min_keep..=1.0);
        let channel_scale = sample_channel_mask(cfg.channels, keep, rng);
        let n = cfg.n_tokens() * cfg.d_model;
        let (mut attn, mut ffn) = (Vec::new(), Vec::new());
        if cfg.dropout_rate > 0.0 {
            let keep_p = 1.0 - cfg.dropout_rate;
            for _ in 0..cfg.channels {
                let mut ca = Vec::new();
                let mut cf = Vec::new();
                for _ in 0..cfg.n_layers {
                    ca.push(
                        (0..n)
                            .map(|_| {
                                if rng.gen::<f64>() < keep_p {
                                    1.0 / keep_p
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                    if cfg.use_mlp {
                        cf.push(
                            (0..n)
                                .map(|_| {
                                    if rng.gen::<f64>() < keep_p {
                                        1.0 / keep_p
                                    } else {
                                        0.0
                                    }
                                })
                                .collect(),
                        );
                    } else {
                        cf.push(Vec::new());
                    }
                }
                attn.push(ca);
                ffn.push(cf);
            }
        }
        SampleMasks {
            channel_scale,
            attn,
            ffn,
        }
    }
}

/// Per-channel inverted-dropout scales: kept channels carry 1/keep_ratio,
/// dropped channels 0. keep_ratio must lie in (0, 1].
pub fn sample_channel_mask(channels: usize, keep_ratio: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    assert!(
        keep_ratio > 0.0 && keep_ratio <= 1.0,
        "keep_ratio {keep_ratio} outside (0, 1]"
    );
    (0..channels)
        .map(|_| {
            if rng.gen::<f64>() < keep_ratio {
                1.0 / keep_ratio
            } else {
                0.0
            }
        })
        .collect()
}

/// Zero dropped channels and rescale kept ones on an (rows x channels)
/// matrix. keep_ratio = 1 is the identity.
pub fn channel_dropout(
    x: &[f64],
    rows: usize,
    channels: usize,
    keep_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, ModelError> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(ModelError::InvalidConfig(format!(
            "keep_ratio {keep_ratio} outside (0, 1]"
        )));
    }
    let mask = sample_channel_mask(channels, keep_ratio, rng);
    Ok(apply_channel_mask(x, rows, channels, &mask))
}

pub fn apply_channel_mask(x: &[f64], rows: usize, channels: usize, mask: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * channels);
    debug_assert_eq!(mask.len(), channels);
    let mut out = x.to_vec();
    for t in 0..rows {
        for c in 0..channels {
            out[t * channels + c] *= mask[c];
        }
    }
    out
}

/// Subtract the final row from every row; returns (X_diff, reference row).
pub fn center_last_value(
    x: &[f64],
    rows: usize,
    channels: usize,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    if rows == 0 || x.len() != rows * channels {
        return Err(ModelError::InvalidConfig(
            "center_last_value: empty input or shape mismatch".into(),
        ));
    }
    let last = x[(rows - 1) * channels..rows * channels].to_vec();
    let mut diff = x.to_vec();
    for t in 0..rows {
        for c in 0..channels {
            diff[t * channels + c] -= last[c];
        }
    }
    Ok((diff, last))
}

/// Exact learnable scalar count implied by a config; the registry built by
/// [`StretchTimeModel::init`] must total to the same number.
pub fn count_params(cfg: &ModelConfig) -> Result<usize, ModelError> {
    cfg.validate()?;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let n = cfg.n_tokens();
    let mut total = cfg.d_global * cfg.channels       // global projection
        + cfg.channels * cfg.d_local                  // channel bases
        + n * d                                       // absolute positions
        + cfg.channels * d; // channel embeddings
    let mut per_layer = 2 * d                         // ln1
        + cfg.n_heads * 3 * dh * d                    // W_Q, W_K, W_V
        + d * d; // W_O
    if cfg.pe_kind == PeKind::Sype {
        per_layer += cfg.n_heads * 3 * (dh / 2); // alpha, beta, gamma
    }
    if cfg.warp_mode == WarpMode::Adaptive {
        per_layer += d + 1; // warp weight + bias
    }
    if cfg.use_mlp {
        per_layer += 2 * d                            // ln2
            + 4 * d * d + 4 * d                       // W1, b1
            + d * 4 * d + d; // W2, b2
    }
    total += cfg.n_layers * per_layer;
    total += d + 1; // readout
    Ok(total)
}

/// Config plus parameter registry.
#[derive(Debug, Clone, PartialEq)]
pub struct StretchTimeModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl StretchTimeModel {
    /// Deterministic initialization from a seed: GPT-2-style N(0, 0.02)
    /// weights with residual projections scaled by 1/sqrt(2*n_layers),
    /// rotary-ladder band parameters, identity warp, zero readout (the
    /// untrained model is exactly the last-value persistence baseline).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let gauss = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| normal.sample(rng)).collect()
        };
        let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();

        let d = config.d_model;
        let dh = config.head_dim();
        let nb = dh / 2;
        let n = config.n_tokens();
        let c = config.channels;
        let mut ps = ParamSet::default();

        ps.push(
            "global_proj",
            vec![config.d_global, c],
            gauss(config.d_global * c, &mut rng),
        );
        ps.push(
            "channel_basis",
            vec![c, config.d_local],
            gauss(c * config.d_local, &mut rng),
        );
        ps.push("pos_embed", vec![n, d], gauss(n * d, &mut rng));
        ps.push("chan_embed", vec![c, d], gauss(c * d, &mut rng));

        for l in 0..config.n_layers {
            ps.push(format!("layer{l}.ln1.gamma"), vec![d], vec![1.0; d]);
            ps.push(format!("layer{l}.ln1.beta"), vec![d], vec![0.0; d]);
            for h in 0..config.n_heads {
                ps.push(
                    format!("layer{l}.head{h}.wq"),
                    vec![dh, d],
                    gauss(dh * d, &mut rng),
                );
                ps.push(
                    format!("layer{l}.head{h}.wk"),
                    vec![dh, d],
                    gauss(dh * d, &mut rng),
                );
                ps.push(
                    format!("layer{l}.head{h}.wv"),
                    vec![dh, d],
                    gauss(dh * d, &mut rng),
                );
                if config.pe_kind == PeKind::Sype {
                    let freqs = rope_frequencies(dh);
                    let logs: Vec<f64> = freqs.iter().map(|f| f.ln()).collect();
                    ps.push(format!("layer{l}.head{h}.alpha"), vec![nb], logs.clone());
                    ps.push(format!("layer{l}.head{h}.beta"), vec![nb], logs);
                    ps.push(format!("layer{l}.head{h}.gamma"), vec![nb], vec![0.0; nb]);
                }
            }
            let wo: Vec<f64> = gauss(d * d, &mut rng)
                .into_iter()
                .map(|v| v * residual_scale)
                .collect();
            ps.push(format!("layer{l}.wo"), vec![d, d], wo);
            if config.warp_mode == WarpMode::Adaptive {
                ps.push(format!("layer{l}.warp.weight"), vec![d], vec![0.0; d]);
                ps.push(
                    format!("layer{l}.warp.bias"),
                    vec![],
                    vec![warp::identity_bias()],
                );
            }
            if config.use_mlp {
                let hidden = 4 * d;
                ps.push(format!("layer{l}.ln2.gamma"), vec![d], vec![1.0; d]);
                ps.push(format!("layer{l}.ln2.beta"), vec![d], vec![0.0; d]);
                ps.push(
                    format!("layer{l}.ffn.w1"),
                    vec![hidden, d],
                    gauss(hidden * d, &mut rng),
                );
                ps.push(format!("layer{l}.ffn.b1"), vec![hidden], vec![0.0; hidden]);
                let w2: Vec<f64> = gauss(d * hidden, &mut rng)
                    .into_iter()
                    .map(|v| v * residual_scale)
                    .collect();
                ps.push(format!("layer{l}.ffn.w2"), vec![d, hidden], w2);
                ps.push(format!("layer{l}.ffn.b2"), vec![d], vec![0.0; d]);
            }
        }
        ps.push("readout.weight", vec![1, d], vec![0.0; d]);
        ps.push("readout.bias", vec![], vec![0.0]);

        debug_assert_eq!(ps.total_scalars(), count_params(&config)?);
        Ok(StretchTimeModel { config, params: ps })
    }

    /// Register every parameter as a leaf on `tape`, in registry order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bindings {
        let ids = self
            .params
            .iter()
            .map(|p| tape.leaf(p.values.clone(), p.shape.clone(), trainable))
            .collect();
        Bindings { ids }
    }

    fn pid(&self, name: &str) -> usize {
        self.params
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn layer_binding(&self, binds: &Bindings, tape: &mut Tape, l: usize) -> LayerBinding {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let get = |name: String| binds.id(self.pid(&name));
        let heads = (0..cfg.n_heads)
            .map(|h| {
                let kernel = match cfg.pe_kind {
                    PeKind::Sype => PositionKernel::Sype {
                        alpha: get(format!("layer{l}.head{h}.alpha")),
                        beta: get(format!("layer{l}.head{h}.beta")),
                        gamma: get(format!("layer{l}.head{h}.gamma")),
                    },
                    PeKind::Rope => {
                        let f = rope_frequencies(dh);
                        let nb = f.len();
                        PositionKernel::Rope {
                            freqs: tape.constant(f, vec![nb]),
                        }
                    }
                    PeKind::None => PositionKernel::None,
                };
                HeadBinding {
                    wq: get(format!("layer{l}.head{h}.wq")),
                    wk: get(format!("layer{l}.head{h}.wk")),
                    wv: get(format!("layer{l}.head{h}.wv")),
                    kernel,
                }
            })
            .collect();
        let (warp_weight, warp_bias) = if cfg.warp_mode == WarpMode::Adaptive {
            (
                Some(get(format!("layer{l}.warp.weight"))),
                Some(get(format!("layer{l}.warp.bias"))),
            )
        } else {
            (None, None)
        };
        let ffn = cfg.use_mlp.then(|| FfnBinding {
            ln_gamma: get(format!("layer{l}.ln2.gamma")),
            ln_beta: get(format!("layer{l}.ln2.beta")),
            w1: get(format!("layer{l}.ffn.w1")),
            b1: get(format!("layer{l}.ffn.b1")),
            w2: get(format!("layer{l}.ffn.w2")),
            b2: get(format!("layer{l}.ffn.b2")),
        });
        LayerBinding {
            ln_gamma: get(format!("layer{l}.ln1.gamma")),
            ln_beta: get(format!("layer{l}.ln1.beta")),
            heads,
            wo: get(format!("layer{l}.wo")),
            warp_weight,
            warp_bias,
            ffn,
        }
    }

    /// Token sequence for one target channel: concat(global context,
    /// value-scaled channel basis) + absolute position + channel embedding.
    /// `x_pad` is the centered input padded with zero rows over the horizon.
    fn tokenize(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        x_pad: TensorId,
        channel: usize,
    ) -> Result<TensorId, ModelError> {
        let cfg = &self.config;
        let n = cfg.n_tokens();
        let gp = binds.id(self.pid("global_proj"));
        let gp_t = tape.transpose(gp)?;
        let global = tape.matmul(x_pad, gp_t)?;
        let col = tape.slice(x_pad, 1, channel, 1)?;
        let basis_tab = binds.id(self.pid("channel_basis"));
        let basis = tape.embedding(basis_tab, &[channel])?;
        let local = tape.matmul(col, basis)?;
        let tok = tape.concat(&[global, local])?;
        let pos = binds.id(self.pid("pos_embed"));
        let with_pos = tape.add(tok, pos)?;
        let chan_tab = binds.id(self.pid("chan_embed"));
        let ce2 = tape.embedding(chan_tab, &[channel])?;
        let ce = tape.reshape(ce2, vec![cfg.d_model])?;
        let out = tape.add(with_pos, ce)?;
        debug_assert_eq!(tape.shape(out), &[n, cfg.d_model]);
        Ok(out)
    }

    /// Full forward pass: (lookback x channels) input to (horizon x
    /// channels) prediction. Masks are supplied during training only.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        x: &[f64],
        masks: Option<&SampleMasks>,
    ) -> Result<TensorId, ModelError> {
        let cfg = &self.config;
        let (l, c, n, t_hor) = (cfg.lookback, cfg.channels, cfg.n_tokens(), cfg.horizon);
        if x.len() != l * c {
            return Err(ModelError::InvalidConfig(format!(
                "input length {} != lookback {l} x channels {c}",
                x.len()
            )));
        }
        let (mut diff, reference) = center_last_value(x, l, c)?;
        if let Some(m) = masks {
            diff = apply_channel_mask(&diff, l, c, &m.channel_scale);
        }
        let mut padded = vec![0.0; n * c];
        padded[..l * c].copy_from_slice(&diff);
        let x_pad = tape.constant(padded, vec![n, c]);

        let readout_w = binds.id(self.pid("readout.weight"));
        let readout_b = binds.id(self.pid("readout.bias"));
        let readout_w_t = tape.transpose(readout_w)?;

        let mut columns = Vec::with_capacity(c);
        for ch in 0..c {
            let mut h = self.tokenize(tape, binds, x_pad, ch)?;
            for layer_ix in 0..cfg.n_layers {
                let layer = self.layer_binding(binds, tape, layer_ix);
                let layer_masks = masks.and_then(|m| {
                    if m.attn.is_empty() {
                        None
                    } else {
                        let attn =
                            tape.constant(m.attn[ch][layer_ix].clone(), vec![n, cfg.d_model]);
                        let ffn = if cfg.use_mlp {
                            tape.constant(m.ffn[ch][layer_ix].clone(), vec![n, cfg.d_model])
                        } else {
                            attn
                        };
                        Some(LayerMasks { attn, ffn })
                    }
                });
                h = encoder_layer(
                    tape,
                    h,
                    &layer,
                    cfg.warp_mode,
                    cfg.use_mlp,
                    layer_masks.as_ref(),
                )?;
            }
            let tail = tape.slice(h, 0, l, t_hor)?;
            let raw = tape.matmul(tail, readout_w_t)?;
            let col = tape.add(raw, readout_b)?;
            columns.push(col);
        }
        let merged = tape.concat(&columns)?;
        let ref_row = tape.constant(reference, vec![c]);
        let out = tape.add(merged, ref_row)?;
        debug_assert_eq!(tape.shape(out), &[t_hor, c]);
        Ok(out)
    }

    /// Mean squared error of a prediction tensor against a constant truth.
    pub fn mse_loss(
        &self,
        tape: &mut Tape,
        pred: TensorId,
        truth: &[f64],
    ) -> Result<TensorId, ModelError> {
        let shape = tape.shape(pred).to_vec();
        if truth.len() != tape.values(pred).len() {
            return Err(ModelError::InvalidConfig(format!(
                "truth length {} != prediction {:?}",
                truth.len(),
                shape
            )));
        }
        let t = tape.constant(truth.to_vec(), shape);
        let d = tape.sub(pred, t)?;
        let sq = tape.mul(d, d)?;
        Ok(tape.mean_all(sq))
    }
}

// ── checkpoint io ───────────────────────────────────────────────────────

fn pe_kind_str(k: PeKind) -> &'static str {
    match k {
        PeKind::Sype => "sype",
        PeKind::Rope => "rope",
        PeKind::None => "none",
    }
}

fn parse_pe_kind(s: &str) -> Option<PeKind> {
    match s {
        "sype" => Some(PeKind::Sype),
        "rope" => Some(PeKind::Rope),
        "none" => Some(PeKind::None),
        _ => None,
    }
}

fn warp_mode_str(w: WarpMode) -> &'static str {
    match w {
        WarpMode::Adaptive => "adaptive",
        WarpMode::Identity => "identity",
    }
}

fn parse_warp_mode(s: &str) -> Option<WarpMode> {
    match s {
        "adaptive" => Some(WarpMode::Adaptive),
        "identity" => Some(WarpMode::Identity),
        _ => None,
    }
}

pub fn config_key_values(cfg: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("lookback".into(), cfg.lookback.to_string()),
        ("horizon".into(), cfg.horizon.to_string()),
        ("channels".into(), cfg.channels.to_string()),
        ("d_model".into(), cfg.d_model.to_string()),
        ("d_global".into(), cfg.d_global.to_string()),
        ("d_local".into(), cfg.d_local.to_string()),
        ("n_layers".into(), cfg.n_layers.to_string()),
        ("n_heads".into(), cfg.n_heads.to_string()),
        ("pe_mode".into(), pe_kind_str(cfg.pe_kind).to_string()),
        ("warp_mode".into(), warp_mode_str(cfg.warp_mode).to_string()),
        ("use_mlp".into(), cfg.use_mlp.to_string()),
        ("dropout".into(), format!("{}", cfg.dropout_rate)),
        (
            "channel_dropout_min_keep".into(),
            format!("{}", cfg.channel_dropout_min_keep),
        ),
    ]
}

fn config_from_map(map: &HashMap<String, String>, path: &str) -> Result<ModelConfig, ModelError> {
    let field = |k: &str| -> Result<&String, ModelError> {
        map.get(k).ok_or_else(|| ModelError::Checkpoint {
            path: path.into(),
            detail: format!("missing config key {k}"),
        })
    };
    let us = |k: &str| -> Result<usize, ModelError> {
        field(k)?.parse().map_err(|_| ModelError::Checkpoint {
            path: path.into(),
            detail: format!("bad integer for {k}"),
        })
    };
    let fl = |k: &str| -> Result<f64, ModelError> {
        field(k)?.parse().map_err(|_| ModelError::Checkpoint {
            path: path.into(),
            detail: format!("bad float for {k}"),
        })
    };
    Ok(ModelConfig {
        lookback: us("lookback")?,
        horizon: us("horizon")?,
        channels: us("channels")?,
        d_model: us("d_model")?,
        d_global: us("d_global")?,
        d_local: us("d_local")?,
        n_layers: us("n_layers")?,
        n_heads: us("n_heads")?,
        pe_kind: parse_pe_kind(field("pe_mode")?).ok_or_else(|| ModelError::Checkpoint {
            path: path.into(),
            detail: "bad pe_mode".into(),
        })?,
        warp_mode: parse_warp_mode(field("warp_mode")?).ok_or_else(|| ModelError::Checkpoint {
            path: path.into(),
            detail: "bad warp_mode".into(),
        })?,
        use_mlp: field("use_mlp")? == "true",
        dropout_rate: fl("dropout")?,
        channel_dropout_min_keep: fl("channel_dropout_min_keep")?,
    })
}

/// Plain-text checkpoint: a `[config]` block of `key = value` lines, then
/// one `[param <name> <dims...>]` header plus one line of space-separated
/// values (shortest round-trip float formatting) per parameter.
pub fn save_checkpoint(model: &StretchTimeModel, path: &Path) -> Result<(), ModelError> {
    let pstr = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|source| ModelError::Io {
        path: pstr.clone(),
        source,
    })?;
    let io_err = |source: std::io::Error| ModelError::Io {
        path: pstr.clone(),
        source,
    };
    writeln!(f, "stretchtime-checkpoint-v1").map_err(io_err)?;
    writeln!(f, "[config]").map_err(io_err)?;
    for (k, v) in config_key_values(&model.config) {
        writeln!(f, "{k} = {v}").map_err(io_err)?;
    }
    for p in model.params.iter() {
        let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        writeln!(f, "[param {} {}]", p.name, dims.join(" ")).map_err(io_err)?;
        let vals: Vec<String> = p.values.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{}", vals.join(" ")).map_err(io_err)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<StretchTimeModel, ModelError> {
    let pstr = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: pstr.clone(),
        source,
    })?;
    let chk = |cond: bool, detail: &str| -> Result<(), ModelError> {
        if cond {
            Ok(())
        } else {
            Err(ModelError::Checkpoint {
                path: pstr.clone(),
                detail: detail.into(),
            })
        }
    };
    let mut lines = text.lines();
    chk(
        lines.next() == Some("stretchtime-checkpoint-v1"),
        "bad magic line",
    )?;
    chk(lines.next() == Some("[config]"), "missing [config] block")?;

    let mut config_map = HashMap::new();
    let mut pending: Option<&str> = None;
    for line in lines.by_ref() {
        if line.starts_with("[param ") {
            pending = Some(line);
            break;
        }
        if let Some((k, v)) = line.split_once('=') {
            config_map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let config = config_from_map(&config_map, &pstr)?;
    config.validate()?;

    let mut params = ParamSet::default();
    let mut header = pending.map(|s| s.to_string());
    while let Some(h) = header.take() {
        let body = h
            .strip_prefix("[param ")
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| ModelError::Checkpoint {
                path: pstr.clone(),
                detail: format!("bad param header: {h}"),
            })?;
        let mut parts = body.split_whitespace();
        let name = parts.next().unwrap_or_default().to_string();
        chk(!name.is_empty(), "param header missing name")?;
        let shape: Vec<usize> = parts
            .map(|d| d.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| ModelError::Checkpoint {
                path: pstr.clone(),
                detail: format!("bad dims in header for {name}"),
            })?;
        let value_line = lines.next().ok_or_else(|| ModelError::Checkpoint {
            path: pstr.clone(),
            detail: format!("missing values for {name}"),
        })?;
        let values: Vec<f64> = value_line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| ModelError::Checkpoint {
                path: pstr.clone(),
                detail: format!("bad values for {name}"),
            })?;
        chk(
            values.len() == shape.iter().product::<usize>(),
            &format!("value count mismatch for {name}"),
        )?;
        params.push(name, shape, values);
        header = lines.next().map(|s| s.to_string());
        if let Some(hl) = &header {
            chk(hl.starts_with("[param "), "unexpected line between params")?;
        }
    }

    let model = StretchTimeModel { config, params };
    chk(
        model.params.total_scalars() == count_params(&config)?,
        "parameter count does not match config",
    )?;
    Ok(model)
}

#[cfg(test)]
mod tests;
