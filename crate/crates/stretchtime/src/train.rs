//! Optimization loop: MSE objective, AdamW with decoupled weight decay,
//! cosine-annealed learning rate, gradient accumulation, early stopping.
//!
//! Every training sample runs on its own tape and its gradient contribution
//! is scaled by 1/effective_batch before being added into a shared
//! accumulator, in a fixed sample order. Splitting the same order into
//! micro-batches therefore changes nothing: (physical b, accumulation k)
//! and (physical b*k, accumulation 1) produce bit-identical steps.

use crate::data::{self, DataError, Segment, SeriesDataset, WindowSpec};
use crate::model::{ModelError, SampleMasks, StretchTimeModel};
use crate::numcore::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("train split yields {windows} windows, fewer than one effective batch of {batch}")]
    TooFewWindows { windows: usize, batch: usize },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGrad(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub effective_batch: usize,
    pub physical_batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Cosine floor; lr/100 when unset via `default_for_lr`.
    pub lr_floor: f64,
    /// Training window stride (desk-scale subsampling lever).
    pub train_stride: usize,
    /// Validation/test window stride.
    pub eval_stride: usize,
    /// Worker threads for per-sample gradients and evaluation. Gradients
    /// are reduced in a fixed sample order, so any thread count produces
    /// bit-identical results; 1 (the default) runs fully serial.
    pub threads: usize,
    /// Print one line per epoch to stderr.
    pub progress: bool,
}

impl TrainConfig {
    pub fn default_for_lr(lr: f64) -> Self {
        TrainConfig {
            learning_rate: lr,
            effective_batch: 32,
            physical_batch: 32,
            max_epochs: 10,
            patience: 12,
            seed: 2026,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr_floor: lr / 100.0,
            train_stride: 1,
            eval_stride: 1,
            threads: 1,
            progress: false,
        }
    }

    pub fn accumulation(&self) -> usize {
        self.effective_batch / self.physical_batch.max(1)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.effective_batch == 0 || self.physical_batch == 0 {
            return Err(TrainError::InvalidConfig("batch sizes must be >= 1".into()));
        }
        if self.effective_batch % self.physical_batch != 0 {
            return Err(TrainError::InvalidConfig(format!(
                "physical_batch {} must divide effective_batch {}",
                self.physical_batch, self.effective_batch
            )));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::InvalidConfig("max_epochs must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Mean squared elementwise error.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64, TrainError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(TrainError::InvalidConfig(format!(
            "mse: lengths {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// Mean absolute elementwise error.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, TrainError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(TrainError::InvalidConfig(format!(
            "mae: lengths {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Per-parameter AdamW moments.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(model: &StretchTimeModel) -> Self {
        let m = model
            .params
            .iter()
            .map(|p| vec![0.0; p.values.len()])
            .collect::<Vec<_>>();
        OptimizerState {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update with bias correction and decoupled multiplicative
/// weight decay: theta <- theta - lr*m_hat/(sqrt(v_hat)+eps) - lr*wd*theta.
pub fn adamw_step(
    model: &mut StretchTimeModel,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    tc: &TrainConfig,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - tc.beta1.powi(t);
    let bc2 = 1.0 - tc.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGrad(model.params.at(i).name.clone()));
        }
        let p = model.params.at_mut(i);
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..p.values.len() {
            m[j] = tc.beta1 * m[j] + (1.0 - tc.beta1) * g[j];
            v[j] = tc.beta2 * v[j] + (1.0 - tc.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p.values[j] -= lr * m_hat / (v_hat.sqrt() + tc.epsilon);
            p.values[j] -= lr * tc.weight_decay * p.values[j];
        }
    }
    Ok(())
}

/// lr_floor + 0.5 (lr_max - lr_floor)(1 + cos(pi * step/total)); steps past
/// `total` clamp to the floor.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_floor: f64) -> f64 {
    if total == 0 || step >= total {
        return lr_floor;
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    lr_floor + 0.5 * (lr_max - lr_floor) * (1.0 + phase.cos())
}

/// One epoch row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the epoch with minimum validation MSE.
    pub best: StretchTimeModel,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub history: Vec<HistoryRow>,
}

/// Map `jobs` across `threads` workers, returning results in job order.
/// Equivalent to a serial map: jobs are independent and the reduction that
/// follows consumes results in the original order.
fn ordered_parallel_map<J, R, F>(jobs: &[J], threads: usize, f: F) -> Vec<R>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> R + Sync,
{
    if threads <= 1 || jobs.len() <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<R>> = Vec::with_capacity(jobs.len());
    slots.resize_with(jobs.len(), || None);
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for _ in 0..threads.min(jobs.len()) {
            handles.push(scope.spawn(|| {
                let mut mine: Vec<(usize, R)> = Vec::new();
                loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    mine.push((i, f(&jobs[i])));
                }
                mine
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("worker thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every job completes"))
        .collect()
}

/// Mean per-window MSE/MAE of the current parameters on a segment.
pub fn evaluate_split(
    model: &StretchTimeModel,
    dataset: &SeriesDataset,
    segment: Segment,
    spec: &WindowSpec,
) -> Result<(f64, f64), TrainError> {
    evaluate_split_threaded(model, dataset, segment, spec, 1)
}

/// As [`evaluate_split`], with per-window forwards spread over workers;
/// metric sums are reduced in window order, so results are identical for
/// any thread count.
pub fn evaluate_split_threaded(
    model: &StretchTimeModel,
    dataset: &SeriesDataset,
    segment: Segment,
    spec: &WindowSpec,
    threads: usize,
) -> Result<(f64, f64), TrainError> {
    let windows = data::windows(dataset, segment, spec)?;
    let per_window =
        ordered_parallel_map(&windows, threads, |w| -> Result<(f64, f64), TrainError> {
            let mut tape = Tape::no_grad();
            let binds = model.bind(&mut tape, false);
            let pred = model.forward(&mut tape, &binds, &w.x, None)?;
            Ok((mse(tape.values(pred), &w.y)?, mae(tape.values(pred), &w.y)?))
        });
    let mut mse_acc = 0.0;
    let mut mae_acc = 0.0;
    for r in per_window {
        let (m, a) = r?;
        mse_acc += m;
        mae_acc += a;
    }
    let n = windows.len() as f64;
    Ok((mse_acc / n, mae_acc / n))
}

/// Metrics of the trivial last-value forecaster on a segment.
pub fn persistence_metrics(
    dataset: &SeriesDataset,
    segment: Segment,
    spec: &WindowSpec,
) -> Result<(f64, f64), TrainError> {
    let windows = data::windows(dataset, segment, spec)?;
    let c = dataset.channels();
    let mut mse_acc = 0.0;
    let mut mae_acc = 0.0;
    for w in &windows {
        let last = &w.x[(spec.lookback - 1) * c..];
        let pred: Vec<f64> = (0..spec.horizon)
            .flat_map(|_| last.iter().copied())
            .collect();
        mse_acc += mse(&pred, &w.y)?;
        mae_acc += mae(&pred, &w.y)?;
    }
    let n = windows.len() as f64;
    Ok((mse_acc / n, mae_acc / n))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Train until early stopping or max_epochs, returning the best-validation
/// checkpoint and the per-epoch history. Fully deterministic given (seed,
/// configs, data).
pub fn train_loop(
    model: &mut StretchTimeModel,
    dataset: &SeriesDataset,
    spec: &WindowSpec,
    tc: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    tc.validate()?;
    let train_spec = WindowSpec {
        stride: tc.train_stride.max(1),
        ..*spec
    };
    let eval_spec = WindowSpec {
        stride: tc.eval_stride.max(1),
        ..*spec
    };
    let train_windows = data::windows(dataset, Segment::Train, &train_spec)?;
    if train_windows.len() < tc.effective_batch {
        return Err(TrainError::TooFewWindows {
            windows: train_windows.len(),
            batch: tc.effective_batch,
        });
    }
    let steps_per_epoch = train_windows.len() / tc.effective_batch;
    let schedule_total = tc.max_epochs * steps_per_epoch;
    let stochastic = model.config.dropout_rate > 0.0 || model.config.channel_dropout_min_keep < 1.0;

    let mut state = OptimizerState::new(model);
    let mut grads: Vec<Vec<f64>> = model
        .params
        .iter()
        .map(|p| vec![0.0; p.values.len()])
        .collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, StretchTimeModel)> = None;
    let mut epochs_since_improvement = 0usize;
    let mut global_step = 0usize;
    let mut last_lr = tc.learning_rate;
    let inv_effective = 1.0 / tc.effective_batch as f64;

    for epoch in 1..=tc.max_epochs {
        let mut rng = epoch_rng(tc.seed, epoch);
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for step in 0..steps_per_epoch {
            // Masks are drawn on the coordinating thread in slot order, so
            // the RNG stream does not depend on the worker count.
            let jobs: Vec<(&data::Window, Option<SampleMasks>)> = (0..tc.effective_batch)
                .map(|slot| {
                    let w = &train_windows[order[step * tc.effective_batch + slot]];
                    let masks = stochastic.then(|| SampleMasks::sample(&model.config, &mut rng));
                    (w, masks)
                })
                .collect();
            let frozen: &StretchTimeModel = model;
            type SampleResult = Result<(f64, Vec<Option<Vec<f64>>>), TrainError>;
            let results = ordered_parallel_map(&jobs, tc.threads, |(w, masks)| -> SampleResult {
                let mut tape = Tape::new();
                let binds = frozen.bind(&mut tape, true);
                let pred = frozen.forward(&mut tape, &binds, &w.x, masks.as_ref())?;
                let loss = frozen.mse_loss(&mut tape, pred, &w.y)?;
                let loss_value = tape.scalar_value(loss);
                let scaled = tape.scalar_mul(loss, inv_effective);
                tape.backward(scaled).map_err(ModelError::from)?;
                let g = (0..frozen.params.len())
                    .map(|i| tape.grad(binds.id(i)).map(|g| g.to_vec()))
                    .collect();
                Ok((loss_value, g))
            });
            for r in results {
                let (loss_value, sample_grads) = r?;
                if !loss_value.is_finite() {
                    return Err(TrainError::Diverged { epoch, step });
                }
                loss_sum += loss_value;
                loss_count += 1;
                for (acc, g) in grads.iter_mut().zip(&sample_grads) {
                    if let Some(g) = g {
                        for (a, gi) in acc.iter_mut().zip(g) {
                            *a += gi;
                        }
                    }
                }
            }
            let lr = cosine_lr(global_step, schedule_total, tc.learning_rate, tc.lr_floor);
            last_lr = lr;
            adamw_step(model, &grads, &mut state, lr, tc)?;
            global_step += 1;
            for g in &mut grads {
                g.fill(0.0);
            }
        }

        let (val_mse, val_mae) =
            evaluate_split_threaded(model, dataset, Segment::Val, &eval_spec, tc.threads)?;
        if tc.progress {
            eprintln!(
                "epoch {epoch}/{}: train_loss {:.6} val_mse {val_mse:.6} lr {last_lr:.3e}",
                tc.max_epochs,
                loss_sum / loss_count.max(1) as f64
            );
        }
        history.push(HistoryRow {
            epoch,
            train_loss: loss_sum / loss_count.max(1) as f64,
            val_mse,
            val_mae,
            lr: last_lr,
        });

        let improved = best.as_ref().map(|(_, m, _)| val_mse < *m).unwrap_or(true);
        if improved {
            best = Some((epoch, val_mse, model.clone()));
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
            if epochs_since_improvement >= tc.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_mse, best_model) =
        best.expect("at least one epoch ran, so a best checkpoint exists");
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        best_val_mse,
        history,
    })
}

/// History CSV with the columns epoch,train_loss,val_mse,val_mae,lr.
pub fn write_history_csv(history: &[HistoryRow], path: &Path) -> Result<(), TrainError> {
    let pstr = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|source| TrainError::Io {
        path: pstr.clone(),
        source,
    })?;
    let io_err = |source: std::io::Error| TrainError::Io {
        path: pstr.clone(),
        source,
    };
    writeln!(f, "epoch,train_loss,val_mse,val_mae,lr").map_err(io_err)?;
    for r in history {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_mse, r.val_mae, r.lr
        )
        .map_err(io_err)?;
    }
    Ok(())
}
