//! Command implementations behind the binary: dataset generation, training,
//! evaluation, the verification suite, and the sype-vs-rope comparison.
//!
//! Every command is a pure function of (config file, seed, input files);
//! reruns produce byte-identical outputs. Artifacts are CSV plus plain-text
//! resolved-config sidecars.

use crate::attention::{PeKind, WarpMode};
use crate::config::{ConfigError, DataSource, ExperimentConfig};
use crate::data::{self, DataError, Segment, SeriesDataset, WindowSpec};
use crate::model::{self, ModelError, StretchTimeModel};
use crate::train::{self, TrainError};
use crate::verify;
use crate::Tape;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("verification failed: {failed} of {total} checks")]
    VerificationFailed { failed: usize, total: usize },
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 0 success, 1 usage/config error, 2 verification failure,
    /// 3 training divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::VerificationFailed { .. } => 2,
            CliError::Train(TrainError::Diverged { .. }) => 3,
            CliError::Train(TrainError::NonFiniteGrad(_)) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Generate the synthetic dataset: CSV, a resolved-config sidecar, and the
/// warp grid tau(t) alongside for feasibility inspection.
pub fn cmd_generate(config_path: &Path, out_path: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    if cfg.data != DataSource::Synthetic {
        return Err(CliError::Usage(
            "generate requires data = \"synthetic\"".into(),
        ));
    }
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    let dataset = data::generate_warped_seasonal(&cfg.synth)?;
    data::write_csv(&dataset, out_path)?;

    let sidecar = sibling(out_path, "config");
    cfg.write_resolved(&sidecar)?;

    let tau = data::warp_grid(
        cfg.synth.length,
        cfg.synth.warp_amplitude,
        cfg.synth.warp_period,
    )?;
    let tau_path = sibling(out_path, "tau");
    let mut f = std::fs::File::create(&tau_path).map_err(io_err(&tau_path))?;
    writeln!(f, "t,tau").map_err(io_err(&tau_path))?;
    for (t, v) in tau.iter().enumerate() {
        writeln!(f, "{t},{v}").map_err(io_err(&tau_path))?;
    }
    Ok(())
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Load or synthesize the experiment's dataset, split and standardized.
pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<SeriesDataset, CliError> {
    let raw = match &cfg.data {
        DataSource::Synthetic => data::generate_warped_seasonal(&cfg.synth)?,
        DataSource::Csv(path) => data::load_csv(path)?,
    };
    let max_horizon = cfg.horizons.iter().copied().max().unwrap_or(1);
    let min_rows = cfg.lookback + max_horizon;
    Ok(data::split(
        &raw,
        (cfg.train_ratio, cfg.val_ratio, cfg.test_ratio),
        min_rows,
    )?)
}

/// Train per horizon; writes checkpoints, history CSVs, test metrics and
/// the resolved config into the output directory.
pub fn cmd_train(config_path: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    ensure_dir(&cfg.out_dir)?;
    cfg.write_resolved(&cfg.out_dir.join("config.resolved"))?;
    let dataset = prepare_dataset(&cfg)?;

    let metrics_path = cfg.out_dir.join("metrics.csv");
    let mut metrics = std::fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    writeln!(metrics, "horizon,mse,mae").map_err(io_err(&metrics_path))?;

    for &horizon in &cfg.horizons {
        let model_cfg = cfg.model_config(horizon, dataset.channels());
        let mut model = StretchTimeModel::init(model_cfg, cfg.train.seed)?;
        let spec = WindowSpec::new(cfg.lookback, horizon);
        let mut tc = cfg.train.clone();
        tc.progress = true;
        let outcome = train::train_loop(&mut model, &dataset, &spec, &tc)?;
        train::write_history_csv(
            &outcome.history,
            &cfg.out_dir.join(format!("history_h{horizon}.csv")),
        )?;
        model::save_checkpoint(
            &outcome.best,
            &cfg.out_dir.join(format!("checkpoint_h{horizon}.txt")),
        )?;
        let eval_spec = spec.with_stride(cfg.train.eval_stride);
        let (mse, mae) = train::evaluate_split_threaded(
            &outcome.best,
            &dataset,
            Segment::Test,
            &eval_spec,
            cfg.train.threads,
        )?;
        writeln!(metrics, "{horizon},{mse},{mae}").map_err(io_err(&metrics_path))?;
        println!(
            "trained horizon {horizon}: best epoch {} val_mse {:.6} test_mse {:.6}",
            outcome.best_epoch, outcome.best_val_mse, mse
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

impl EvalSplit {
    fn segment(self) -> Segment {
        match self {
            EvalSplit::Train => Segment::Train,
            EvalSplit::Val => Segment::Val,
            EvalSplit::Test => Segment::Test,
        }
    }
}

pub struct EvaluateArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub config: &'a Path,
    pub out_dir: &'a Path,
    pub split: EvalSplit,
    pub dump_forecasts: Option<usize>,
    pub persistence: bool,
}

/// Evaluate a checkpoint (or the persistence baseline) on one split;
/// metrics in standardized space, optional per-window forecast dump.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(args.config)?;
    ensure_dir(args.out_dir)?;
    cfg.write_resolved(&args.out_dir.join("config.resolved"))?;
    let dataset = prepare_dataset(&cfg)?;
    let segment = args.split.segment();

    let metrics_path = args.out_dir.join("metrics.csv");
    let mut metrics = std::fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    writeln!(metrics, "horizon,mse,mae").map_err(io_err(&metrics_path))?;

    if args.persistence {
        let horizon = cfg.horizons.first().copied().unwrap_or(1);
        let spec = WindowSpec::new(cfg.lookback, horizon).with_stride(cfg.train.eval_stride);
        let (mse, mae) = train::persistence_metrics(&dataset, segment, &spec)?;
        writeln!(metrics, "{horizon},{mse},{mae}").map_err(io_err(&metrics_path))?;
        return Ok(());
    }

    let ckpt = args.checkpoint.ok_or_else(|| {
        CliError::Usage("evaluate requires --checkpoint unless --persistence is set".into())
    })?;
    let model = model::load_checkpoint(ckpt)?;
    let mc = model.config;
    if mc.lookback != cfg.lookback {
        return Err(CliError::Usage(format!(
            "checkpoint lookback {} does not match config lookback {}",
            mc.lookback, cfg.lookback
        )));
    }
    if mc.channels != dataset.channels() {
        return Err(CliError::Usage(format!(
            "checkpoint channels {} do not match dataset channels {}",
            mc.channels,
            dataset.channels()
        )));
    }
    let spec = WindowSpec::new(mc.lookback, mc.horizon).with_stride(cfg.train.eval_stride);
    let (mse, mae) =
        train::evaluate_split_threaded(&model, &dataset, segment, &spec, cfg.train.threads)?;
    writeln!(metrics, "{},{mse},{mae}", mc.horizon).map_err(io_err(&metrics_path))?;

    if let Some(k) = args.dump_forecasts {
        dump_forecasts(&model, &dataset, segment, &spec, k, args.out_dir)?;
    }
    Ok(())
}

/// Write k windows as rows window,channel,t,truth,pred. For t < lookback
/// the prediction column repeats the observed context, so each (window,
/// channel) series plots as a contiguous L+T curve.
fn dump_forecasts(
    model: &StretchTimeModel,
    dataset: &SeriesDataset,
    segment: Segment,
    spec: &WindowSpec,
    k: usize,
    out_dir: &Path,
) -> Result<(), CliError> {
    let windows = data::windows(dataset, segment, spec)?;
    let n = windows.len();
    let k = k.min(n);
    let path = out_dir.join("forecasts.csv");
    let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
    writeln!(f, "window,channel,t,truth,pred").map_err(io_err(&path))?;
    let c = dataset.channels();
    for i in 0..k {
        // Evenly spaced sample of the available windows.
        let ix = if k == 1 { 0 } else { i * (n - 1) / (k - 1) };
        let w = &windows[ix];
        let mut tape = Tape::no_grad();
        let binds = model.bind(&mut tape, false);
        let pred = model.forward(&mut tape, &binds, &w.x, None)?;
        let pv = tape.values(pred);
        for ch in 0..c {
            for t in 0..spec.lookback {
                let truth = w.x[t * c + ch];
                writeln!(f, "{ix},{ch},{t},{truth},{truth}").map_err(io_err(&path))?;
            }
            for t in 0..spec.horizon {
                let truth = w.y[t * c + ch];
                let p = pv[t * c + ch];
                writeln!(f, "{ix},{ch},{},{truth},{p}", spec.lookback + t)
                    .map_err(io_err(&path))?;
            }
        }
    }
    Ok(())
}

/// Run the verification suite, write the report CSV, and fail (exit 2)
/// if any row fails.
pub fn cmd_verify(seed: u64, report_path: &Path) -> Result<(), CliError> {
    if let Some(parent) = report_path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    let rows = verify::run_all(seed);
    verify::write_report(&rows, report_path).map_err(io_err(report_path))?;
    for r in &rows {
        println!(
            "{:40} samples={:7} max_error={:10.3e} threshold={:9.1e} {}",
            r.check,
            r.samples,
            r.max_error,
            r.threshold,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(CliError::VerificationFailed {
            failed,
            total: rows.len(),
        });
    }
    Ok(())
}

/// One training run inside a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRun {
    pub pe: PeKind,
    pub warp: WarpMode,
    pub use_mlp: bool,
    pub horizon: usize,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CompareOutcome {
    pub runs: Vec<CompareRun>,
}

impl CompareOutcome {
    pub fn mean_mse(&self, pe: PeKind, horizon: usize) -> f64 {
        let xs: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.pe == pe && r.horizon == horizon)
            .map(|r| r.mse)
            .collect();
        xs.iter().sum::<f64>() / xs.len().max(1) as f64
    }

    /// Relative improvement of sype over rope for one (horizon, seed).
    pub fn relative_gap(&self, horizon: usize, seed: u64) -> Option<f64> {
        let get = |pe: PeKind| {
            self.runs
                .iter()
                .find(|r| r.pe == pe && r.horizon == horizon && r.seed == seed)
                .map(|r| r.mse)
        };
        let (s, r) = (get(PeKind::Sype)?, get(PeKind::Rope)?);
        Some((r - s) / r)
    }
}

/// Train the sype model and the rotary baseline on the same data for every
/// (horizon, seed) pair and emit side-by-side metrics. The sype variant
/// follows the config's warp_mode and use_mlp; the rotary baseline always
/// runs the static clock.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<CompareOutcome, CliError> {
    let dataset = prepare_dataset(cfg)?;
    let mut outcome = CompareOutcome::default();
    for &horizon in &cfg.horizons {
        for &seed in &cfg.compare_seeds {
            for pe in [PeKind::Sype, PeKind::Rope] {
                let mut model_cfg = cfg.model_config(horizon, dataset.channels());
                model_cfg.pe_kind = pe;
                model_cfg.warp_mode = match pe {
                    PeKind::Sype => cfg.warp_mode,
                    _ => WarpMode::Identity,
                };
                let mut model = StretchTimeModel::init(model_cfg, seed)?;
                let mut tc = cfg.train.clone();
                tc.seed = seed;
                tc.progress = true;
                let spec = WindowSpec::new(cfg.lookback, horizon);
                let run = train::train_loop(&mut model, &dataset, &spec, &tc)?;
                let eval_spec = spec.with_stride(cfg.train.eval_stride);
                let (mse, mae) = train::evaluate_split_threaded(
                    &run.best,
                    &dataset,
                    Segment::Test,
                    &eval_spec,
                    cfg.train.threads,
                )?;
                println!(
                    "compare: pe={} horizon={horizon} seed={seed} test_mse={mse:.6} test_mae={mae:.6}",
                    match pe {
                        PeKind::Sype => "sype",
                        PeKind::Rope => "rope",
                        PeKind::None => "none",
                    }
                );
                outcome.runs.push(CompareRun {
                    pe,
                    warp: model_cfg.warp_mode,
                    use_mlp: model_cfg.use_mlp,
                    horizon,
                    seed,
                    mse,
                    mae,
                });
            }
        }
    }
    Ok(outcome)
}

/// `compare` command: run and write compare.csv plus per-(horizon, seed)
/// relative gaps and per-horizon means in summary.csv.
pub fn cmd_compare(config_path: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    ensure_dir(&cfg.out_dir)?;
    cfg.write_resolved(&cfg.out_dir.join("config.resolved"))?;
    let outcome = run_compare(&cfg)?;

    let runs_path = cfg.out_dir.join("compare.csv");
    let mut f = std::fs::File::create(&runs_path).map_err(io_err(&runs_path))?;
    writeln!(
        f,
        "variant,pe_mode,warp_mode,use_mlp,horizon,seed,test_mse,test_mae"
    )
    .map_err(io_err(&runs_path))?;
    for r in &outcome.runs {
        let pe = match r.pe {
            PeKind::Sype => "sype",
            PeKind::Rope => "rope",
            PeKind::None => "none",
        };
        let warp = match r.warp {
            WarpMode::Adaptive => "adaptive",
            WarpMode::Identity => "identity",
        };
        writeln!(
            f,
            "{pe}_{warp},{pe},{warp},{},{},{},{},{}",
            r.use_mlp, r.horizon, r.seed, r.mse, r.mae
        )
        .map_err(io_err(&runs_path))?;
    }

    let summary_path = cfg.out_dir.join("summary.csv");
    let mut s = std::fs::File::create(&summary_path).map_err(io_err(&summary_path))?;
    writeln!(s, "horizon,seed,mse_sype,mse_rope,rel_gap").map_err(io_err(&summary_path))?;
    for &h in &cfg.horizons {
        for &seed in &cfg.compare_seeds {
            let sype = outcome
                .runs
                .iter()
                .find(|r| r.pe == PeKind::Sype && r.horizon == h && r.seed == seed);
            let rope = outcome
                .runs
                .iter()
                .find(|r| r.pe == PeKind::Rope && r.horizon == h && r.seed == seed);
            if let (Some(a), Some(b)) = (sype, rope) {
                let gap = (b.mse - a.mse) / b.mse;
                writeln!(s, "{h},{seed},{},{},{gap}", a.mse, b.mse)
                    .map_err(io_err(&summary_path))?;
            }
        }
        writeln!(
            s,
            "{h},mean,{},{},{}",
            outcome.mean_mse(PeKind::Sype, h),
            outcome.mean_mse(PeKind::Rope, h),
            (outcome.mean_mse(PeKind::Rope, h) - outcome.mean_mse(PeKind::Sype, h))
                / outcome.mean_mse(PeKind::Rope, h)
        )
        .map_err(io_err(&summary_path))?;
    }
    Ok(())
}
