//! End-to-end tests of the command-line interface: byte-level determinism
//! of artifacts, resolved-config round trips, the verification report, and
//! checkpoint/metrics bookkeeping.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stretchtime"))
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("stretchtime_cli_{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL_EXPERIMENT: &str = r#"
length = 700
channels = 2
lookback = 24
horizons = [12]
d_model = 16
n_heads = 2
max_epochs = 2
effective_batch = 8
physical_batch = 8
train_stride = 8
eval_stride = 8
dropout = 0.1
"#;

#[test]
fn generate_is_byte_deterministic_and_logs_the_warp_grid() {
    let dir = fresh_dir("generate");
    let cfg = write_config(
        &dir,
        "cfg.txt",
        "length = 400\nchannels = 2\nwarp_amplitude = 0.5\n",
    );
    let out1 = dir.join("a.csv");
    let out2 = dir.join("b.csv");
    for out in [&out1, &out2] {
        let status = bin()
            .args(["generate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(&out1).unwrap();
    let b = std::fs::read(&out2).unwrap();
    assert_eq!(a, b, "same seed twice must produce byte-identical files");

    // Sidecars exist; the logged tau grid is infeasible for rotary encoding
    // at this warp amplitude, and feasible when the warp is turned off.
    assert!(dir.join("a.csv.config").exists());
    let tau_text = std::fs::read_to_string(dir.join("a.csv.tau")).unwrap();
    let tau: Vec<f64> = tau_text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(tau.len(), 400);
    use stretchtime::sype::{rope_feasibility_check, Feasibility};
    assert!(matches!(
        rope_feasibility_check(&tau, 0.25).unwrap(),
        Feasibility::Infeasible { .. }
    ));

    let cfg_affine = write_config(
        &dir,
        "cfg_affine.txt",
        "length = 400\nchannels = 2\nwarp_amplitude = 0.0\n",
    );
    let out3 = dir.join("affine.csv");
    assert!(bin()
        .args(["generate", "--config"])
        .arg(&cfg_affine)
        .arg("--out")
        .arg(&out3)
        .status()
        .unwrap()
        .success());
    let tau_text = std::fs::read_to_string(dir.join("affine.csv.tau")).unwrap();
    let tau: Vec<f64> = tau_text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    match rope_feasibility_check(&tau, 0.25).unwrap() {
        Feasibility::Feasible { theta } => assert!((theta - 0.25).abs() < 1e-12),
        other => panic!("expected feasible, got {other:?}"),
    }
}

#[test]
fn train_rerun_and_resolved_sidecar_reproduce_metrics() {
    let dir = fresh_dir("train");
    let out_a = dir.join("run_a");
    let out_b = dir.join("run_b");
    let out_c = dir.join("run_c");
    let cfg_a = write_config(
        &dir,
        "a.txt",
        &format!(
            "{SMALL_EXPERIMENT}\nout_dir = {:?}\n",
            out_a.display().to_string()
        ),
    );
    let cfg_b = write_config(
        &dir,
        "b.txt",
        &format!(
            "{SMALL_EXPERIMENT}\nout_dir = {:?}\n",
            out_b.display().to_string()
        ),
    );
    for cfg in [&cfg_a, &cfg_b] {
        assert!(bin()
            .args(["train", "--config"])
            .arg(cfg)
            .status()
            .unwrap()
            .success());
    }
    let metrics_a = std::fs::read(out_a.join("metrics.csv")).unwrap();
    let metrics_b = std::fs::read(out_b.join("metrics.csv")).unwrap();
    assert_eq!(metrics_a, metrics_b, "same config, same metrics bytes");
    let hist_a = std::fs::read(out_a.join("history_h12.csv")).unwrap();
    let hist_b = std::fs::read(out_b.join("history_h12.csv")).unwrap();
    assert_eq!(hist_a, hist_b);

    // Re-running with the resolved sidecar reproduces the run (redirected
    // to a fresh out_dir to avoid overwriting what we compare against).
    let sidecar = std::fs::read_to_string(out_a.join("config.resolved")).unwrap();
    let redirected = sidecar.replace(
        &format!("{:?}", out_a.display().to_string()),
        &format!("{:?}", out_c.display().to_string()),
    );
    assert_ne!(sidecar, redirected, "out_dir must have been rewritten");
    let cfg_c = write_config(&dir, "c.txt", &redirected);
    assert!(bin()
        .args(["train", "--config"])
        .arg(&cfg_c)
        .status()
        .unwrap()
        .success());
    let metrics_c = std::fs::read(out_c.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics_a, metrics_c,
        "sidecar round-trip reproduces the run"
    );
}

#[test]
fn evaluate_reproduces_recorded_validation_and_counts_dump_rows() {
    let dir = fresh_dir("evaluate");
    let run_dir = dir.join("run");
    let cfg = write_config(
        &dir,
        "cfg.txt",
        &format!(
            "{SMALL_EXPERIMENT}\nout_dir = {:?}\n",
            run_dir.display().to_string()
        ),
    );
    assert!(bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .status()
        .unwrap()
        .success());

    // The best checkpoint evaluated on the validation split reproduces the
    // best recorded history row exactly.
    let eval_dir = dir.join("eval_val");
    assert!(bin()
        .args(["evaluate", "--split", "val", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(run_dir.join("checkpoint_h12.txt"))
        .arg("--out")
        .arg(&eval_dir)
        .status()
        .unwrap()
        .success());
    let metrics = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    let val_mse: f64 = metrics
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    let history = std::fs::read_to_string(run_dir.join("history_h12.csv")).unwrap();
    let best_recorded: f64 = history
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(
        val_mse.to_bits(),
        best_recorded.to_bits(),
        "bookkeeping: checkpoint val MSE equals the recorded best history row"
    );

    // Forecast dump: k * (L + T) * C data rows.
    let dump_dir = dir.join("eval_dump");
    assert!(bin()
        .args(["evaluate", "--dump-forecasts", "3", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(run_dir.join("checkpoint_h12.txt"))
        .arg("--out")
        .arg(&dump_dir)
        .status()
        .unwrap()
        .success());
    let dump = std::fs::read_to_string(dump_dir.join("forecasts.csv")).unwrap();
    let rows = dump.lines().count() - 1;
    assert_eq!(rows, 3 * (24 + 12) * 2);

    // Persistence baseline needs no checkpoint.
    let pers_dir = dir.join("eval_pers");
    assert!(bin()
        .args(["evaluate", "--persistence", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&pers_dir)
        .status()
        .unwrap()
        .success());
    assert!(pers_dir.join("metrics.csv").exists());
}

#[test]
fn verify_command_writes_an_all_pass_report() {
    let dir = fresh_dir("verify");
    let report = dir.join("report.csv");
    let status = bin()
        .args(["verify", "--seed", "2026", "--report"])
        .arg(&report)
        .status()
        .unwrap();
    assert!(status.success(), "verify must exit 0 when all checks pass");
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("check,samples,max_error,threshold,pass\n"));
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert!(
        rows.len() >= 20,
        "expected a full report, got {}",
        rows.len()
    );
    for row in rows {
        assert!(
            row.ends_with(",true"),
            "failing row in verify report: {row}"
        );
    }
    assert!(text.contains("symplectic_conservation"));
    assert!(text.contains("theorem1_oracle"));
    assert!(text.contains("relative_score_sign_minus_cos"));
}

#[test]
fn pe_mode_is_the_only_difference_between_paired_runs() {
    // Two experiment files that differ only in the positional mechanism
    // (same explicit warp mode) produce resolved configs that differ in
    // exactly the pe_mode line, apart from their output directories.
    let dir = fresh_dir("pairing");
    let base = "length = 500\nchannels = 2\nlookback = 24\nhorizons = [12]\nd_model = 16\nn_heads = 2\nmax_epochs = 1\neffective_batch = 8\nphysical_batch = 8\ntrain_stride = 16\neval_stride = 8\nwarp_mode = \"identity\"\n";
    let out_s = dir.join("sype");
    let out_r = dir.join("rope");
    let cfg_s = write_config(
        &dir,
        "sype.txt",
        &format!(
            "{base}pe_mode = \"sype\"\nout_dir = {:?}\n",
            out_s.display().to_string()
        ),
    );
    let cfg_r = write_config(
        &dir,
        "rope.txt",
        &format!(
            "{base}pe_mode = \"rope\"\nout_dir = {:?}\n",
            out_r.display().to_string()
        ),
    );
    for cfg in [&cfg_s, &cfg_r] {
        assert!(bin()
            .args(["train", "--config"])
            .arg(cfg)
            .status()
            .unwrap()
            .success());
    }
    let resolved_s = std::fs::read_to_string(out_s.join("config.resolved")).unwrap();
    let resolved_r = std::fs::read_to_string(out_r.join("config.resolved")).unwrap();
    let differing: Vec<(&str, &str)> = resolved_s
        .lines()
        .zip(resolved_r.lines())
        .filter(|(a, b)| a != b)
        .filter(|(a, _)| !a.starts_with("out_dir"))
        .collect();
    assert_eq!(
        differing,
        vec![("pe_mode = \"sype\"", "pe_mode = \"rope\"")],
        "resolved configs must differ in exactly the positional mechanism"
    );
}

#[test]
fn usage_errors_exit_with_code_one() {
    let dir = fresh_dir("usage");
    let cfg = write_config(&dir, "bad.txt", "no_such_key = 1\n");
    let status = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));

    let missing = bin()
        .args(["train", "--config"])
        .arg(dir.join("missing.txt"))
        .status()
        .unwrap();
    assert_eq!(missing.code(), Some(1));
}
