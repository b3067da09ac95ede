//! Command-level integration tests: exit codes, usage errors, artifact
//! presence and idempotence on a miniature configuration.

use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};
use wc4dvar_lab::config::default_config_text;
use wc4dvar_lab::run;

/// The pipeline commands mutate a shared output directory; serialize them.
fn guard() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    match LOCK.get_or_init(|| Mutex::new(())).lock() {
        Ok(g) => g,
        Err(poisoned) => poisoned.into_inner(),
    }
}

fn mini_config(seed: u64, out: &str) -> String {
    let mut text = default_config_text(seed, out);
    for (from, to) in [
        ("count = 4800", "count = 320"),
        ("train_count = 4400", "train_count = 260"),
        ("epochs = 600", "epochs = 25"),
        ("epochs = 50", "epochs = 3"),
        ("curriculum = 2..12", "curriculum = 2,3"),
        ("init_count = 20", "init_count = 2"),
        ("max_lead = 24", "max_lead = 4"),
        ("state_index = 4500", "state_index = 290"),
        ("leads = 0,4,8,12,16,20,24", "leads = 0,2,4"),
        ("hidden = 128,128", "hidden = 24"),
        ("hidden = 64,64", "hidden = 16"),
        ("latent_dim = 12", "latent_dim = 5"),
    ] {
        text = text.replace(from, to);
    }
    text
}

struct MiniLab {
    dir: PathBuf,
    cfg: String,
}

fn mini_lab() -> &'static MiniLab {
    static LAB: OnceLock<MiniLab> = OnceLock::new();
    LAB.get_or_init(|| {
        std::env::set_var("WC4DVAR_LOG", "quiet");
        let dir = std::env::temp_dir().join(format!("wc4dvar_cli_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg_path = dir.join("config.cfg");
        std::fs::write(&cfg_path, mini_config(11, dir.to_str().unwrap())).unwrap();
        let cfg = cfg_path.to_str().unwrap().to_string();
        for args in [
            vec!["gen-truth", "--config", &cfg],
            vec!["gen-reanalysis", "--config", &cfg],
            vec!["train-ae", "--config", &cfg],
            vec!["train-forecast", "--config", &cfg, "--stage", "1"],
        ] {
            let argv: Vec<String> = args.iter().map(|s| s.to_string()).collect();
            assert_eq!(run(&argv), 0, "setup command {args:?} failed");
        }
        MiniLab { dir, cfg }
    })
}

fn run_args(args: &[&str]) -> i32 {
    let argv: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    run(&argv)
}

#[test]
fn usage_errors_exit_2() {
    let _g = guard();
    // No config.
    assert_eq!(run_args(&["gen-truth"]), 2);
    // Unknown command and unknown flag.
    let lab = mini_lab();
    assert_eq!(run_args(&["frobnicate", "--config", &lab.cfg]), 2);
    assert_eq!(run_args(&["gen-truth", "--config", &lab.cfg, "--bogus"]), 2);
    // Missing config file.
    assert_eq!(run_args(&["gen-truth", "--config", "/nonexistent.cfg"]), 2);
}

#[test]
fn zero_count_rejected() {
    let _g = guard();
    let dir = std::env::temp_dir().join(format!("wc4dvar_cli_zc_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let text = mini_config(3, dir.to_str().unwrap()).replace("count = 320", "count = 0");
    let cfg_path = dir.join("config.cfg");
    std::fs::write(&cfg_path, text).unwrap();
    assert_eq!(run_args(&["gen-truth", "--config", cfg_path.to_str().unwrap()]), 2);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn missing_inputs_exit_2() {
    let _g = guard();
    let dir = std::env::temp_dir().join(format!("wc4dvar_cli_mi_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("config.cfg");
    std::fs::write(&cfg_path, mini_config(5, dir.to_str().unwrap())).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    // Reanalysis before truth.
    assert_eq!(run_args(&["gen-reanalysis", "--config", cfg]), 2);
    // Stage 2 before stage 1.
    assert_eq!(
        run_args(&["train-forecast", "--config", cfg, "--stage", "2"]),
        2
    );
    // Stage flag required and validated.
    assert_eq!(run_args(&["train-forecast", "--config", cfg]), 2);
    assert_eq!(
        run_args(&["train-forecast", "--config", cfg, "--stage", "7"]),
        2
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn invalid_covariance_rejected() {
    let _g = guard();
    let lab = mini_lab();
    let dir = std::env::temp_dir().join(format!("wc4dvar_cli_cov_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    // Copy the truth into a fresh directory, then break the sigmas.
    std::fs::copy(lab.dir.join("truth.traj"), dir.join("truth.traj")).unwrap();
    let text: String = mini_config(11, dir.to_str().unwrap())
        .lines()
        .map(|l| if l.starts_with("sigma_slow") { "sigma_slow = 0.0" } else { l })
        .collect::<Vec<_>>()
        .join("\n");
    let cfg_path = dir.join("config.cfg");
    std::fs::write(&cfg_path, text).unwrap();
    assert_eq!(
        run_args(&["gen-reanalysis", "--config", cfg_path.to_str().unwrap()]),
        2
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn latent_loss_requires_ae() {
    let _g = guard();
    let lab = mini_lab();
    let dir = std::env::temp_dir().join(format!("wc4dvar_cli_noae_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    for f in ["truth.traj", "cov.wcov", "reanalysis.traj", "stage1.wcck"] {
        std::fs::copy(lab.dir.join(f), dir.join(f)).unwrap();
    }
    let cfg_path = dir.join("config.cfg");
    std::fs::write(&cfg_path, mini_config(11, dir.to_str().unwrap())).unwrap();
    assert_eq!(
        run_args(&[
            "train-forecast",
            "--config",
            cfg_path.to_str().unwrap(),
            "--stage",
            "2",
            "--loss",
            "latent-nll"
        ]),
        2
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gen_truth_idempotent_and_error_stats_reported() {
    let _g = guard();
    let lab = mini_lab();
    let before = std::fs::read(lab.dir.join("truth.traj")).unwrap();
    assert_eq!(run_args(&["gen-truth", "--config", &lab.cfg]), 0);
    let after = std::fs::read(lab.dir.join("truth.traj")).unwrap();
    assert_eq!(before, after, "gen-truth must be idempotent");

    let stats = std::fs::read_to_string(lab.dir.join("error_stats.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&stats).unwrap();
    assert_eq!(v["index0_delta_zero"], serde_json::Value::Bool(true));
    let stds = v["per_component_error_std"].as_array().unwrap();
    assert_eq!(stds.len(), 40);
    // Slow components match sigma_slow within Monte-Carlo tolerance.
    let sigma_slow = v["sigma_slow"].as_f64().unwrap();
    let mean_slow: f64 =
        stds[..8].iter().map(|s| s.as_f64().unwrap()).sum::<f64>() / 8.0;
    assert!(
        (mean_slow - sigma_slow).abs() / sigma_slow < 0.15,
        "slow error std {mean_slow} vs configured {sigma_slow}"
    );
}

#[test]
fn stage2_losses_share_batch_schedule_and_log_schema() {
    let _g = guard();
    let lab = mini_lab();
    // Two stage-2 runs differing only in the loss flag.
    assert_eq!(
        run_args(&[
            "train-forecast",
            "--config",
            &lab.cfg,
            "--stage",
            "2",
            "--loss",
            "identity"
        ]),
        0
    );
    assert_eq!(
        run_args(&[
            "train-forecast",
            "--config",
            &lab.cfg,
            "--stage",
            "2",
            "--loss",
            "model-nll"
        ]),
        0
    );
    let log_a = std::fs::read_to_string(lab.dir.join("stage2_identity_log.jsonl")).unwrap();
    let log_b = std::fs::read_to_string(lab.dir.join("stage2_model-nll_log.jsonl")).unwrap();
    assert_eq!(log_a.lines().count(), log_b.lines().count());
    // Log lines are valid JSON with the pinned schema.
    for line in log_a.lines().take(3) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "stage", "rollout_len", "loss", "grad_norm", "lr", "wall_ms"] {
            assert!(v.get(key).is_some(), "missing {key} in log line");
        }
        assert_eq!(v["stage"], 2);
    }
}

#[test]
fn evaluate_row_count_and_spinup() {
    let _g = guard();
    let lab = mini_lab();
    assert_eq!(
        run_args(&[
            "train-forecast",
            "--config",
            &lab.cfg,
            "--stage",
            "2",
            "--loss",
            "identity"
        ]),
        0
    );
    let ck = lab.dir.join("stage2_identity.wcck");
    assert_eq!(
        run_args(&["evaluate", "--config", &lab.cfg, ck.to_str().unwrap()]),
        0
    );
    let csv = std::fs::read_to_string(lab.dir.join("eval.csv")).unwrap();
    // 1 model × 2 inits × 5 leads data rows plus the header.
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
    assert!(csv.starts_with(
        "model,loss_kind,init_index,lead,rmse,energy_slow,energy_fast,spec_low,spec_high,latent_resid"
    ));

    assert_eq!(
        run_args(&["spinup", "--config", &lab.cfg, ck.to_str().unwrap()]),
        0
    );
    let spin: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(lab.dir.join("spinup.json")).unwrap())
            .unwrap();
    let rows = spin["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    // Truncation to keep = 2 leaves no lead-0 high band.
    let lead0 = rows.iter().find(|r| r["lead"] == 0).unwrap();
    assert!(lead0["spec_high"].as_f64().unwrap() < 1e-10);

    // Missing checkpoint argument is a usage error.
    assert_eq!(run_args(&["evaluate", "--config", &lab.cfg]), 2);
}

#[test]
fn check_ae_reports_valid_json() {
    let _g = guard();
    let lab = mini_lab();
    // The linear-test flag injects an exactly linear reference model.
    assert_eq!(
        run_args(&["check-ae", "--config", &lab.cfg, "--linear-test"]),
        0
    );
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(lab.dir.join("ae_check_linear.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["linear_test_mode"], serde_json::Value::Bool(true));
    assert!(
        report["linearity_dev_max"].as_f64().unwrap() < 1e-8,
        "linear reference deviation {}",
        report["linearity_dev_max"]
    );
    // Trained-checkpoint report also parses and carries the three checks.
    assert_eq!(run_args(&["check-ae", "--config", &lab.cfg]), 0);
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(lab.dir.join("ae_check.json")).unwrap(),
    )
    .unwrap();
    for key in [
        "reconstruction_rel",
        "reconstruction_pass",
        "diagonality_score",
        "diagonality_pass",
        "linearity_dev_mean",
        "linearity_pass",
        "second_order_residual_curve",
    ] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn diagnose_reports_pass_flags() {
    let _g = guard();
    let lab = mini_lab();
    assert_eq!(run_args(&["diagnose", "--config", &lab.cfg]), 0);
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(lab.dir.join("diagnose.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["velocity_potential_pass"], serde_json::Value::Bool(true));
    assert_eq!(report["imbalance_pass"], serde_json::Value::Bool(true));
    assert_eq!(report["kinetic_energy_pass"], serde_json::Value::Bool(true));
    assert_eq!(report["parseval_pass"], serde_json::Value::Bool(true));
}

#[test]
fn shipped_default_config_matches_builtin() {
    let shipped = std::fs::read_to_string(
        concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.cfg"),
    )
    .unwrap();
    assert_eq!(shipped, default_config_text(42, "runs/default"));
}
