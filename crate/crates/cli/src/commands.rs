//! The experiment pipeline commands. Each command reads the declarative
//! config, validates its inputs (usage errors exit 2), runs (runtime errors
//! exit 1), writes its artifacts, and finishes with an atomic manifest.

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;
use wc4dvar_core::autoencoder::{
    self, AEParams, AeTrainConfig, LatentCov,
};
use wc4dvar_core::diagnostics::{
    self, evaluate_forecasts, imbalance_ratio, kinetic_energy, ring_spectrum, spinup_experiment,
    velocity_potential, Grid2D, BAND_SPLIT,
};
use wc4dvar_core::dynamics::{self, L96Config, StateVec, Trajectory};
use wc4dvar_core::forecast::{ForecastParams, Stage};
use wc4dvar_core::linalg;
use wc4dvar_core::losses::{LossKind, WeightTable};
use wc4dvar_core::reanalysis::{
    build_covariance, eigendecompose, make_reanalysis, CovarianceModel, ReanalysisSet,
};
use wc4dvar_core::rng::{stream_tag, Rng};
use wc4dvar_core::training::{
    train_stage1, train_stage2, Checkpoint, Objective, SourceTemplate, TrainConfig,
};

/// Command failure carrying the process exit code: 2 for usage/config
/// problems, 1 for runtime failures.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: msg.into(),
        }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: msg.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::runtime(e.to_string())
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::usage(e.to_string())
}

fn info(msg: &str) {
    if std::env::var("WC4DVAR_LOG").ok().as_deref() != Some("quiet") {
        eprintln!("wc4dvar-lab: {msg}");
    }
}

/// Shared command context: config plus resolved output directory.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, out_override: Option<PathBuf>) -> Result<Self> {
        let out = out_override.unwrap_or_else(|| cfg.out_dir());
        std::fs::create_dir_all(&out).map_err(runtime)?;
        Ok(Ctx { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, hint: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(CliError::usage(format!(
                "missing {}: run `{hint}` first",
                p.display()
            )));
        }
        Ok(p)
    }

    fn l96(&self) -> Result<L96Config> {
        L96Config::new(
            opt_usize(&self.cfg, "dynamics", "k", 8)?,
            opt_usize(&self.cfg, "dynamics", "j", 4)?,
            opt_f64(&self.cfg, "dynamics", "f", 8.0)?,
            opt_f64(&self.cfg, "dynamics", "h", 1.0)?,
            opt_f64(&self.cfg, "dynamics", "c", 10.0)?,
            opt_f64(&self.cfg, "dynamics", "b", 10.0)?,
            opt_f64(&self.cfg, "dynamics", "dt", 0.005)?,
        )
        .map_err(usage)
    }

    /// Training and held-out index ranges over the saved trajectory.
    fn split(&self, total: usize) -> Result<(usize, usize)> {
        let train_count = opt_usize(&self.cfg, "data", "train_count", 2000)?;
        let gap = opt_usize(&self.cfg, "data", "holdout_gap", 12)?;
        if train_count + gap >= total {
            return Err(CliError::usage(format!(
                "train_count {train_count} plus gap {gap} exceeds trajectory length {total}"
            )));
        }
        Ok((train_count, train_count + gap))
    }
}

fn opt_f64(cfg: &ExperimentConfig, s: &str, k: &str, d: f64) -> Result<f64> {
    cfg.opt_f64(s, k, d).map_err(usage)
}

fn opt_usize(cfg: &ExperimentConfig, s: &str, k: &str, d: usize) -> Result<usize> {
    cfg.opt_usize(s, k, d).map_err(usage)
}

pub fn cmd_gen_truth(ctx: &Ctx) -> Result<()> {
    let started = Instant::now();
    let l96 = ctx.l96()?;
    let spinup_steps = opt_usize(&ctx.cfg, "truth", "spinup_steps", 2000)?;
    let save_every = opt_usize(&ctx.cfg, "truth", "save_every", 8)?;
    let count = opt_usize(&ctx.cfg, "truth", "count", 2400)?;
    if count < 1 || save_every < 1 {
        return Err(CliError::usage(
            "truth count and save_every must be at least 1",
        ));
    }

    let seed = ctx.cfg.seed();
    let mut rng = Rng::from_tag(seed, "truth-init");
    let mut init = vec![0.0; l96.n()];
    for v in init.iter_mut().take(l96.k) {
        *v = 0.5 * l96.f + 0.5 * rng.normal();
    }
    for v in init.iter_mut().skip(l96.k) {
        *v = 0.05 * rng.normal();
    }
    let start = dynamics::spin_up(&StateVec::new(init), spinup_steps, &l96).map_err(runtime)?;
    let steps = (count - 1) * save_every;
    let truth = if steps == 0 {
        Trajectory::new(vec![start], l96.dt * save_every as f64, 0.0).map_err(runtime)?
    } else {
        dynamics::integrate(&start, steps, save_every, &l96).map_err(runtime)?
    };
    let path = ctx.path("truth.traj");
    truth.write_to(&path).map_err(runtime)?;
    info(&format!(
        "truth: {} states of dimension {} at dt {}",
        truth.len(),
        truth.dim(),
        truth.dt_between
    ));

    let mut manifest = RunManifest::new("gen-truth", ctx.cfg.hash());
    manifest.record_output(&path).map_err(runtime)?;
    manifest.wall_ms = started.elapsed().as_millis() as u64;
    manifest.write_atomic(&ctx.out).map_err(runtime)?;
    Ok(())
}

fn covariance_from_config(ctx: &Ctx, l96: &L96Config) -> Result<CovarianceModel> {
    build_covariance(
        l96,
        opt_f64(&ctx.cfg, "covariance", "sigma_slow", 1.5)?,
        opt_f64(&ctx.cfg, "covariance", "sigma_fast", 0.05)?,
        opt_f64(&ctx.cfg, "covariance", "length_scale", 1.0)?,
        opt_f64(&ctx.cfg, "covariance", "cross_coupling", 0.3)?,
    )
    .map_err(usage)
}

pub fn cmd_gen_reanalysis(ctx: &Ctx) -> Result<()> {
    let started = Instant::now();
    let l96 = ctx.l96()?;
    let truth_path = ctx.require("truth.traj", "gen-truth")?;
    let truth = Trajectory::read_from(&truth_path).map_err(runtime)?;
    let cov = covariance_from_config(ctx, &l96)?;
    let exact_initial = ctx
        .cfg
        .opt_bool("covariance", "exact_initial", true)
        .map_err(usage)?;
    let seed = ctx.cfg.seed() ^ stream_tag("reanalysis");
    let set = make_reanalysis(&truth, &cov, seed, exact_initial).map_err(runtime)?;

    let re_path = ctx.path("reanalysis.traj");
    set.reanalysis.write_to(&re_path).map_err(runtime)?;
    let cov_path = ctx.path("cov.wcov");
    cov.write_to(&cov_path).map_err(runtime)?;

    // Per-component error standard deviation summary.
    let n = truth.dim();
    let mut var = vec![0.0; n];
    let mut zero_initial_delta = true;
    for (i, (a, t)) in set
        .reanalysis
        .states
        .iter()
        .zip(&truth.states)
        .enumerate()
    {
        for j in 0..n {
            let d = a.values()[j] - t.values()[j];
            if i == 0 && d != 0.0 {
                zero_initial_delta = false;
            }
            var[j] += d * d;
        }
    }
    let count = truth.len() as f64;
    let stds: Vec<String> = var
        .iter()
        .map(|v| format!("{}", (v / count).sqrt()))
        .collect();
    let stats = format!(
        "{{\n  \"per_component_error_std\": [{}],\n  \"sigma_slow\": {},\n  \"sigma_fast\": {},\n  \"exact_initial\": {},\n  \"index0_delta_zero\": {}\n}}\n",
        stds.join(", "),
        opt_f64(&ctx.cfg, "covariance", "sigma_slow", 1.5)?,
        opt_f64(&ctx.cfg, "covariance", "sigma_fast", 0.05)?,
        exact_initial,
        zero_initial_delta
    );
    let stats_path = ctx.path("error_stats.json");
    std::fs::write(&stats_path, stats).map_err(runtime)?;
    info("reanalysis written with covariance and error summary");

    let mut manifest = RunManifest::new("gen-reanalysis", ctx.cfg.hash());
    manifest.record_input(&truth_path).map_err(runtime)?;
    for p in [&re_path, &cov_path, &stats_path] {
        manifest.record_output(p).map_err(runtime)?;
    }
    manifest.wall_ms = started.elapsed().as_millis() as u64;
    manifest.write_atomic(&ctx.out).map_err(runtime)?;
    Ok(())
}

fn load_reanalysis_train(ctx: &Ctx) -> Result<(Trajectory, usize, usize)> {
    let re_path = ctx.require("reanalysis.traj", "gen-reanalysis")?;
    let re = Trajectory::read_from(&re_path).map_err(runtime)?;
    let (train_count, holdout_start) = ctx.split(re.len())?;
    Ok((re, train_count, holdout_start))
}

fn ae_config(ctx: &Ctx) -> Result<AeTrainConfig> {
    Ok(AeTrainConfig {
        hidden: ctx
            .cfg
            .opt_usize_list("ae", "hidden", &[64, 64])
            .map_err(usage)?,
        latent_dim: opt_usize(&ctx.cfg, "ae", "latent_dim", 12)?,
        epochs: opt_usize(&ctx.cfg, "ae", "epochs", 300)?,
        batch: opt_usize(&ctx.cfg, "ae", "batch", 32)?,
        lr: opt_f64(&ctx.cfg, "ae", "lr", 1e-3)?,
        plateau_halving: ctx.cfg.opt_bool("ae", "plateau_halving", false).map_err(usage)?,
        shuffle: ctx.cfg.opt_bool("ae", "shuffle", true).map_err(usage)?,
        natural_loss: true,
        lr_floor: opt_f64(&ctx.cfg, "ae", "lr_floor", 1e-5)?,
        seed: ctx.cfg.seed(),
    })
}

pub fn cmd_train_ae(ctx: &Ctx) -> Result<()> {
    let started = Instant::now();
    let (re, train_count, _) = load_reanalysis_train(ctx)?;
    let cfg = ae_config(ctx)?;
    let (ae, report) =
        autoencoder::train_ae(&re.states[..train_count], &cfg).map_err(runtime)?;
    let ae_path = ctx.path("ae.wcae");
    ae.write_to(&ae_path).map_err(runtime)?;
    let losses: Vec<String> = report.epoch_losses.iter().map(|l| format!("{l}")).collect();
    let report_json = format!("{{\n  \"epoch_losses\": [{}]\n}}\n", losses.join(", "));
    let report_path = ctx.path("ae_report.json");
    std::fs::write(&report_path, report_json).map_err(runtime)?;
    info(&format!(
        "autoencoder trained: final epoch loss {:.6}",
        report.epoch_losses.last().unwrap()
    ));

    let mut manifest = RunManifest::new("train-ae", ctx.cfg.hash());
    manifest
        .record_input(&ctx.path("reanalysis.traj"))
        .map_err(runtime)?;
    manifest.record_output(&ae_path).map_err(runtime)?;
    manifest.record_output(&report_path).map_err(runtime)?;
    manifest.wall_ms = started.elapsed().as_millis() as u64;
    manifest.write_atomic(&ctx.out).map_err(runtime)?;
    Ok(())
}

fn slice_trajectory(traj: &Trajectory, range: std::ops::Range<usize>) -> Result<Trajectory> {
    Trajectory::new(
        traj.states[range].to_vec(),
        traj.dt_between,
        traj.t0,
    )
    .map_err(runtime)
}

pub fn cmd_check_ae(ctx: &Ctx, linear_test: bool) -> Result<()> {
    let started = Instant::now();
    let truth_path = ctx.require("truth.traj", "gen-truth")?;
    let (re, train_count, holdout_start) = load_reanalysis_train(ctx)?;
    let truth = Trajectory::read_from(&truth_path).map_err(runtime)?;
    let cov_path = ctx.require("cov.wcov", "gen-reanalysis")?;
    let cov = CovarianceModel::read_from(&cov_path).map_err(runtime)?;

    let mut inputs = vec![truth_path.clone(), ctx.path("reanalysis.traj"), cov_path];
    let ae = if linear_test {
        let n = truth.dim();
        let m = opt_usize(&ctx.cfg, "ae", "latent_dim", 12)?;
        let mut w = Rng::from_tag(ctx.cfg.seed(), "linear-test-ae").normal_vec(m * n);
        linalg::orthonormalize_rows(&mut w, m, n).map_err(runtime)?;
        AEParams::linear_orthogonal(&w, m, n).map_err(runtime)?
    } else {
        let ae_path = ctx.require("ae.wcae", "train-ae")?;
        inputs.push(ae_path.clone());
        AEParams::read_from(&ae_path).map_err(runtime)?
    };

    let recon_rel_max = opt_f64(&ctx.cfg, "ae_check", "recon_rel_max", 0.1)?;
    let floor_factor = opt_f64(&ctx.cfg, "ae_check", "linearity_floor_factor", 10.0)?;
    let fd_step = opt_f64(&ctx.cfg, "ae_check", "fd_step", 1e-5)?;
    let probes = opt_usize(&ctx.cfg, "ae_check", "probes", 16)?;
    let baseline_seeds = opt_usize(&ctx.cfg, "ae_check", "baseline_seeds", 5)?;

    // Assumption 1: reconstruction error on held-out states.
    let holdout = &re.states[holdout_start..];
    let recon = autoencoder::reconstruction_rmse(&ae, holdout).map_err(runtime)?;
    let clim = autoencoder::pooled_std(&re.states[..train_count]).map_err(runtime)?;
    let recon_rel = recon / clim;
    let recon_pass = recon_rel < recon_rel_max;

    // Assumption 3: near-diagonal latent error covariance, against random
    // orthonormal projections of the same model-space errors.
    let set = ReanalysisSet {
        truth: slice_trajectory(&truth, 0..train_count)?,
        reanalysis: slice_trajectory(&re, 0..train_count)?,
        cov,
        rng_seed: ctx.cfg.seed(),
    };
    let latent_cov = autoencoder::latent_error_cov(&set, &ae).map_err(runtime)?;
    let diag_score =
        autoencoder::diagonality_score(&latent_cov.matrix, latent_cov.m).map_err(runtime)?;
    let corr_score = autoencoder::correlation_diagonality_score(&latent_cov.matrix, latent_cov.m)
        .map_err(runtime)?;
    let mut baselines = Vec::with_capacity(baseline_seeds);
    for i in 0..baseline_seeds {
        baselines.push(
            autoencoder::random_projection_diagonality(
                &set,
                ae.latent_dim(),
                ctx.cfg.seed() ^ (i as u64 + 1),
            )
            .map_err(runtime)?,
        );
    }
    let diag_pass = baselines.iter().all(|b| diag_score < *b);

    // Assumption 2: local linearity on held-out states, floored by a linear
    // autoencoder trained identically.
    let probe_states: Vec<&StateVec> = holdout.iter().step_by(37).take(5).collect();
    let mut cfg_ae = ae_config(ctx)?;
    let linearity = |model: &AEParams, scale: f64| -> Result<(f64, f64, f64)> {
        let mut devs = Vec::new();
        let mut resids = Vec::new();
        for (i, s) in probe_states.iter().enumerate() {
            let rep = autoencoder::linearity_check(
                model,
                s,
                scale,
                fd_step,
                probes,
                ctx.cfg.seed() ^ i as u64,
            )
            .map_err(runtime)?;
            devs.push(rep.jacobian_product_dev);
            resids.push(rep.second_order_residual);
        }
        let mean_dev = devs.iter().sum::<f64>() / devs.len() as f64;
        let max_dev = devs.iter().fold(0.0f64, |a, b| a.max(*b));
        let mean_resid = resids.iter().sum::<f64>() / resids.len() as f64;
        Ok((mean_dev, max_dev, mean_resid))
    };
    let probe_scale = opt_f64(&ctx.cfg, "ae_check", "probe_scale", 0.1)?;
    let (dev_mean, dev_max, _) = linearity(&ae, probe_scale)?;
    // Equal-precision linear floor: same data, epochs, batch and seed.
    cfg_ae.hidden = Vec::new();
    let (linear_ae, _) =
        autoencoder::train_ae(&re.states[..train_count], &cfg_ae).map_err(runtime)?;
    let (floor_mean, floor_max, _) = linearity(&linear_ae, probe_scale)?;
    let linearity_pass = dev_mean < floor_factor * floor_mean;
    // Second-order residual across probe scales.
    let mut curve = Vec::new();
    for scale in [1e-1, 1e-2, 1e-3] {
        let (_, _, resid) = linearity(&ae, scale)?;
        curve.push((scale, resid));
    }

    let mut json = String::from("{\n");
    let _ = writeln!(json, "  \"reconstruction_rmse\": {recon},");
    let _ = writeln!(json, "  \"climatological_std\": {clim},");
    let _ = writeln!(json, "  \"reconstruction_rel\": {recon_rel},");
    let _ = writeln!(json, "  \"reconstruction_threshold\": {recon_rel_max},");
    let _ = writeln!(json, "  \"reconstruction_pass\": {recon_pass},");
    let _ = writeln!(json, "  \"diagonality_score\": {diag_score},");
    let _ = writeln!(json, "  \"diagonality_correlation_score\": {corr_score},");
    let _ = writeln!(
        json,
        "  \"diagonality_baselines\": [{}],",
        baselines
            .iter()
            .map(|b| format!("{b}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let _ = writeln!(json, "  \"diagonality_pass\": {diag_pass},");
    let _ = writeln!(json, "  \"linearity_dev_mean\": {dev_mean},");
    let _ = writeln!(json, "  \"linearity_dev_max\": {dev_max},");
    let _ = writeln!(json, "  \"linearity_linear_floor_mean\": {floor_mean},");
    let _ = writeln!(json, "  \"linearity_linear_floor_max\": {floor_max},");
    let _ = writeln!(json, "  \"linearity_floor_factor\": {floor_factor},");
    let _ = writeln!(json, "  \"linearity_pass\": {linearity_pass},");
    let _ = writeln!(
        json,
        "  \"second_order_residual_curve\": [{}],",
        curve
            .iter()
            .map(|(s, r)| format!("[{s}, {r}]"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let _ = writeln!(json, "  \"linear_test_mode\": {linear_test}");
    json.push_str("}\n");
    let report_path = ctx.path(if linear_test {
        "ae_check_linear.json"
    } else {
        "ae_check.json"
    });
    std::fs::write(&report_path, json).map_err(runtime)?;
    info(&format!(
        "assumption checks: recon {recon_rel:.4} (pass {recon_pass}), diagonality {diag_score:.4} (pass {diag_pass}), linearity {dev_mean:.4e} vs floor {floor_mean:.4e} (pass {linearity_pass})"
    ));

    let mut manifest = RunManifest::new(
        if linear_test { "check-ae-linear" } else { "check-ae" },
        ctx.cfg.hash(),
    );
    for p in &inputs {
        manifest.record_input(p).map_err(runtime)?;
    }
    manifest.record_output(&report_path).map_err(runtime)?;
    manifest.wall_ms = started.elapsed().as_millis() as u64;
    manifest.write_atomic(&ctx.out).map_err(runtime)?;
    Ok(())
}

fn stage1_config(ctx: &Ctx) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::stage1(ctx.cfg.seed());
    cfg.hidden = ctx
        .cfg
        .opt_usize_list("forecast", "hidden", &[128, 128])
        .map_err(usage)?;
    cfg.epochs = opt_usize(&ctx.cfg, "training.stage1", "epochs", 50)?;
    cfg.batch = opt_usize(&ctx.cfg, "training.stage1", "batch", 16)?;
    cfg.lr_peak = opt_f64(&ctx.cfg, "training.stage1", "lr_peak", 5e-4)?;
    cfg.warmup_frac = opt_f64(&ctx.cfg, "training.stage1", "warmup_frac", 0.05)?;
    cfg.lr_floor = opt_f64(&ctx.cfg, "training.stage1", "lr_floor", 1e-6)?;
    Ok(cfg)
}

fn stage2_config(ctx: &Ctx) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::stage2(ctx.cfg.seed());
    cfg.hidden = ctx
        .cfg
        .opt_usize_list("forecast", "hidden", &[128, 128])
        .map_err(usage)?;
    cfg.curriculum = ctx
        .cfg
        .opt_usize_list("training.stage2", "curriculum", &(2..=12).collect::<Vec<_>>())
        .map_err(usage)?;
    cfg.batch = opt_usize(&ctx.cfg, "training.stage2", "batch", 16)?;
    cfg.lr_stage2 = opt_f64(&ctx.cfg, "training.stage2", "lr", 3e-7)?;
    cfg.grad_clip = opt_f64(&ctx.cfg, "training.stage2", "grad_clip", 1.0)?;
    cfg.logvar_per_step = ctx
        .cfg
        .opt_bool("training.stage2", "logvar_per_step", false)
        .map_err(usage)?;
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Builds the stage-2 objective for a loss kind, loading whatever artifacts
/// it needs (usage error when they are missing).
pub fn build_objective(ctx: &Ctx, kind: LossKind) -> Result<Objective> {
    let load_ae = || -> Result<AEParams> {
        let p = ctx.require("ae.wcae", "train-ae")?;
        AEParams::read_from(&p).map_err(runtime)
    };
    let load_cov = || -> Result<CovarianceModel> {
        let p = ctx.require("cov.wcov", "gen-reanalysis")?;
        CovarianceModel::read_from(&p).map_err(runtime)
    };
    Ok(match kind {
        LossKind::ModelCov => Objective::ModelCov(load_cov()?),
        LossKind::EigenWeighted => {
            Objective::EigenWeighted(eigendecompose(&load_cov()?).map_err(runtime)?)
        }
        LossKind::Identity => Objective::Identity,
        LossKind::ModelNll => Objective::ModelNll,
        LossKind::LatentNll => Objective::LatentNll(load_ae()?),
        LossKind::LatentWeighted => {
            let ae = load_ae()?;
            let mode = ctx.cfg.opt_str("loss", "latent_weights", "uniform");
            let table = match mode.as_str() {
                "uniform" => WeightTable::uniform(ae.latent_dim()),
                "inv-latent-var" => {
                    let lc = latent_cov_from_artifacts(ctx, &ae)?;
                    WeightTable::tied(lc.diag.iter().map(|v| 1.0 / v.max(1e-12)).collect())
                        .map_err(runtime)?
                }
                other => {
                    return Err(CliError::usage(format!(
                        "unknown latent_weights mode {other:?}"
                    )))
                }
            };
            Objective::LatentWeighted(ae, table)
        }
        LossKind::MultiSource => {
            let mut templates = Vec::new();
            let indices = ctx
                .cfg
                .opt_usize_list("loss", "ms_discrete_indices", &[])
                .unwrap_or_default();
            if !indices.is_empty() {
                templates.push(SourceTemplate::Discrete {
                    indices,
                    weight: opt_f64(&ctx.cfg, "loss", "ms_discrete_weight", 1.0)?,
                });
            }
            let cont = ctx.cfg.opt_str("loss", "ms_continuous", "ae");
            let mut ae_opt = None;
            match cont.as_str() {
                "none" => {}
                "identity" => templates.push(SourceTemplate::ContinuousIdentity {
                    weight: opt_f64(&ctx.cfg, "loss", "ms_continuous_weight", 1.0)?,
                }),
                "ae" => {
                    ae_opt = Some(load_ae()?);
                    templates.push(SourceTemplate::ContinuousAe {
                        weight: opt_f64(&ctx.cfg, "loss", "ms_continuous_weight", 1.0)?,
                    });
                }
                other => {
                    return Err(CliError::usage(format!(
                        "unknown ms_continuous mode {other:?}"
                    )))
                }
            }
            if templates.is_empty() {
                return Err(CliError::usage(
                    "multi-source loss needs at least one source",
                ));
            }
            Objective::MultiSource {
                templates,
                ae: ae_opt,
            }
        }
        other => {
            return Err(CliError::usage(format!(
                "loss kind {} is not selectable for stage-2 training",
                other.name()
            )))
        }
    })
}

fn latent_cov_from_artifacts(ctx: &Ctx, ae: &AEParams) -> Result<LatentCov> {
    let truth_path = ctx.require("truth.traj", "gen-truth")?;
    let truth = Trajectory::read_from(&truth_path).map_err(runtime)?;
    let (re, train_count, _) = load_reanalysis_train(ctx)?;
    let cov_path = ctx.require("cov.wcov", "gen-reanalysis")?;
    let cov = CovarianceModel::read_from(&cov_path).map_err(runtime)?;
    let set = ReanalysisSet {
        truth: slice_trajectory(&truth, 0..train_count)?,
        reanalysis: slice_trajectory(&re, 0..train_count)?,
        cov,
        rng_seed: ctx.cfg.seed(),
    };
    autoencoder::latent_error_cov(&set, ae).map_err(runtime)
}

pub fn cmd_train_forecast(ctx: &Ctx, stage: u8, loss_flag: Option<&str>) -> Result<()> {
    let started = Instant::now();
    let (re, train_count, _) = load_reanalysis_train(ctx)?;
    let train_states = &re.states[..train_count];
    let mut manifest_inputs = vec![ctx.path("reanalysis.traj")];

    match stage {
        1 => {
            let cfg = stage1_config(ctx)?;
            // Shared normalization with the autoencoder when available.
            let norm = if ctx.path("ae.wcae").exists() {
                manifest_inputs.push(ctx.path("ae.wcae"));
                Some(AEParams::read_from(&ctx.path("ae.wcae")).map_err(runtime)?.norm)
            } else {
                None
            };
            let (ckpt, report) =
                train_stage1(train_states, re.dt_between, norm.as_ref(), &cfg)
                    .map_err(runtime)?;
            let ck_path = ctx.path("stage1.wcck");
            ckpt.save(&ck_path).map_err(runtime)?;
            let log_path = ctx.path("stage1_log.jsonl");
            report.write_jsonl(&log_path).map_err(runtime)?;
            info(&format!(
                "stage 1 complete: {} steps, final loss {:.4}",
                report.records.len(),
                report.records.last().map(|r| r.loss).unwrap_or(f64::NAN)
            ));
            let mut manifest = RunManifest::new("train-forecast-stage1", ctx.cfg.hash());
            for p in &manifest_inputs {
                manifest.record_input(p).map_err(runtime)?;
            }
            manifest.record_output(&ck_path).map_err(runtime)?;
            manifest.wall_ms = started.elapsed().as_millis() as u64;
            manifest.write_atomic(&ctx.out).map_err(runtime)?;
            Ok(())
        }
        2 => {
            let kind_name = match loss_flag {
                Some(k) => k.to_string(),
                None => ctx.cfg.opt_str("loss", "kind", "latent-nll"),
            };
            let kind = LossKind::from_name(&kind_name).map_err(usage)?;
            let stage1_path = ctx.require("stage1.wcck", "train-forecast --stage 1")?;
            manifest_inputs.push(stage1_path.clone());
            let start = Checkpoint::load(&stage1_path).map_err(runtime)?;
            let objective = build_objective(ctx, kind)?;
            let cfg = stage2_config(ctx)?;
            let (ckpt, report) =
                train_stage2(train_states, &start, &objective, &cfg).map_err(runtime)?;
            for w in &report.warnings {
                info(&format!("warning: {w}"));
            }
            let ck_path = ctx.path(&format!("stage2_{}.wcck", kind.name()));
            ckpt.save(&ck_path).map_err(runtime)?;
            let log_path = ctx.path(&format!("stage2_{}_log.jsonl", kind.name()));
            report.write_jsonl(&log_path).map_err(runtime)?;
            info(&format!(
                "stage 2 ({}) complete: lengths {:?}, {} steps",
                kind.name(),
                report.lengths,
                report.records.len()
            ));
            let mut manifest = RunManifest::new(
                &format!("train-forecast-stage2-{}", kind.name()),
                ctx.cfg.hash(),
            );
            for p in &manifest_inputs {
                manifest.record_input(p).map_err(runtime)?;
            }
            manifest.record_output(&ck_path).map_err(runtime)?;
            manifest.wall_ms = started.elapsed().as_millis() as u64;
            manifest.write_atomic(&ctx.out).map_err(runtime)?;
            Ok(())
        }
        other => Err(CliError::usage(format!(
            "unknown training stage {other}; expected 1 or 2"
        ))),
    }
}

fn load_checkpoints(paths: &[PathBuf]) -> Result<Vec<(String, Checkpoint)>> {
    if paths.is_empty() {
        return Err(CliError::usage(
            "at least one checkpoint path is required",
        ));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        if !p.exists() {
            return Err(CliError::usage(format!("missing checkpoint {}", p.display())));
        }
        let ck = Checkpoint::load(p).map_err(runtime)?;
        if ck.forecast.stage == Stage::Untrained {
            return Err(CliError::usage(format!(
                "checkpoint {} is untrained",
                p.display()
            )));
        }
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        out.push((name, ck));
    }
    Ok(out)
}

fn holdout_inits(ctx: &Ctx, truth_len: usize, max_lead: usize) -> Result<Vec<usize>> {
    let (_, holdout_start) = ctx.split(truth_len)?;
    let count = opt_usize(&ctx.cfg, "evaluation", "init_count", 20)?;
    let stride = opt_usize(&ctx.cfg, "evaluation", "init_stride", 8)?;
    let mut inits = Vec::with_capacity(count);
    for i in 0..count {
        let idx = holdout_start + i * stride;
        if idx + max_lead >= truth_len {
            return Err(CliError::usage(format!(
                "evaluation window exceeds the trajectory: init {idx} + lead {max_lead} >= {truth_len}"
            )));
        }
        inits.push(idx);
    }
    Ok(inits)
}

pub fn cmd_evaluate(ctx: &Ctx, ckpt_paths: &[PathBuf]) -> Result<()> {
    let started = Instant::now();
    let l96 = ctx.l96()?;
    let truth_path = ctx.require("truth.traj", "gen-truth")?;
    let truth = Trajectory::read_from(&truth_path).map_err(runtime)?;
    let ae_path = ctx.require("ae.wcae", "train-ae")?;
    let ae = AEParams::read_from(&ae_path).map_err(runtime)?;
    let checkpoints = load_checkpoints(ckpt_paths)?;
    let max_lead = opt_usize(&ctx.cfg, "evaluation", "max_lead", 24)?;
    let include_persistence = ctx
        .cfg
        .opt_bool("evaluation", "include_persistence", false)
        .map_err(usage)?;
    let inits = holdout_inits(ctx, truth.len(), max_lead)?;

    let models: Vec<(String, &ForecastParams)> = checkpoints
        .iter()
        .map(|(name, ck)| (name.clone(), &ck.forecast))
        .collect();
    let report = evaluate_forecasts(
        &models,
        &inits,
        max_lead,
        &truth,
        &ae,
        &l96,
        include_persistence,
    )
    .map_err(runtime)?;
    let eval_path = ctx.path("eval.csv");
    std::fs::write(&eval_path, report.to_csv()).map_err(runtime)?;

    // Mean slow-ring spectrum at the final lead per model, plus truth.
    let mut spectrum_paths = Vec::new();
    let write_mean_spectrum = |name: &str, states: Vec<&StateVec>| -> Result<PathBuf> {
        let mut mean_power: Option<Vec<f64>> = None;
        let mut wavenumbers = Vec::new();
        for s in &states {
            let spec = ring_spectrum(s.slow(&l96)).map_err(runtime)?;
            wavenumbers = spec.wavenumbers.clone();
            match &mut mean_power {
                None => mean_power = Some(spec.power),
                Some(acc) => {
                    for (a, p) in acc.iter_mut().zip(&spec.power) {
                        *a += p;
                    }
                }
            }
        }
        let mut power = mean_power.expect("non-empty init set");
        for p in power.iter_mut() {
            *p /= states.len() as f64;
        }
        let mut csv = String::from("wavenumber,power\n");
        for (w, p) in wavenumbers.iter().zip(&power) {
            let _ = writeln!(csv, "{w},{p}");
        }
        let path = ctx.path(&format!("spectrum_{name}_lead{max_lead}.csv"));
        std::fs::write(&path, csv).map_err(runtime)?;
        Ok(path)
    };
    for (name, ck) in &checkpoints {
        let mut finals = Vec::with_capacity(inits.len());
        for &init in &inits {
            let rr = wc4dvar_core::forecast::rollout(&truth.states[init], max_lead, &ck.forecast)
                .map_err(runtime)?;
            finals.push(rr.states.last().unwrap().clone());
        }
        let refs: Vec<&StateVec> = finals.iter().collect();
        spectrum_paths.push(write_mean_spectrum(name, refs)?);
    }
    let truth_refs: Vec<&StateVec> = inits.iter().map(|i| &truth.states[i + max_lead]).collect();
    spectrum_paths.push(write_mean_spectrum("truth", truth_refs)?);

    info(&format!(
        "evaluation: {} rows over {} inits × {} leads",
        report.rows.len(),
        inits.len(),
        max_lead + 1
    ));
    let mut manifest = RunManifest::new("evaluate", ctx.cfg.hash());
    manifest.record_input(&truth_path).map_err(runtime)?;
    manifest.record_input(&ae_path).map_err(runtime)?;
    for p in ckpt_paths {
        manifest.record_input(p).map_err(runtime)?;
    }
    manifest.record_output(&eval_path).map_err(runtime)?;
    for p in &spectrum_paths {
        manifest.record_output(p).map_err(runtime)?;
    }
    manifest.wall_ms = started.elapsed().as_millis() as u64;
    manifest.write_atomic(&ctx.out).map_err(runtime)?;
    Ok(())
}

pub fn cmd_diagnose(ctx: &Ctx) -> Result<()> {
    let started = Instant::now();
    let grid = opt_usize(&ctx.cfg, "diagnose", "grid", 64)?;
    let grid_refined = opt_usize(&ctx.cfg, "diagnose", "grid_refined", 128)?;
    let coriolis = opt_f64(&ctx.cfg, "diagnose", "coriolis", 1e-4)?;

    // Velocity-potential analytic round trip with refinement.
    let chi_case = |n: usize| -> Result<f64> {
        let l = 50.0;
        let d = l / n as f64;
        let k = 2.0 * std::f64::consts::PI / l;
        let chi = Grid2D::from_xy(n, n, d, d, |x, y| (k * x).sin() * (k * y).sin())
            .map_err(runtime)?;
        let u = Grid2D::from_xy(n, n, d, d, |x, y| k * (k * x).cos() * (k * y).sin())
            .map_err(runtime)?;
        let v = Grid2D::from_xy(n, n, d, d, |x, y| k * (k * x).sin() * (k * y).cos())
            .map_err(runtime)?;
        let rec = velocity_potential(&u, &v).map_err(runtime)?;
        let mean = chi.mean();
        let mut num = 0.0;
        let mut den = 0.0;
        for (r, c) in rec.values.iter().zip(&chi.values) {
            let target = c - mean;
            num += (r - target) * (r - target);
            den += target * target;
        }
        Ok((num / den).sqrt())
    };
    let chi_err = chi_case(grid)?;
    let chi_err_refined = chi_case(grid_refined)?;
    let chi_order = (chi_err / chi_err_refined).log2()
        / ((grid_refined as f64 / grid as f64).log2());
    let chi_pass = chi_err < 1e-2 && chi_order > 1.5;

    // Geostrophic self-consistency.
    let phi = Grid2D::from_xy(32, 32, 1.0, 1.0, |x, y| {
        (2.0 * std::f64::consts::PI * x / 32.0).sin()
            + 0.5 * (2.0 * std::f64::consts::PI * y / 32.0).cos()
    })
    .map_err(runtime)?;
    let (ug, vg) = diagnostics::geostrophic_wind(&phi, coriolis).map_err(runtime)?;
    let imb = imbalance_ratio(&ug, &vg, &phi, coriolis).map_err(runtime)?;
    let imbalance_pass = imb.mean_ratio < 1e-12;

    // Kinetic-energy spot value.
    let u3 = Grid2D::from_xy(8, 8, 1.0, 1.0, |_, _| 3.0).map_err(runtime)?;
    let v4 = Grid2D::from_xy(8, 8, 1.0, 1.0, |_, _| 4.0).map_err(runtime)?;
    let ke = kinetic_energy(&[u3], &[v4]).map_err(runtime)?;
    let ke_pass = ke == 12.5;

    // Parseval on seeded noise.
    let mut rng = Rng::from_tag(ctx.cfg.seed(), "diagnose-noise");
    let noise = rng.normal_vec(64);
    let spec = ring_spectrum(&noise).map_err(runtime)?;
    let ms = noise.iter().map(|x| x * x).sum::<f64>() / noise.len() as f64;
    let parseval_err = (spec.total_power() - ms).abs();
    let parseval_pass = parseval_err < 1e-10;

    let json = format!(
        "{{\n  \"velocity_potential_rel_l2\": {chi_err},\n  \"velocity_potential_rel_l2_refined\": {chi_err_refined},\n  \"velocity_potential_order\": {chi_order},\n  \"velocity_potential_pass\": {chi_pass},\n  \"imbalance_self_consistency\": {},\n  \"imbalance_pass\": {imbalance_pass},\n  \"kinetic_energy_3_4\": {ke},\n  \"kinetic_energy_pass\": {ke_pass},\n  \"parseval_error\": {parseval_err},\n  \"parseval_pass\": {parseval_pass}\n}}\n",
        imb.mean_ratio
    );
    let path = ctx.path("diagnose.json");
    std::fs::write(&path, json).map_err(runtime)?;
    info(&format!(
        "diagnose: chi {chi_err:.2e} (order {chi_order:.2}), imbalance {:.2e}, KE {ke}, parseval {parseval_err:.2e}",
        imb.mean_ratio
    ));

    let mut manifest = RunManifest::new("diagnose", ctx.cfg.hash());
    manifest.record_output(&path).map_err(runtime)?;
    manifest.wall_ms = started.elapsed().as_millis() as u64;
    manifest.write_atomic(&ctx.out).map_err(runtime)?;
    Ok(())
}

pub fn cmd_spinup(ctx: &Ctx, ckpt_paths: &[PathBuf]) -> Result<()> {
    let started = Instant::now();
    let l96 = ctx.l96()?;
    let truth_path = ctx.require("truth.traj", "gen-truth")?;
    let truth = Trajectory::read_from(&truth_path).map_err(runtime)?;
    let checkpoints = load_checkpoints(ckpt_paths)?;
    let keep = opt_usize(&ctx.cfg, "spinup", "keep_wavenumbers", 2)?;
    let leads = ctx
        .cfg
        .opt_usize_list("spinup", "leads", &[0, 4, 8, 12, 16, 20, 24])
        .map_err(usage)?;
    let (_, holdout_start) = ctx.split(truth.len())?;
    let state_index = opt_usize(&ctx.cfg, "spinup", "state_index", holdout_start + 50)?;
    if state_index >= truth.len() {
        return Err(CliError::usage(format!(
            "spinup state_index {state_index} exceeds trajectory length {}",
            truth.len()
        )));
    }

    let models: Vec<(String, &ForecastParams)> = checkpoints
        .iter()
        .map(|(name, ck)| (name.clone(), &ck.forecast))
        .collect();
    let report = spinup_experiment(&models, &truth.states[state_index], keep, &leads, &l96)
        .map_err(runtime)?;

    let mut json = String::from("{\n  \"rows\": [\n");
    for (i, row) in report.rows.iter().enumerate() {
        let _ = write!(
            json,
            "    {{\"model\": \"{}\", \"lead\": {}, \"energy_slow\": {}, \"energy_fast\": {}, \"spec_low\": {}, \"spec_high\": {}}}",
            row.model, row.lead, row.energy_slow, row.energy_fast, row.spec_low, row.spec_high
        );
        json.push_str(if i + 1 < report.rows.len() { ",\n" } else { "\n" });
    }
    json.push_str("  ],\n  \"pairwise_pearson\": [");
    let pearson_entries: Vec<String> = report
        .pairwise_pearson
        .iter()
        .map(|(lead, r)| format!("[{lead}, {r}]"))
        .collect();
    json.push_str(&pearson_entries.join(", "));
    json.push_str(&format!(
        "],\n  \"keep_wavenumbers\": {keep},\n  \"band_split\": {BAND_SPLIT},\n  \"state_index\": {state_index}\n}}\n"
    ));
    let path = ctx.path("spinup.json");
    std::fs::write(&path, json).map_err(runtime)?;
    info(&format!(
        "spin-up: {} rows from keep = {keep} at state {state_index}",
        report.rows.len()
    ));

    let mut manifest = RunManifest::new("spinup", ctx.cfg.hash());
    manifest.record_input(&truth_path).map_err(runtime)?;
    for p in ckpt_paths {
        manifest.record_input(p).map_err(runtime)?;
    }
    manifest.record_output(&path).map_err(runtime)?;
    manifest.wall_ms = started.elapsed().as_millis() as u64;
    manifest.write_atomic(&ctx.out).map_err(runtime)?;
    Ok(())
}
