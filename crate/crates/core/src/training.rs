//! Two-stage forecast training: stage 1 is single-step model-space NLL
//! under a warm-up/cosine schedule, stage 2 fine-tunes through a rollout
//! curriculum (lengths increasing, final length run twice) at a constant
//! learning rate with a selectable objective, so loss variants can be
//! compared from one shared stage-1 start.
//!
//! Batch schedules are a pure function of (seed, epoch index, item count,
//! batch size) and never of the objective, which is what makes loss-swap
//! comparisons controlled.

use crate::autoencoder::AEParams;
use crate::dynamics::StateVec;
use crate::error::{Error, Result};
use crate::forecast::{self, ForecastParams, Stage};
use crate::io;
use crate::losses::{
    self, ContinuousEncoder, ErrorModel, LogVarParams, LossKind, ObsOperator, ObservationSource,
    Segment, WeightTable, LOGVAR_PARAM,
};
use crate::nn::Normalization;
use crate::reanalysis::{CovarianceModel, EigenDecomp};
pub use crate::optim::{adam_step, clip_grads, grad_norm, warmup_cosine, OptimizerState};
use crate::rng::{stream_tag, Rng};
use crate::tensor::{ParamStore, Tape};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

/// Training configuration for either stage.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: u8,
    /// Forecast MLP hidden widths.
    pub hidden: Vec<usize>,
    /// Stage-1 epochs.
    pub epochs: usize,
    /// Stage-2 rollout lengths; the last entry is trained a second time.
    pub curriculum: Vec<usize>,
    pub batch: usize,
    /// Stage-1 peak learning rate.
    pub lr_peak: f64,
    /// Warm-up fraction of total stage-1 steps.
    pub warmup_frac: f64,
    /// Stage-1 cosine floor.
    pub lr_floor: f64,
    /// Stage-2 constant learning rate.
    pub lr_stage2: f64,
    /// Stage-2 global gradient-norm clip.
    pub grad_clip: f64,
    /// Log-variance tables per rollout step instead of shared.
    pub logvar_per_step: bool,
    /// Stop stage 2 after this many curriculum entries (interruption /
    /// incremental runs); not part of the config identity.
    pub epoch_limit: Option<u32>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn stage1(seed: u64) -> Self {
        TrainConfig {
            stage: 1,
            hidden: vec![128, 128],
            epochs: 50,
            curriculum: Vec::new(),
            batch: 16,
            lr_peak: 5e-4,
            warmup_frac: 0.05,
            lr_floor: 1e-6,
            lr_stage2: 3e-7,
            grad_clip: 1.0,
            logvar_per_step: false,
            epoch_limit: None,
            seed,
        }
    }

    pub fn stage2(seed: u64) -> Self {
        TrainConfig {
            stage: 2,
            curriculum: (2..=12).collect(),
            ..TrainConfig::stage1(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Invalid(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.batch < 1 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if self.stage == 1 && self.epochs < 1 {
            return Err(Error::Invalid("stage 1 needs at least one epoch".into()));
        }
        if self.stage == 2 {
            if self.curriculum.is_empty() {
                return Err(Error::Invalid("stage 2 needs a curriculum".into()));
            }
            if self.curriculum.iter().any(|t| *t < 2) {
                return Err(Error::Invalid(
                    "stage-2 rollout lengths must be at least 2".into(),
                ));
            }
            if self.curriculum.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Invalid(
                    "curriculum must be strictly increasing".into(),
                ));
            }
        }
        Ok(())
    }

    /// Stable fingerprint for checkpoint/resume compatibility checks.
    pub fn fingerprint(&self) -> u64 {
        let text = format!(
            "stage={};hidden={:?};epochs={};curriculum={:?};batch={};lr_peak={:e};warmup={:e};floor={:e};lr2={:e};clip={:e};per_step={};seed={}",
            self.stage,
            self.hidden,
            self.epochs,
            self.curriculum,
            self.batch,
            self.lr_peak,
            self.warmup_frac,
            self.lr_floor,
            self.lr_stage2,
            self.grad_clip,
            self.logvar_per_step,
            self.seed
        );
        io::fnv1a(text.as_bytes())
    }

    /// Effective stage-2 epoch sequence: curriculum plus the final length
    /// repeated once.
    pub fn stage2_lengths(&self) -> Vec<usize> {
        let mut lengths = self.curriculum.clone();
        if let Some(last) = lengths.last().copied() {
            lengths.push(last);
        }
        lengths
    }
}

/// Learning-rate schedule resolved against a concrete step budget.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    pub stage: u8,
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub floor: f64,
    pub stage2_lr: f64,
}

impl LrSchedule {
    pub fn from_config(cfg: &TrainConfig, total_steps: u64) -> Self {
        LrSchedule {
            stage: cfg.stage,
            peak: cfg.lr_peak,
            warmup_steps: (cfg.warmup_frac * total_steps as f64).round() as u64,
            total_steps,
            floor: cfg.lr_floor,
            stage2_lr: cfg.lr_stage2,
        }
    }
}

/// Stage 1: linear warm-up then cosine decay; stage 2: constant.
pub fn lr_schedule(step: u64, sched: &LrSchedule) -> f64 {
    match sched.stage {
        1 => warmup_cosine(
            step,
            sched.peak,
            sched.warmup_steps,
            sched.total_steps,
            sched.floor,
        ),
        _ => sched.stage2_lr,
    }
}

/// One JSONL training-log record.
#[derive(Clone, Debug)]
pub struct LogRecord {
    pub step: u64,
    pub stage: u8,
    pub rollout_len: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl LogRecord {
    pub fn to_json(&self) -> String {
        format!(
            "{{\"step\":{},\"stage\":{},\"rollout_len\":{},\"loss\":{},\"grad_norm\":{},\"lr\":{},\"wall_ms\":{}}}",
            self.step, self.stage, self.rollout_len, self.loss, self.grad_norm, self.lr, self.wall_ms
        )
    }
}

/// In-memory record of one training run.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<LogRecord>,
    /// Rollout length of each completed epoch, in order.
    pub lengths: Vec<usize>,
    /// Digest over every batch index consumed, for loss-swap isolation.
    pub schedule_digest: u64,
    pub warnings: Vec<String>,
}

impl TrainReport {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            writeln!(w, "{}", r.to_json())?;
        }
        Ok(())
    }
}

/// Deterministic batch schedule: a seeded shuffle of 0..n_items chunked by
/// batch size. Depends only on (seed, epoch index, n_items, batch).
pub fn batch_schedule(seed: u64, epoch: u64, n_items: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut rng = Rng::new(seed ^ epoch.wrapping_mul(0x9e3779b97f4a7c15), stream_tag("batch-schedule"));
    rng.shuffle(&mut order);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn digest_schedule(acc: &mut u64, batches: &[Vec<usize>]) {
    for b in batches {
        for idx in b {
            let bytes = (*idx as u64).to_le_bytes();
            for byte in bytes {
                *acc ^= byte as u64;
                *acc = acc.wrapping_mul(0x100000001b3);
            }
        }
    }
}

/// Everything needed to resume or evaluate a training run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub forecast: ForecastParams,
    pub optimizer: OptimizerState,
    pub logvars: Option<LogVarParams>,
    /// Per-component single-step residual variance at the end of stage 1.
    pub residual_variance: Vec<f64>,
    pub config_hash: u64,
    pub seed: u64,
    pub steps: u64,
    pub epochs_done: u32,
}

impl Checkpoint {
    /// Checkpoint file: magic "WCCK" wrapping the forecast body, optimizer
    /// state, log-variance table, residual variances and run counters.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        io::write_magic(&mut w, b"WCCK")?;
        self.forecast.write_body(&mut w)?;
        self.optimizer.write_to(&mut w)?;
        match &self.logvars {
            Some(lv) => {
                io::write_u8(&mut w, 1)?;
                io::write_u32(&mut w, lv.dim as u32)?;
                io::write_u32(&mut w, lv.steps.unwrap_or(0) as u32)?;
                io::write_u32(&mut w, lv.values.len() as u32)?;
                io::write_f64_slice(&mut w, &lv.values)?;
            }
            None => io::write_u8(&mut w, 0)?,
        }
        io::write_u32(&mut w, self.residual_variance.len() as u32)?;
        io::write_f64_slice(&mut w, &self.residual_variance)?;
        io::write_u64(&mut w, self.config_hash)?;
        io::write_u64(&mut w, self.seed)?;
        io::write_u64(&mut w, self.steps)?;
        io::write_u32(&mut w, self.epochs_done)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        io::read_magic(&mut r, b"WCCK")?;
        let forecast = ForecastParams::read_body(&mut r)?;
        let optimizer = OptimizerState::read_from(&mut r)?;
        let logvars = match io::read_u8(&mut r)? {
            0 => None,
            1 => {
                let dim = io::read_u32(&mut r)? as usize;
                let steps = io::read_u32(&mut r)? as usize;
                let len = io::read_u32(&mut r)? as usize;
                let values = io::read_f64_vec(&mut r, len)?;
                Some(if steps == 0 {
                    LogVarParams::tied(values)
                        .map_err(|e| Error::Corrupt(format!("log-variance table: {e}")))?
                } else {
                    LogVarParams::per_step(values, dim, steps)
                        .map_err(|e| Error::Corrupt(format!("log-variance table: {e}")))?
                })
            }
            other => return Err(Error::Corrupt(format!("bad log-variance flag {other}"))),
        };
        let rv_len = io::read_u32(&mut r)? as usize;
        let residual_variance = io::read_f64_vec(&mut r, rv_len)?;
        let config_hash = io::read_u64(&mut r)?;
        let seed = io::read_u64(&mut r)?;
        let steps = io::read_u64(&mut r)?;
        let epochs_done = io::read_u32(&mut r)?;
        Ok(Checkpoint {
            forecast,
            optimizer,
            logvars,
            residual_variance,
            config_hash,
            seed,
            steps,
            epochs_done,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

/// Template for a multi-source observation stream; concrete values are
/// extracted from each training segment.
#[derive(Clone, Debug)]
pub enum SourceTemplate {
    Discrete { indices: Vec<usize>, weight: f64 },
    ContinuousIdentity { weight: f64 },
    ContinuousAe { weight: f64 },
}

/// Stage-2 training objective with its supporting artifacts.
#[derive(Clone, Debug)]
pub enum Objective {
    ModelCov(CovarianceModel),
    EigenWeighted(EigenDecomp),
    Identity,
    LatentWeighted(AEParams, WeightTable),
    LatentNll(AEParams),
    ModelNll,
    MultiSource {
        templates: Vec<SourceTemplate>,
        ae: Option<AEParams>,
    },
}

impl Objective {
    pub fn kind(&self) -> LossKind {
        match self {
            Objective::ModelCov(_) => LossKind::ModelCov,
            Objective::EigenWeighted(_) => LossKind::EigenWeighted,
            Objective::Identity => LossKind::Identity,
            Objective::LatentWeighted(..) => LossKind::LatentWeighted,
            Objective::LatentNll(_) => LossKind::LatentNll,
            Objective::ModelNll => LossKind::ModelNll,
            Objective::MultiSource { .. } => LossKind::MultiSource,
        }
    }

    fn ae(&self) -> Option<&AEParams> {
        match self {
            Objective::LatentWeighted(ae, _) | Objective::LatentNll(ae) => Some(ae),
            Objective::MultiSource { ae, .. } => ae.as_ref(),
            _ => None,
        }
    }

    fn instantiate_sources(
        &self,
        seg: &Segment,
        t: usize,
    ) -> Result<Option<Vec<ObservationSource>>> {
        let Objective::MultiSource { templates, ae } = self else {
            return Ok(None);
        };
        let mut out = Vec::with_capacity(templates.len());
        let n = seg.init().len();
        for (idx, tmpl) in templates.iter().enumerate() {
            let src = match tmpl {
                SourceTemplate::Discrete { indices, weight } => ObservationSource {
                    name: format!("discrete-{idx}"),
                    operator: ObsOperator::Discrete {
                        indices: indices.clone(),
                    },
                    values: (1..=t)
                        .map(|i| indices.iter().map(|j| seg.target(i).values()[*j]).collect())
                        .collect(),
                    weights: WeightTable::tied(vec![*weight; indices.len()])?,
                    error_model: ErrorModel::UnitDiagonal,
                },
                SourceTemplate::ContinuousIdentity { weight } => ObservationSource {
                    name: format!("continuous-{idx}"),
                    operator: ObsOperator::Continuous {
                        encoder: ContinuousEncoder::Identity,
                    },
                    values: (1..=t).map(|i| seg.target(i).values().to_vec()).collect(),
                    weights: WeightTable::tied(vec![*weight; n])?,
                    error_model: ErrorModel::UnitDiagonal,
                },
                SourceTemplate::ContinuousAe { weight } => {
                    let ae = ae.as_ref().ok_or_else(|| {
                        Error::Invalid("encoded source requires an autoencoder".into())
                    })?;
                    ObservationSource {
                        name: format!("continuous-{idx}"),
                        operator: ObsOperator::Continuous {
                            encoder: ContinuousEncoder::Ae(ae.clone()),
                        },
                        values: (1..=t).map(|i| seg.target(i).values().to_vec()).collect(),
                        weights: WeightTable::tied(vec![*weight; ae.latent_dim()])?,
                        error_model: ErrorModel::UnitDiagonal,
                    }
                }
            };
            out.push(src);
        }
        Ok(Some(out))
    }
}

/// Per-component single-step residual variance of a model over adjacent
/// pairs, in model space.
pub fn residual_variance(states: &[StateVec], fc: &ForecastParams) -> Result<Vec<f64>> {
    if states.len() < 2 {
        return Err(Error::Invalid("need at least one adjacent pair".into()));
    }
    let n = states[0].len();
    let mut acc = vec![0.0; n];
    for w in states.windows(2) {
        let pred = forecast::step(&w[0], fc)?;
        for i in 0..n {
            let d = w[1].values()[i] - pred.values()[i];
            acc[i] += d * d;
        }
    }
    let count = (states.len() - 1) as f64;
    Ok(acc.into_iter().map(|v| v / count).collect())
}

/// Same statistic after encoding both sides, in latent space.
pub fn latent_residual_variance(
    states: &[StateVec],
    fc: &ForecastParams,
    ae: &AEParams,
) -> Result<Vec<f64>> {
    if states.len() < 2 {
        return Err(Error::Invalid("need at least one adjacent pair".into()));
    }
    let m = ae.latent_dim();
    let mut acc = vec![0.0; m];
    for w in states.windows(2) {
        let pred = forecast::step(&w[0], fc)?;
        let zt = ae.encode(&w[1])?;
        let zp = ae.encode(&pred)?;
        for i in 0..m {
            let d = zt.values()[i] - zp.values()[i];
            acc[i] += d * d;
        }
    }
    let count = (states.len() - 1) as f64;
    Ok(acc.into_iter().map(|v| v / count).collect())
}

/// Stage 1: single-step model-space NLL over all adjacent reanalysis pairs.
///
/// `norm` is normally the autoencoder's normalization so both models share
/// statistics; when absent it is fitted on the training states.
pub fn train_stage1(
    states: &[StateVec],
    dt_between: f64,
    norm: Option<&Normalization>,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::Invalid("train_stage1 requires a stage-1 config".into()));
    }
    if states.len() < 2 {
        return Err(Error::Invalid("need at least one adjacent pair".into()));
    }
    let n = states[0].len();
    let norm = match norm {
        Some(nrm) => nrm.clone(),
        None => {
            let rows: Vec<&[f64]> = states.iter().map(|s| s.values()).collect();
            Normalization::fit(&rows)?
        }
    };
    let mut rng = Rng::from_tag(cfg.seed, "forecast-init");
    let mut fc = ForecastParams::init(n, &cfg.hidden, norm, dt_between, &mut rng)?;

    let logvars = LogVarParams::tied(vec![0.0; n])?;
    let mut work = fc.params.clone();
    work.insert(LOGVAR_PARAM, logvars.tensor());
    let mut opt = OptimizerState::new(&work);

    let pairs = states.len() - 1;
    let steps_per_epoch = pairs.div_ceil(cfg.batch) as u64;
    let total_steps = cfg.epochs as u64 * steps_per_epoch;
    let sched = LrSchedule::from_config(cfg, total_steps);

    let mut report = TrainReport::default();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs as u64 {
        let batches = batch_schedule(cfg.seed, epoch, pairs, cfg.batch);
        digest_schedule(&mut report.schedule_digest, &batches);
        for batch in &batches {
            let started = Instant::now();
            let lr = lr_schedule(step, &sched);
            let mut tape = Tape::new();
            let nodes = tape.bind_params(&work)?;
            let mut fc_nodes = nodes.clone();
            let lv_node = fc_nodes
                .remove(LOGVAR_PARAM)
                .expect("logvar bound with parameters");
            fc.params = losses_store(&work);
            let bound = forecast::BoundForecast::from_nodes(&fc, fc_nodes);
            let mut total = None;
            for &pair_idx in batch {
                let seg = Segment::new(&states[pair_idx..=pair_idx + 1])?;
                let term = losses::model_nll_loss(&mut tape, &bound, &seg, &logvars, lv_node)?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, term)?,
                    None => term,
                });
            }
            let root = total.expect("non-empty batch");
            let loss = tape.value(root).item()?;
            let grads = tape.backward(root, &work)?;
            let gnorm = grad_norm(&grads);
            if !loss.is_finite() || !gnorm.is_finite() {
                return Err(Error::Divergence {
                    step: step as usize,
                    loss,
                    grad_norm: gnorm,
                });
            }
            adam_step(&mut work, &grads, &mut opt, lr)?;
            step += 1;
            report.records.push(LogRecord {
                step,
                stage: 1,
                rollout_len: 1,
                loss,
                grad_norm: gnorm,
                lr,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
        report.lengths.push(1);
    }

    fc.params = losses_store(&work);
    fc.stage = Stage::Stage1;
    let learned_logvars = LogVarParams::tied(work.get(LOGVAR_PARAM).unwrap().data().to_vec())?;
    let residual_variance = residual_variance(states, &fc)?;
    let ckpt = Checkpoint {
        forecast: fc,
        optimizer: opt,
        logvars: Some(learned_logvars),
        residual_variance,
        config_hash: cfg.fingerprint(),
        seed: cfg.seed,
        steps: step,
        epochs_done: cfg.epochs as u32,
    };
    Ok((ckpt, report))
}

/// The working store minus the log-variance entry.
fn losses_store(work: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in work.iter() {
        if name != LOGVAR_PARAM {
            out.insert(name, t.clone());
        }
    }
    out
}

/// Stage 2: rollout curriculum fine-tuning with a selectable objective.
/// Accepts a stage-1 checkpoint (fresh start) or a stage-2 checkpoint with
/// the same config hash (resume after `epochs_done` curriculum entries).
pub fn train_stage2(
    states: &[StateVec],
    start: &Checkpoint,
    objective: &Objective,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(Error::Invalid("train_stage2 requires a stage-2 config".into()));
    }
    let allowed = [
        LossKind::LatentNll,
        LossKind::ModelNll,
        LossKind::LatentWeighted,
        LossKind::ModelCov,
        LossKind::Identity,
        LossKind::EigenWeighted,
        LossKind::MultiSource,
    ];
    if !allowed.contains(&objective.kind()) {
        return Err(Error::Invalid(format!(
            "loss kind {} is not selectable in stage 2",
            objective.kind().name()
        )));
    }
    let mut report = TrainReport::default();
    let resume_from = match &start.forecast.stage {
        Stage::Stage1 => 0u32,
        Stage::Stage2 { loss_kind } => {
            if loss_kind != objective.kind().name() {
                return Err(Error::Invalid(format!(
                    "cannot resume a {loss_kind} run with objective {}",
                    objective.kind().name()
                )));
            }
            if start.config_hash != cfg.fingerprint() {
                report
                    .warnings
                    .push("resuming with a different configuration hash".into());
            }
            start.epochs_done
        }
        Stage::Untrained => {
            return Err(Error::Invalid(
                "stage 2 requires a stage-1 checkpoint".into(),
            ))
        }
    };

    let lengths = cfg.stage2_lengths();
    if (resume_from as usize) >= lengths.len() {
        return Err(Error::Invalid("checkpoint already covers the curriculum".into()));
    }
    let max_len = *lengths.iter().max().unwrap();
    if states.len() <= max_len {
        return Err(Error::Invalid(format!(
            "training range of {} states cannot host rollouts of length {max_len}",
            states.len()
        )));
    }

    let mut fc = start.forecast.clone();
    let needs_logvars = objective.kind().needs_logvars();
    let logvars = if needs_logvars {
        Some(initial_logvars(states, start, objective, cfg, max_len)?)
    } else {
        None
    };

    let mut work = fc.params.clone();
    if let Some(lv) = &logvars {
        work.insert(LOGVAR_PARAM, lv.tensor());
    }
    let mut opt = if resume_from > 0 {
        start.optimizer.clone()
    } else {
        OptimizerState::new(&work)
    };

    // Prepared constants reused across segments.
    let prepared_inv: Option<(Vec<f64>, usize)> = match objective {
        Objective::ModelCov(cov) => Some((cov.inverse()?, cov.n())),
        _ => None,
    };

    let mut step = start.steps * u64::from(resume_from > 0);
    let stop_after = cfg
        .epoch_limit
        .map(|l| l as usize)
        .unwrap_or(lengths.len())
        .min(lengths.len());
    let mut epochs_done = resume_from as usize;
    for (epoch_idx, t) in lengths.iter().enumerate().skip(resume_from as usize) {
        if epoch_idx >= stop_after {
            break;
        }
        let t = *t;
        let n_starts = states.len() - t;
        let batches = batch_schedule(cfg.seed, epoch_idx as u64, n_starts, cfg.batch);
        digest_schedule(&mut report.schedule_digest, &batches);
        for batch in &batches {
            let started = Instant::now();
            let lr = cfg.lr_stage2;
            let mut tape = Tape::new();
            let nodes = tape.bind_params(&work)?;
            let mut fc_nodes = nodes.clone();
            let lv_node = fc_nodes.remove(LOGVAR_PARAM);
            fc.params = losses_store(&work);
            let bound = forecast::BoundForecast::from_nodes(&fc, fc_nodes);
            let bound_ae = objective.ae().map(|ae| ae.bind(&mut tape));
            let mut total = None;
            for &start_idx in batch {
                let seg = Segment::new(&states[start_idx..=start_idx + t])?;
                let term = match objective {
                    Objective::ModelCov(_) => {
                        let (inv, n) = prepared_inv.as_ref().expect("prepared above");
                        losses::model_cov_loss_prepared(&mut tape, &bound, &seg, inv, *n)?
                    }
                    Objective::EigenWeighted(eig) => {
                        losses::eigen_weighted_loss(&mut tape, &bound, &seg, eig)?
                    }
                    Objective::Identity => losses::identity_loss(&mut tape, &bound, &seg)?,
                    Objective::LatentWeighted(ae, k_table) => losses::latent_weighted_loss(
                        &mut tape,
                        &bound,
                        bound_ae.as_ref().expect("latent objective binds its AE"),
                        &seg,
                        k_table,
                        ae.latent_dim(),
                    )?,
                    Objective::LatentNll(ae) => losses::latent_nll_loss(
                        &mut tape,
                        &bound,
                        bound_ae.as_ref().expect("latent objective binds its AE"),
                        &seg,
                        logvars.as_ref().expect("nll logvars exist"),
                        lv_node.expect("nll logvars bound"),
                        ae.latent_dim(),
                    )?,
                    Objective::ModelNll => losses::model_nll_loss(
                        &mut tape,
                        &bound,
                        &seg,
                        logvars.as_ref().expect("nll logvars exist"),
                        lv_node.expect("nll logvars bound"),
                    )?,
                    Objective::MultiSource { .. } => {
                        let sources = objective
                            .instantiate_sources(&seg, t)?
                            .expect("multi-source objective");
                        losses::multi_source_loss(&mut tape, &bound, seg.init(), &sources, t)?
                    }
                };
                total = Some(match total {
                    Some(acc) => tape.add(acc, term)?,
                    None => term,
                });
            }
            let root = total.expect("non-empty batch");
            let loss = tape.value(root).item()?;
            let mut grads = tape.backward(root, &work)?;
            let gnorm = clip_grads(&mut grads, cfg.grad_clip);
            if !loss.is_finite() || !gnorm.is_finite() {
                return Err(Error::Divergence {
                    step: step as usize,
                    loss,
                    grad_norm: gnorm,
                });
            }
            adam_step(&mut work, &grads, &mut opt, lr)?;
            step += 1;
            report.records.push(LogRecord {
                step,
                stage: 2,
                rollout_len: t,
                loss,
                grad_norm: gnorm,
                lr,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
        report.lengths.push(t);
        epochs_done = epoch_idx + 1;
    }

    fc.params = losses_store(&work);
    fc.stage = Stage::Stage2 {
        loss_kind: objective.kind().name().to_string(),
    };
    let final_logvars = match (&logvars, work.get(LOGVAR_PARAM)) {
        (Some(lv), Some(t)) => Some(LogVarParams {
            dim: lv.dim,
            steps: lv.steps,
            values: t.data().to_vec(),
        }),
        _ => start.logvars.clone(),
    };
    let ckpt = Checkpoint {
        forecast: fc,
        optimizer: opt,
        logvars: final_logvars,
        residual_variance: start.residual_variance.clone(),
        config_hash: cfg.fingerprint(),
        seed: cfg.seed,
        steps: step,
        epochs_done: epochs_done as u32,
    };
    Ok((ckpt, report))
}

/// Log-variance initialization: model-space NLL warm-starts from the
/// stage-1 table (or residual variances), latent NLL from the stage-1
/// model's latent residual variance.
fn initial_logvars(
    states: &[StateVec],
    start: &Checkpoint,
    objective: &Objective,
    cfg: &TrainConfig,
    max_len: usize,
) -> Result<LogVarParams> {
    let tied = match objective {
        Objective::ModelNll => match &start.logvars {
            Some(lv) if lv.dim == start.forecast.dim() => lv.clone(),
            _ => LogVarParams::from_residual_variance(&start.residual_variance)?,
        },
        Objective::LatentNll(ae) => {
            let vars = latent_residual_variance(states, &start.forecast, ae)?;
            LogVarParams::from_residual_variance(&vars)?
        }
        _ => return Err(Error::Invalid("objective carries no log-variances".into())),
    };
    if cfg.logvar_per_step {
        let mut values = Vec::with_capacity(tied.dim * max_len);
        for _ in 0..max_len {
            values.extend_from_slice(&tied.values);
        }
        LogVarParams::per_step(values, tied.dim, max_len)
    } else {
        Ok(tied)
    }
}
