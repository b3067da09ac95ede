//! The training loss family: covariance-weighted, diagonal-weighted,
//! eigen-projection, identity, latent-space, negative-log-likelihood and
//! multi-source objectives over forecast parameters, plus the reference
//! weak-constraint 4DVar cost they all descend from.
//!
//! Every rollout loss is a scalar tape node differentiable through the
//! forecast composition. Autoencoder parameters are always bound frozen:
//! gradients flow through the encoder into the forecast, never into the AE.
//!
//! The covariance-weighted loss evaluates εᵀA⁻¹ε through the dense inverse,
//! while the eigen-projection loss goes through Uᵀε and λ⁻¹ weights; the two
//! are algebraically identical, and keeping the routes separate is what
//! makes that identity a real check.

use crate::autoencoder::{AEParams, BoundAe, LatentCov};
use crate::dynamics::{StateVec, Trajectory};
use crate::error::{Error, Result};
use crate::forecast::{BoundForecast, ForecastParams};
use crate::linalg;
use crate::reanalysis::{CovarianceModel, EigenDecomp};
use crate::tensor::{NodeId, Tape, Tensor};

/// Names for the loss family, stable across config, checkpoints and logs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    FullWc4dvar,
    ModelCov,
    ModelDiag,
    EigenWeighted,
    Identity,
    LatentCov,
    LatentWeighted,
    LatentNll,
    ModelNll,
    MultiSource,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::FullWc4dvar => "full-wc4dvar",
            LossKind::ModelCov => "model-cov",
            LossKind::ModelDiag => "model-diag",
            LossKind::EigenWeighted => "eigen-weighted",
            LossKind::Identity => "identity",
            LossKind::LatentCov => "latent-cov",
            LossKind::LatentWeighted => "latent-weighted",
            LossKind::LatentNll => "latent-nll",
            LossKind::ModelNll => "model-nll",
            LossKind::MultiSource => "multi-source",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "full-wc4dvar" => LossKind::FullWc4dvar,
            "model-cov" => LossKind::ModelCov,
            "model-diag" => LossKind::ModelDiag,
            "eigen-weighted" => LossKind::EigenWeighted,
            "identity" => LossKind::Identity,
            "latent-cov" => LossKind::LatentCov,
            "latent-weighted" => LossKind::LatentWeighted,
            "latent-nll" => LossKind::LatentNll,
            "model-nll" => LossKind::ModelNll,
            "multi-source" => LossKind::MultiSource,
            other => return Err(Error::Invalid(format!("unknown loss kind {other:?}"))),
        })
    }

    /// Losses evaluated through the autoencoder.
    pub fn needs_ae(&self) -> bool {
        matches!(
            self,
            LossKind::LatentCov | LossKind::LatentWeighted | LossKind::LatentNll
        )
    }

    /// Losses with learned log-variances.
    pub fn needs_logvars(&self) -> bool {
        matches!(self, LossKind::LatentNll | LossKind::ModelNll)
    }
}

/// One training window: states[0] is the rollout start, states[1..=T] the
/// targets.
pub struct Segment<'a> {
    states: &'a [StateVec],
}

impl<'a> Segment<'a> {
    pub fn new(states: &'a [StateVec]) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::Invalid(
                "segment needs an initial state and at least one target".into(),
            ));
        }
        Ok(Segment { states })
    }

    pub fn from_trajectory(traj: &'a Trajectory, start: usize, t: usize) -> Result<Self> {
        if t < 1 {
            return Err(Error::Invalid("rollout length must be at least 1".into()));
        }
        if start + t >= traj.len() {
            return Err(Error::Invalid(format!(
                "segment [{start}, {}] exceeds trajectory length {}",
                start + t,
                traj.len()
            )));
        }
        Segment::new(&traj.states[start..=start + t])
    }

    pub fn t(&self) -> usize {
        self.states.len() - 1
    }

    pub fn init(&self) -> &StateVec {
        &self.states[0]
    }

    /// Target for rollout step i (1-based).
    pub fn target(&self, i: usize) -> &StateVec {
        &self.states[i]
    }
}

/// Per-component weights, shared across steps or one row per step.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTable {
    pub dim: usize,
    /// None = shared across steps; Some(T) = step-major rows.
    pub steps: Option<usize>,
    pub values: Vec<f64>,
}

impl WeightTable {
    pub fn tied(values: Vec<f64>) -> Result<Self> {
        Self::validate(&values)?;
        Ok(WeightTable {
            dim: values.len(),
            steps: None,
            values,
        })
    }

    pub fn per_step(values: Vec<f64>, dim: usize, t: usize) -> Result<Self> {
        if values.len() != dim * t {
            return Err(Error::Invalid(format!(
                "weight table length {} does not match {dim}×{t}",
                values.len()
            )));
        }
        Self::validate(&values)?;
        Ok(WeightTable {
            dim,
            steps: Some(t),
            values,
        })
    }

    pub fn uniform(dim: usize) -> Self {
        WeightTable {
            dim,
            steps: None,
            values: vec![1.0; dim],
        }
    }

    fn validate(values: &[f64]) -> Result<()> {
        if values.iter().any(|w| *w <= 0.0 || !w.is_finite()) {
            return Err(Error::Invalid("weights must be positive and finite".into()));
        }
        Ok(())
    }

    /// Row for rollout step i (1-based).
    pub fn step(&self, i: usize) -> Result<&[f64]> {
        match self.steps {
            None => Ok(&self.values),
            Some(t) => {
                if i < 1 || i > t {
                    return Err(Error::Invalid(format!(
                        "weight table has {t} steps, requested step {i}"
                    )));
                }
                Ok(&self.values[(i - 1) * self.dim..i * self.dim])
            }
        }
    }

    fn check_compatible(&self, dim: usize, t: usize, what: &str) -> Result<()> {
        if self.dim != dim {
            return Err(Error::Invalid(format!(
                "{what} weight dimension {} does not match {dim}",
                self.dim
            )));
        }
        if let Some(steps) = self.steps {
            if steps != t {
                return Err(Error::Invalid(format!(
                    "{what} weight table has {steps} steps, rollout has {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Learned log σ² table for the NLL losses, tied across steps or per step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogVarParams {
    pub dim: usize,
    /// None = one shared row; Some(T) = step-major rows.
    pub steps: Option<usize>,
    pub values: Vec<f64>,
}

/// Name under which log-variances live in the trainable parameter store.
pub const LOGVAR_PARAM: &str = "nll.logvar";

impl LogVarParams {
    pub fn tied(values: Vec<f64>) -> Result<Self> {
        Self::validate(&values)?;
        Ok(LogVarParams {
            dim: values.len(),
            steps: None,
            values,
        })
    }

    pub fn per_step(values: Vec<f64>, dim: usize, t: usize) -> Result<Self> {
        if values.len() != dim * t {
            return Err(Error::Invalid(format!(
                "log-variance table length {} does not match {dim}×{t}",
                values.len()
            )));
        }
        Self::validate(&values)?;
        Ok(LogVarParams {
            dim,
            steps: Some(t),
            values,
        })
    }

    /// Shared row initialized from per-component residual variances.
    pub fn from_residual_variance(variances: &[f64]) -> Result<Self> {
        Self::tied(
            variances
                .iter()
                .map(|v| v.max(1e-12).ln())
                .collect::<Vec<f64>>(),
        )
    }

    fn validate(values: &[f64]) -> Result<()> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(
                "log-variance table must be non-empty and finite".into(),
            ));
        }
        Ok(())
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::vector(self.values.clone())
    }

    /// Tape slice for rollout step i (1-based) given the bound flat node.
    pub fn step_node(&self, tape: &mut Tape, node: NodeId, i: usize) -> Result<NodeId> {
        match self.steps {
            None => Ok(node),
            Some(t) => {
                if i < 1 || i > t {
                    return Err(Error::Invalid(format!(
                        "log-variance table has {t} steps, requested step {i}"
                    )));
                }
                tape.slice(node, (i - 1) * self.dim, self.dim)
            }
        }
    }

    fn check_compatible(&self, dim: usize, t: usize) -> Result<()> {
        if self.dim != dim {
            return Err(Error::Invalid(format!(
                "log-variance dimension {} does not match {dim}",
                self.dim
            )));
        }
        if let Some(steps) = self.steps {
            if steps != t {
                return Err(Error::Invalid(format!(
                    "log-variance table has {steps} steps, rollout has {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Rollout plus per-step state-space residuals target − prediction.
fn rollout_residuals(
    tape: &mut Tape,
    fc: &BoundForecast,
    seg: &Segment,
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    let t = seg.t();
    let x0 = tape.input_vector(seg.init().values());
    let preds = fc.rollout(tape, x0, t)?;
    let mut residuals = Vec::with_capacity(t);
    for i in 1..=t {
        let target = tape.input_vector(seg.target(i).values());
        residuals.push(tape.sub(target, preds[i - 1])?);
    }
    Ok((preds, residuals))
}

fn add_total(tape: &mut Tape, total: Option<NodeId>, term: NodeId) -> Result<Option<NodeId>> {
    Ok(Some(match total {
        Some(acc) => tape.add(acc, term)?,
        None => term,
    }))
}

/// Σᵢ εᵢᵀ A⁻¹ εᵢ with the dense inverse of the rollout-error covariance.
pub fn model_cov_loss(
    tape: &mut Tape,
    fc: &BoundForecast,
    seg: &Segment,
    cov: &CovarianceModel,
) -> Result<NodeId> {
    let a_inv = cov.inverse()?;
    model_cov_loss_prepared(tape, fc, seg, &a_inv, cov.n())
}

/// Same as [`model_cov_loss`] with the inverse precomputed by the caller.
pub fn model_cov_loss_prepared(
    tape: &mut Tape,
    fc: &BoundForecast,
    seg: &Segment,
    a_inv: &[f64],
    n: usize,
) -> Result<NodeId> {
    let (_, residuals) = rollout_residuals(tape, fc, seg)?;
    let inv = tape.input(Tensor::matrix(n, n, a_inv.to_vec())?);
    let mut total = None;
    for r in residuals {
        let w = tape.matmul(r, inv)?;
        let prod = tape.mul(w, r)?;
        let q = tape.sum(prod);
        total = add_total(tape, total, q)?;
    }
    Ok(total.expect("at least one step"))
}

/// Σᵢ Σⱼ w_{j,i} ε_{j,i}² with a diagonal weight table.
pub fn model_diag_loss(
    tape: &mut Tape,
    fc: &BoundForecast,
    seg: &Segment,
    weights: &WeightTable,
) -> Result<NodeId> {
    let t = seg.t();
    let n = seg.init().len();
    weights.check_compatible(n, t, "model-diag")?;
    let (_, residuals) = rollout_residuals(tape, fc, seg)?;
    let mut total = None;
    for (i, r) in residuals.into_iter().enumerate() {
        let w = tape.input_vector(weights.step(i + 1)?);
        let r2 = tape.square(r);
        let prod = tape.mul(w, r2)?;
        let s = tape.sum(prod);
        total = add_total(tape, total, s)?;
    }
    Ok(total.expect("at least one step"))
}

/// Σᵢ Σ_k λ_k⁻¹ (u_kᵀ εᵢ)²: residual projections onto the eigenbasis with
/// inverse-eigenvalue weights.
pub fn eigen_weighted_loss(
    tape: &mut Tape,
    fc: &BoundForecast,
    seg: &Segment,
    eig: &EigenDecomp,
) -> Result<NodeId> {
    if let Some(bad) = eig.eigvals().iter().find(|l| **l <= 0.0) {
        return Err(Error::Domain(format!(
            "eigen-weighted loss requires positive eigenvalues, found {bad}"
        )));
    }
    let n = eig.n();
    let (_, residuals) = rollout_residuals(tape, fc, seg)?;
    let u = tape.input(Tensor::matrix(n, n, eig.eigvecs().to_vec())?);
    let inv_lambda: Vec<f64> = eig.eigvals().iter().map(|l| 1.0 / l).collect();
    let invl = tape.input_vector(&inv_lambda);
    let mut total = None;
    for r in residuals {
        let alpha = tape.matmul(r, u)?;
        let a2 = tape.square(alpha);
        let weighted = tape.mul(a2, invl)?;
        let s = tape.sum(weighted);
        total = add_total(tape, total, s)?;
    }
    Ok(total.expect("at least one step"))
}

/// Σᵢ ‖εᵢ‖²: the equal-weight objective.
pub fn identity_loss(tape: &mut Tape, fc: &BoundForecast, seg: &Segment) -> Result<NodeId> {
    let (_, residuals) = rollout_residuals(tape, fc, seg)?;
    let mut total = None;
    for r in residuals {
        let r2 = tape.square(r);
        let s = tape.sum(r2);
        total = add_total(tape, total, s)?;
    }
    Ok(total.expect("at least one step"))
}

/// Σᵢ ‖E(x_{a,i}) − E(pred_i)‖²_{A_z⁻¹} with the dense latent inverse.
pub fn latent_cov_loss(
    tape: &mut Tape,
    fc: &BoundForecast,
    ae: &BoundAe,
    seg: &Segment,
    latent_cov: &LatentCov,
) -> Result<NodeId> {
    let az = latent_cov.model()?;
    let az_inv = az.inverse()?;
    let m = latent_cov.m;
    let t = seg.t();
    let x0 = tape.input_vector(seg.init().values());
    let preds = fc.rollout(tape, x0, t)?;
    let inv = tape.input(Tensor::matrix(m, m, az_inv)?);
    let mut total = None;
    for i in 1..=t {
        let target = tape.input_vector(seg.target(i).values());
        let zt = ae.encode(tape, target)?;
        let zp = ae.encode(tape, preds[i - 1])?;
        let dz = tape.sub(zt, zp)?;
        let w = tape.matmul(dz, inv)?;
        let prod = tape.mul(w, dz)?;
        let q = tape.sum(prod);
        total = add_total(tape, total, q)?;
    }
    Ok(total.expect("at least one step"))
}

/// Σᵢ Σⱼ k_{j,i} (E⁽ʲ⁾(x_{a,i}) − E⁽ʲ⁾(pred_i))².
pub fn latent_weighted_loss(
    tape: &mut Tape,
    fc: &BoundForecast,
    ae: &BoundAe,
    seg: &Segment,
    k_table: &WeightTable,
    latent_dim: usize,
) -> Result<NodeId> {
    let t = seg.t();
    k_table.check_compatible(latent_dim, t, "latent")?;
    let x0 = tape.input_vector(seg.init().values());
    let preds = fc.rollout(tape, x0, t)?;
    let mut total = None;
    for i in 1..=t {
        let target = tape.input_vector(seg.target(i).values());
        let zt = ae.encode(tape, target)?;
        let zp = ae.encode(tape, preds[i - 1])?;
        let dz = tape.sub(zt, zp)?;
        let k = tape.input_vector(k_table.step(i)?);
        let dz2 = tape.square(dz);
        let prod = tape.mul(k, dz2)?;
        let s = tape.sum(prod);
        total = add_total(tape, total, s)?;
    }
    Ok(total.expect("at least one step"))
}

/// Σᵢ Σⱼ [exp(−log σ²_{j,i})·r_{j,i}² + log σ²_{j,i}] on latent residuals;
/// differentiable in both forecast parameters and log-variances.
pub fn latent_nll_loss(
    tape: &mut Tape,
    fc: &BoundForecast,
    ae: &BoundAe,
    seg: &Segment,
    logvars: &LogVarParams,
    logvar_node: NodeId,
    latent_dim: usize,
) -> Result<NodeId> {
    let t = seg.t();
    logvars.check_compatible(latent_dim, t)?;
    let x0 = tape.input_vector(seg.init().values());
    let preds = fc.rollout(tape, x0, t)?;
    let mut total = None;
    for i in 1..=t {
        let target = tape.input_vector(seg.target(i).values());
        let zt = ae.encode(tape, target)?;
        let zp = ae.encode(tape, preds[i - 1])?;
        let dz = tape.sub(zt, zp)?;
        let term = nll_term(tape, dz, logvars, logvar_node, i)?;
        total = add_total(tape, total, term)?;
    }
    Ok(total.expect("at least one step"))
}

/// The model-space NLL: same form with state-space residuals.
pub fn model_nll_loss(
    tape: &mut Tape,
    fc: &BoundForecast,
    seg: &Segment,
    logvars: &LogVarParams,
    logvar_node: NodeId,
) -> Result<NodeId> {
    let t = seg.t();
    logvars.check_compatible(seg.init().len(), t)?;
    let (_, residuals) = rollout_residuals(tape, fc, seg)?;
    let mut total = None;
    for (i, r) in residuals.into_iter().enumerate() {
        let term = nll_term(tape, r, logvars, logvar_node, i + 1)?;
        total = add_total(tape, total, term)?;
    }
    Ok(total.expect("at least one step"))
}

fn nll_term(
    tape: &mut Tape,
    residual: NodeId,
    logvars: &LogVarParams,
    logvar_node: NodeId,
    step: usize,
) -> Result<NodeId> {
    let lv = logvars.step_node(tape, logvar_node, step)?;
    let neg = tape.scale(lv, -1.0);
    let precision = tape.exp(neg);
    let r2 = tape.square(residual);
    let weighted = tape.mul(precision, r2)?;
    let data_term = tape.sum(weighted);
    let reg_term = tape.sum(lv);
    tape.add(data_term, reg_term)
}

/// How a source maps the model state into its observation space.
#[derive(Clone, Debug)]
pub enum ObsOperator {
    /// Index-subset selection.
    Discrete { indices: Vec<usize> },
    /// Full-state observation, compared raw or through an encoder.
    Continuous { encoder: ContinuousEncoder },
}

#[derive(Clone, Debug)]
pub enum ContinuousEncoder {
    Identity,
    Ae(AEParams),
}

/// Observation error statistics for the reference cost.
#[derive(Clone, Debug)]
pub enum ErrorModel {
    UnitDiagonal,
    Diagonal(Vec<f64>),
    Full(CovarianceModel),
}

impl ErrorModel {
    fn mahalanobis(&self, r: &[f64], source: &str) -> Result<f64> {
        match self {
            ErrorModel::UnitDiagonal => Ok(linalg::dot(r, r)),
            ErrorModel::Diagonal(vars) => {
                if vars.len() != r.len() {
                    return Err(Error::Invalid(format!(
                        "source {source}: error variance length {} does not match residual {}",
                        vars.len(),
                        r.len()
                    )));
                }
                if let Some(bad) = vars.iter().find(|v| **v <= 0.0) {
                    return Err(Error::Domain(format!(
                        "source {source}: non-positive observation variance {bad}"
                    )));
                }
                Ok(r.iter().zip(vars).map(|(ri, v)| ri * ri / v).sum())
            }
            ErrorModel::Full(cov) => cov.mahalanobis(r),
        }
    }
}

/// One observation source: extraction operator, per-step values, loss
/// weights, and the error model used by the reference cost.
#[derive(Clone, Debug)]
pub struct ObservationSource {
    pub name: String,
    pub operator: ObsOperator,
    /// Observed values for steps 1..=T.
    pub values: Vec<Vec<f64>>,
    /// w (discrete) or k (continuous) weights of the unified loss.
    pub weights: WeightTable,
    pub error_model: ErrorModel,
}

impl ObservationSource {
    fn check(&self, n: usize, t: usize) -> Result<()> {
        if self.values.len() != t {
            return Err(Error::Invalid(format!(
                "source {}: {} value rows for rollout length {t}",
                self.name,
                self.values.len()
            )));
        }
        let expect = match &self.operator {
            ObsOperator::Discrete { indices } => {
                if indices.is_empty() {
                    return Err(Error::Invalid(format!(
                        "source {}: empty index set",
                        self.name
                    )));
                }
                if let Some(bad) = indices.iter().find(|i| **i >= n) {
                    return Err(Error::Invalid(format!(
                        "source {}: index {bad} out of range for state dimension {n}",
                        self.name
                    )));
                }
                indices.len()
            }
            ObsOperator::Continuous { .. } => n,
        };
        for (i, row) in self.values.iter().enumerate() {
            if row.len() != expect {
                return Err(Error::Invalid(format!(
                    "source {}: value row {i} has length {}, operator expects {expect}",
                    self.name,
                    row.len()
                )));
            }
        }
        Ok(())
    }

    /// Dimension the weights must have (latent for encoded sources).
    fn weight_dim(&self, n: usize) -> usize {
        match &self.operator {
            ObsOperator::Discrete { indices } => indices.len(),
            ObsOperator::Continuous { encoder } => match encoder {
                ContinuousEncoder::Identity => n,
                ContinuousEncoder::Ae(ae) => ae.latent_dim(),
            },
        }
    }
}

/// Selection matrix for an index subset, applied as state·S.
fn selection_matrix(indices: &[usize], n: usize) -> Tensor {
    let cols = indices.len();
    let mut data = vec![0.0; n * cols];
    for (q, idx) in indices.iter().enumerate() {
        data[idx * cols + q] = 1.0;
    }
    Tensor::matrix(n, cols, data).expect("selection matrix dims")
}

/// Unified multi-source objective: discrete terms ‖w ⊙ (y − H(M))‖² plus
/// continuous terms ‖k ⊙ (E(y) − E(M))‖², summed over steps and sources.
pub fn multi_source_loss(
    tape: &mut Tape,
    fc: &BoundForecast,
    x0: &StateVec,
    sources: &[ObservationSource],
    t: usize,
) -> Result<NodeId> {
    if sources.is_empty() {
        return Err(Error::Invalid("multi-source loss needs at least one source".into()));
    }
    let n = x0.len();
    for s in sources {
        s.check(n, t)?;
        s.weights
            .check_compatible(s.weight_dim(n), t, &format!("source {}", s.name))?;
    }
    let x0_node = tape.input_vector(x0.values());
    let preds = fc.rollout(tape, x0_node, t)?;

    // Bind each AE once per tape.
    let bound_aes: Vec<Option<BoundAe>> = sources
        .iter()
        .map(|s| match &s.operator {
            ObsOperator::Continuous {
                encoder: ContinuousEncoder::Ae(ae),
            } => Some(ae.bind(tape)),
            _ => None,
        })
        .collect();

    let mut total = None;
    for (src_idx, src) in sources.iter().enumerate() {
        match &src.operator {
            ObsOperator::Discrete { indices } => {
                let sel = tape.input(selection_matrix(indices, n));
                for i in 1..=t {
                    let y = tape.input_vector(&src.values[i - 1]);
                    let obs_pred = tape.matmul(preds[i - 1], sel)?;
                    let r = tape.sub(y, obs_pred)?;
                    let w = tape.input_vector(src.weights.step(i)?);
                    let rw = tape.mul(w, r)?;
                    let r2 = tape.square(rw);
                    let s = tape.sum(r2);
                    total = add_total(tape, total, s)?;
                }
            }
            ObsOperator::Continuous { encoder } => {
                for i in 1..=t {
                    let y = tape.input_vector(&src.values[i - 1]);
                    let (ey, ep) = match encoder {
                        ContinuousEncoder::Identity => (y, preds[i - 1]),
                        ContinuousEncoder::Ae(_) => {
                            let bound = bound_aes[src_idx].as_ref().expect("bound above");
                            (bound.encode(tape, y)?, bound.encode(tape, preds[i - 1])?)
                        }
                    };
                    let r = tape.sub(ey, ep)?;
                    let k = tape.input_vector(src.weights.step(i)?);
                    let rk = tape.mul(k, r)?;
                    let r2 = tape.square(rk);
                    let s = tape.sum(r2);
                    total = add_total(tape, total, s)?;
                }
            }
        }
    }
    Ok(total.expect("at least one source and step"))
}

/// Reference weak-constraint cost with the state, parameters and
/// observations all active:
/// ½‖x−x_b‖²_{B⁻¹} + ½‖θ−θ_b‖²_{Θ⁻¹} + ½ΣᵢΣⱼ‖y − H(M)‖²_{R⁻¹}.
///
/// Evaluation only; the training losses are its reductions.
#[allow(clippy::too_many_arguments)]
pub fn full_wc4dvar_cost(
    x: &StateVec,
    theta: &ForecastParams,
    background: &StateVec,
    theta_b: &ForecastParams,
    b_cov: &CovarianceModel,
    theta_inv_diag: &[f64],
    sources: &[ObservationSource],
    t: usize,
) -> Result<f64> {
    let n = x.len();
    if background.len() != n || b_cov.n() != n {
        return Err(Error::Invalid(
            "background dimensions do not match the state".into(),
        ));
    }
    let dx: Vec<f64> = x
        .values()
        .iter()
        .zip(background.values())
        .map(|(a, b)| a - b)
        .collect();
    let mut cost = 0.5 * b_cov.mahalanobis(&dx)?;

    let theta_flat = theta.params.flatten();
    let theta_b_flat = theta_b.params.flatten();
    if theta_flat.len() != theta_b_flat.len() || theta_inv_diag.len() != theta_flat.len() {
        return Err(Error::Invalid(
            "parameter vectors and prior diagonal must share one length".into(),
        ));
    }
    cost += 0.5
        * theta_flat
            .iter()
            .zip(&theta_b_flat)
            .zip(theta_inv_diag)
            .map(|((p, pb), w)| (p - pb) * (p - pb) * w)
            .sum::<f64>();

    if t > 0 && !sources.is_empty() {
        for s in sources {
            s.check(n, t)?;
        }
        let preds = crate::forecast::rollout(x, t, theta)?;
        for src in sources {
            for i in 1..=t {
                let pred = preds.at_step(i);
                let obs_pred: Vec<f64> = match &src.operator {
                    ObsOperator::Discrete { indices } => {
                        indices.iter().map(|j| pred.values()[*j]).collect()
                    }
                    ObsOperator::Continuous { .. } => pred.values().to_vec(),
                };
                let r: Vec<f64> = src.values[i - 1]
                    .iter()
                    .zip(&obs_pred)
                    .map(|(y, p)| y - p)
                    .collect();
                cost += 0.5 * src.error_model.mahalanobis(&r, &src.name)?;
            }
        }
    }
    Ok(cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::AEParams;
    use crate::linalg::{matmul, orthonormalize_rows, transpose};
    use crate::nn::Normalization;
    use crate::optim::{adam_step, OptimizerState};
    use crate::reanalysis::eigendecompose;
    use crate::rng::Rng;
    use crate::tensor::ParamStore;

    const N: usize = 8;

    fn random_model(seed: u64) -> ForecastParams {
        let mut rng = Rng::new(seed, 0);
        let mut fc = ForecastParams::init(N, &[12], Normalization::none(N), 0.04, &mut rng)
            .unwrap();
        let last = fc.spec.layer_count() - 1;
        let name = format!("fc.{last}.w");
        let shape = fc.params.get(&name).unwrap().shape().to_vec();
        let count: usize = shape.iter().product();
        let data: Vec<f64> = (0..count).map(|_| 0.2 * rng.normal()).collect();
        fc.params
            .insert(&name, Tensor::new(shape, data).unwrap());
        fc
    }

    fn identity_model() -> ForecastParams {
        let mut rng = Rng::new(0, 0);
        ForecastParams::init(N, &[12], Normalization::none(N), 0.04, &mut rng).unwrap()
    }

    fn random_segment_states(seed: u64, t: usize) -> Vec<StateVec> {
        let mut rng = Rng::new(seed, 1);
        (0..=t).map(|_| StateVec::new(rng.normal_vec(N))).collect()
    }

    fn random_spd(seed: u64, n: usize, spread: f64) -> CovarianceModel {
        // Eigenvalues in [1/spread, spread] keep conditioning moderate.
        let mut rng = Rng::new(seed, 2);
        let mut q: Vec<f64> = rng.normal_vec(n * n);
        orthonormalize_rows(&mut q, n, n).unwrap();
        let vals: Vec<f64> = (0..n)
            .map(|_| (rng.uniform() * 2.0 - 1.0) * spread.ln())
            .map(|e| e.exp())
            .collect();
        let mut scaled = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                scaled[r * n + c] = q[r * n + c] * vals[r];
            }
        }
        let qt = transpose(&q, n, n);
        let mut a = matmul(&qt, n, n, &scaled, n);
        // Symmetrize against rounding.
        for r in 0..n {
            for c in 0..r {
                let m = 0.5 * (a[r * n + c] + a[c * n + r]);
                a[r * n + c] = m;
                a[c * n + r] = m;
            }
        }
        CovarianceModel::from_matrix(a, n).unwrap()
    }

    fn eval_loss<F>(f: F) -> f64
    where
        F: FnOnce(&mut Tape) -> NodeId,
    {
        let mut tape = Tape::new();
        let root = f(&mut tape);
        tape.value(root).item().unwrap()
    }

    #[test]
    fn perfect_model_zero_loss() {
        // Identity model on a constant trajectory has zero residuals.
        let fc = identity_model();
        let x = StateVec::new(vec![1.0; N]);
        let states = vec![x.clone(), x.clone(), x.clone()];
        let cov = random_spd(1, N, 4.0);
        let v = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let seg = Segment::new(&states).unwrap();
            model_cov_loss(tape, &bound, &seg, &cov).unwrap()
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn identity_covariance_reduces_exactly() {
        let fc = random_model(3);
        let states = random_segment_states(4, 3);
        let cov = CovarianceModel::identity(N);
        let a = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let seg = Segment::new(&states).unwrap();
            model_cov_loss(tape, &bound, &seg, &cov).unwrap()
        });
        let b = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let seg = Segment::new(&states).unwrap();
            identity_loss(tape, &bound, &seg).unwrap()
        });
        assert_eq!(a, b);
    }

    #[test]
    fn eigen_route_matches_dense_route() {
        for seed in 0..6 {
            let fc = random_model(seed + 10);
            let states = random_segment_states(seed + 20, 1 + (seed as usize % 4));
            let cov = random_spd(seed + 30, N, 6.0);
            let eig = eigendecompose(&cov).unwrap();
            let dense = eval_loss(|tape| {
                let bound = fc.bind(tape, false).unwrap();
                let seg = Segment::new(&states).unwrap();
                model_cov_loss(tape, &bound, &seg, &cov).unwrap()
            });
            let eigenv = eval_loss(|tape| {
                let bound = fc.bind(tape, false).unwrap();
                let seg = Segment::new(&states).unwrap();
                eigen_weighted_loss(tape, &bound, &seg, &eig).unwrap()
            });
            assert!(
                (dense - eigenv).abs() / dense.abs() < 1e-9,
                "seed {seed}: {dense} vs {eigenv}"
            );
        }
    }

    #[test]
    fn diag_weights_one_equal_identity() {
        let fc = random_model(5);
        let states = random_segment_states(6, 2);
        let w = WeightTable::uniform(N);
        let a = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let seg = Segment::new(&states).unwrap();
            model_diag_loss(tape, &bound, &seg, &w).unwrap()
        });
        let b = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let seg = Segment::new(&states).unwrap();
            identity_loss(tape, &bound, &seg).unwrap()
        });
        assert_eq!(a, b);
    }

    #[test]
    fn diag_matches_cov_for_diagonal_covariance() {
        let fc = random_model(7);
        let states = random_segment_states(8, 2);
        let mut diag = vec![0.0; N * N];
        let mut rng = Rng::new(9, 0);
        let mut inv_weights = Vec::with_capacity(N);
        for i in 0..N {
            let v = 0.5 + rng.uniform();
            diag[i * N + i] = v;
            inv_weights.push(1.0 / v);
        }
        let cov = CovarianceModel::from_matrix(diag, N).unwrap();
        let w = WeightTable::tied(inv_weights).unwrap();
        let a = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let seg = Segment::new(&states).unwrap();
            model_cov_loss(tape, &bound, &seg, &cov).unwrap()
        });
        let b = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let seg = Segment::new(&states).unwrap();
            model_diag_loss(tape, &bound, &seg, &w).unwrap()
        });
        assert!((a - b).abs() / a.abs() < 1e-12, "{a} vs {b}");
    }

    fn flat_grads(g: &crate::tensor::GradMap) -> Vec<f64> {
        let mut out = Vec::new();
        for t in g.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        linalg::dot(a, b) / (linalg::norm2(a) * linalg::norm2(b))
    }

    #[test]
    fn weight_scaling_preserves_gradient_direction() {
        let fc = random_model(11);
        let states = random_segment_states(12, 2);
        let mut rng = Rng::new(13, 0);
        let base: Vec<f64> = (0..N).map(|_| 0.5 + rng.uniform()).collect();
        let doubled: Vec<f64> = base.iter().map(|w| 2.0 * w).collect();

        let run = |weights: Vec<f64>| {
            let mut tape = Tape::new();
            let bound = fc.bind(&mut tape, true).unwrap();
            let seg = Segment::new(&states).unwrap();
            let w = WeightTable::tied(weights).unwrap();
            let root = model_diag_loss(&mut tape, &bound, &seg, &w).unwrap();
            let v = tape.value(root).item().unwrap();
            let g = tape.backward(root, &fc.params).unwrap();
            (v, flat_grads(&g))
        };
        let (va, ga) = run(base);
        let (vb, gb) = run(doubled);
        assert!((vb - 2.0 * va).abs() < 1e-9 * va.abs());
        assert!((cosine(&ga, &gb) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_unit_residual_contributions() {
        // Residual u_k with eigenvalue λ contributes 1/λ to the eigen loss
        // and 1 to the identity loss.
        let fc = identity_model();
        let cov = random_spd(15, N, 4.0);
        let eig = eigendecompose(&cov).unwrap();
        let k = 2;
        let x0 = StateVec::new(vec![0.5; N]);
        let target = StateVec::new(
            x0.values()
                .iter()
                .zip(eig.eigvec(k))
                .map(|(x, u)| x + u)
                .collect(),
        );
        let states = vec![x0, target];
        let e = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let seg = Segment::new(&states).unwrap();
            eigen_weighted_loss(tape, &bound, &seg, &eig).unwrap()
        });
        assert!((e - 1.0 / eig.eigvals()[k]).abs() < 1e-9);
        let i = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let seg = Segment::new(&states).unwrap();
            identity_loss(tape, &bound, &seg).unwrap()
        });
        assert!((i - 1.0).abs() < 1e-10);
    }

    #[test]
    fn eigen_gradient_matches_finite_differences() {
        let fc = random_model(17);
        let states = random_segment_states(18, 2);
        let cov = random_spd(19, N, 4.0);
        let eig = eigendecompose(&cov).unwrap();
        let err = crate::tensor::grad_check(
            |tape, nodes| {
                let bound = BoundForecast::from_nodes(&fc, nodes.clone());
                let seg = Segment::new(&states).unwrap();
                eigen_weighted_loss(tape, &bound, &seg, &eig)
            },
            &fc.params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }

    fn linear_ae(seed: u64, m: usize) -> (AEParams, Vec<f64>) {
        let mut rng = Rng::new(seed, 3);
        let mut w: Vec<f64> = rng.normal_vec(m * N);
        orthonormalize_rows(&mut w, m, N).unwrap();
        (AEParams::linear_orthogonal(&w, m, N).unwrap(), w)
    }

    #[test]
    fn latent_cov_zero_for_perfect_forecast() {
        let fc = identity_model();
        let (ae, _) = linear_ae(21, 3);
        let x = StateVec::new(vec![0.3; N]);
        let states = vec![x.clone(), x.clone()];
        let az = LatentCov::from_matrix(
            vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0],
            3,
        )
        .unwrap();
        let v = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let bae = ae.bind(tape);
            let seg = Segment::new(&states).unwrap();
            latent_cov_loss(tape, &bound, &bae, &seg, &az).unwrap()
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn latent_identity_reductions() {
        // A_z = I matches k = 1 latent weighting; both equal the latent
        // identity form.
        let fc = random_model(23);
        let (ae, _) = linear_ae(24, 3);
        let states = random_segment_states(25, 2);
        let az = LatentCov::from_matrix(
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            3,
        )
        .unwrap();
        let a = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let bae = ae.bind(tape);
            let seg = Segment::new(&states).unwrap();
            latent_cov_loss(tape, &bound, &bae, &seg, &az).unwrap()
        });
        let k = WeightTable::uniform(3);
        let b = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let bae = ae.bind(tape);
            let seg = Segment::new(&states).unwrap();
            latent_weighted_loss(tape, &bound, &bae, &seg, &k, 3).unwrap()
        });
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn latent_weighted_inverse_variance_matches_latent_cov() {
        let fc = random_model(27);
        let (ae, _) = linear_ae(28, 3);
        let states = random_segment_states(29, 3);
        let diag = [0.5, 2.0, 1.25];
        let mut az = vec![0.0; 9];
        for (i, d) in diag.iter().enumerate() {
            az[i * 3 + i] = *d;
        }
        let az = LatentCov::from_matrix(az, 3).unwrap();
        let k = WeightTable::tied(diag.iter().map(|d| 1.0 / d).collect()).unwrap();
        let a = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let bae = ae.bind(tape);
            let seg = Segment::new(&states).unwrap();
            latent_cov_loss(tape, &bound, &bae, &seg, &az).unwrap()
        });
        let b = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let bae = ae.bind(tape);
            let seg = Segment::new(&states).unwrap();
            latent_weighted_loss(tape, &bound, &bae, &seg, &k, 3).unwrap()
        });
        assert!((a - b).abs() / a.abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn latent_duality_exact_for_constructed_case() {
        // A = Wᵀ A_z W + σ²(I − WᵀW): reanalysis errors in the row span of
        // W make the latent-covariance loss equal the model-covariance loss.
        let m = 3;
        let (ae, w) = linear_ae(31, m);
        let az_diag = [0.7, 1.8, 3.1];
        let sigma_perp = 0.4;
        let mut a = vec![0.0; N * N];
        for r in 0..N {
            for c in 0..N {
                let mut v = 0.0;
                let mut wtw = 0.0;
                for j in 0..m {
                    v += w[j * N + r] * az_diag[j] * w[j * N + c];
                    wtw += w[j * N + r] * w[j * N + c];
                }
                let ident = if r == c { 1.0 } else { 0.0 };
                a[r * N + c] = v + sigma_perp * sigma_perp * (ident - wtw);
            }
        }
        let cov = CovarianceModel::from_matrix(a, N).unwrap();
        let mut az = vec![0.0; m * m];
        for (j, d) in az_diag.iter().enumerate() {
            az[j * m + j] = *d;
        }
        let az = LatentCov::from_matrix(az, m).unwrap();

        let fc = random_model(33);
        // Build reanalysis states as prediction + span(Wᵀ) perturbations.
        let mut rng = Rng::new(35, 0);
        let x0 = StateVec::new(rng.normal_vec(N));
        let t = 3;
        let preds = crate::forecast::rollout(&x0, t, &fc).unwrap();
        let mut states = vec![x0];
        for i in 1..=t {
            let c: Vec<f64> = rng.normal_vec(m);
            let mut eps = vec![0.0; N];
            for (j, cj) in c.iter().enumerate() {
                for r in 0..N {
                    eps[r] += cj * w[j * N + r];
                }
            }
            states.push(StateVec::new(
                preds.at_step(i)
                    .values()
                    .iter()
                    .zip(&eps)
                    .map(|(p, e)| p + e)
                    .collect(),
            ));
        }
        let model_space = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let seg = Segment::new(&states).unwrap();
            model_cov_loss(tape, &bound, &seg, &cov).unwrap()
        });
        let latent_space = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let bae = ae.bind(tape);
            let seg = Segment::new(&states).unwrap();
            latent_cov_loss(tape, &bound, &bae, &seg, &az).unwrap()
        });
        assert!(
            (model_space - latent_space).abs() / model_space.abs() < 1e-8,
            "{model_space} vs {latent_space}"
        );
    }

    #[test]
    fn latent_rotation_invariance_only_when_uniform() {
        // Rotating both encoded vectors leaves the k = 1 loss unchanged but
        // moves the non-uniform one.
        let mut rng = Rng::new(37, 0);
        let m = 3;
        let za: Vec<f64> = rng.normal_vec(m);
        let zp: Vec<f64> = rng.normal_vec(m);
        let mut q: Vec<f64> = rng.normal_vec(m * m);
        orthonormalize_rows(&mut q, m, m).unwrap();
        let rot = |z: &[f64]| linalg::matvec(&q, m, m, z);

        let weighted = |k: &[f64], a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .zip(k)
                .map(|((x, y), w)| w * (x - y) * (x - y))
                .sum()
        };
        let uniform = vec![1.0; m];
        let skew = vec![0.3, 1.0, 4.0];
        let base_u = weighted(&uniform, &za, &zp);
        let rot_u = weighted(&uniform, &rot(&za), &rot(&zp));
        assert!((base_u - rot_u).abs() < 1e-12);
        let base_s = weighted(&skew, &za, &zp);
        let rot_s = weighted(&skew, &rot(&za), &rot(&zp));
        assert!((base_s - rot_s).abs() > 1e-6);
    }

    fn bind_logvars(tape: &mut Tape, store: &mut ParamStore, lv: &LogVarParams) -> NodeId {
        store.insert(LOGVAR_PARAM, lv.tensor());
        tape.param(LOGVAR_PARAM, lv.tensor()).unwrap()
    }

    #[test]
    fn nll_zero_residual_unit_variance() {
        let fc = identity_model();
        let x = StateVec::new(vec![0.4; N]);
        let states = vec![x.clone(), x.clone()];
        let lv = LogVarParams::tied(vec![0.0; N]).unwrap();
        let mut store = fc.params.clone();
        let v = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let node = bind_logvars(tape, &mut store, &lv);
            let seg = Segment::new(&states).unwrap();
            model_nll_loss(tape, &bound, &seg, &lv, node).unwrap()
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn nll_gradient_zero_at_stationary_variance() {
        // d/d(log σ²) vanishes exactly at σ² = r².
        let fc = identity_model();
        let x0 = StateVec::new(vec![0.0; N]);
        let mut rng = Rng::new(39, 0);
        let r: Vec<f64> = (0..N).map(|_| 0.5 + rng.uniform()).collect();
        let target = StateVec::new(r.clone());
        let states = vec![x0, target];
        let lv = LogVarParams::tied(r.iter().map(|ri| (ri * ri).ln()).collect()).unwrap();
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let bound = fc.bind(&mut tape, false).unwrap();
        let node = bind_logvars(&mut tape, &mut store, &lv);
        let seg = Segment::new(&states).unwrap();
        let root = model_nll_loss(&mut tape, &bound, &seg, &lv, node).unwrap();
        let grads = tape.backward(root, &store).unwrap();
        for g in grads[LOGVAR_PARAM].data() {
            assert!(g.abs() < 1e-10, "stationary gradient {g}");
        }
    }

    #[test]
    fn nll_optimizer_recovers_residual_variance() {
        // Frozen residual r: minimizing over σ² lands on σ² = r² within 1%.
        let fc = identity_model();
        let x0 = StateVec::new(vec![0.0; N]);
        let mut rng = Rng::new(41, 0);
        let r: Vec<f64> = (0..N).map(|_| 0.4 + rng.uniform()).collect();
        let states = vec![x0, StateVec::new(r.clone())];
        let mut lv = LogVarParams::tied(vec![0.0; N]).unwrap();
        let mut store = ParamStore::new();
        store.insert(LOGVAR_PARAM, lv.tensor());
        let mut opt = OptimizerState::new(&store);
        for _ in 0..4000 {
            let mut tape = Tape::new();
            let bound = fc.bind(&mut tape, false).unwrap();
            let node = tape
                .param(LOGVAR_PARAM, store.get(LOGVAR_PARAM).unwrap().clone())
                .unwrap();
            let seg = Segment::new(&states).unwrap();
            let root = model_nll_loss(&mut tape, &bound, &seg, &lv, node).unwrap();
            let grads = tape.backward(root, &store).unwrap();
            adam_step(&mut store, &grads, &mut opt, 5e-3).unwrap();
        }
        lv.values = store.get(LOGVAR_PARAM).unwrap().data().to_vec();
        for (v, ri) in lv.values.iter().zip(&r) {
            let sigma2 = v.exp();
            assert!(
                (sigma2 - ri * ri).abs() / (ri * ri) < 0.01,
                "σ² {sigma2} vs r² {}",
                ri * ri
            );
        }
    }

    #[test]
    fn model_nll_uniform_variance_identity() {
        // Fixed uniform σ²: loss = identity/σ² + n·T·log σ².
        let fc = random_model(43);
        let states = random_segment_states(44, 3);
        let sigma2: f64 = 1.7;
        let lv = LogVarParams::tied(vec![sigma2.ln(); N]).unwrap();
        let mut store = ParamStore::new();
        let nll = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let node = bind_logvars(tape, &mut store, &lv);
            let seg = Segment::new(&states).unwrap();
            model_nll_loss(tape, &bound, &seg, &lv, node).unwrap()
        });
        let ident = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let seg = Segment::new(&states).unwrap();
            identity_loss(tape, &bound, &seg).unwrap()
        });
        let expect = ident / sigma2 + (N * 3) as f64 * sigma2.ln();
        assert!((nll - expect).abs() / expect.abs() < 1e-12, "{nll} vs {expect}");
    }

    #[test]
    fn latent_nll_gradients_match_finite_differences() {
        let fc = random_model(45);
        let (ae, _) = linear_ae(46, 3);
        let states = random_segment_states(47, 2);
        let lv = LogVarParams::per_step(vec![0.1; 6], 3, 2).unwrap();
        let mut store = fc.params.clone();
        store.insert(LOGVAR_PARAM, lv.tensor());
        let err = crate::tensor::grad_check(
            |tape, nodes| {
                let mut fc_nodes = nodes.clone();
                let lv_node = fc_nodes.remove(LOGVAR_PARAM).unwrap();
                let bound = BoundForecast::from_nodes(&fc, fc_nodes);
                let bae = ae.bind(tape);
                let seg = Segment::new(&states).unwrap();
                latent_nll_loss(tape, &bound, &bae, &seg, &lv, lv_node, 3)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }

    fn source_values_from(states: &[StateVec], indices: Option<&[usize]>) -> Vec<Vec<f64>> {
        states[1..]
            .iter()
            .map(|s| match indices {
                Some(idx) => idx.iter().map(|i| s.values()[*i]).collect(),
                None => s.values().to_vec(),
            })
            .collect()
    }

    #[test]
    fn multi_source_reduces_to_identity_loss() {
        let fc = random_model(49);
        let states = random_segment_states(50, 2);
        let all: Vec<usize> = (0..N).collect();
        let src = ObservationSource {
            name: "full".into(),
            operator: ObsOperator::Discrete {
                indices: all.clone(),
            },
            values: source_values_from(&states, Some(&all)),
            weights: WeightTable::uniform(N),
            error_model: ErrorModel::UnitDiagonal,
        };
        let a = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            multi_source_loss(tape, &bound, &states[0], &[src.clone()], 2).unwrap()
        });
        let b = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let seg = Segment::new(&states).unwrap();
            identity_loss(tape, &bound, &seg).unwrap()
        });
        assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} vs {b}");
    }

    #[test]
    fn multi_source_reduces_to_latent_identity() {
        let fc = random_model(51);
        let (ae, _) = linear_ae(52, 3);
        let states = random_segment_states(53, 2);
        let src = ObservationSource {
            name: "reanalysis".into(),
            operator: ObsOperator::Continuous {
                encoder: ContinuousEncoder::Ae(ae.clone()),
            },
            values: source_values_from(&states, None),
            weights: WeightTable::uniform(3),
            error_model: ErrorModel::UnitDiagonal,
        };
        let a = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            multi_source_loss(tape, &bound, &states[0], &[src], 2).unwrap()
        });
        let k = WeightTable::uniform(3);
        let b = eval_loss(|tape| {
            let bound = fc.bind(tape, false).unwrap();
            let bae = ae.bind(tape);
            let seg = Segment::new(&states).unwrap();
            latent_weighted_loss(tape, &bound, &bae, &seg, &k, 3).unwrap()
        });
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn multi_source_partial_observation() {
        // Observing {0, 3}: unobserved target components do not move the
        // loss, and parameters still receive gradient.
        let fc = random_model(55);
        let mut states = random_segment_states(56, 2);
        let indices = vec![0usize, 3];
        let src = ObservationSource {
            name: "stations".into(),
            operator: ObsOperator::Discrete {
                indices: indices.clone(),
            },
            values: source_values_from(&states, Some(&indices)),
            weights: WeightTable::tied(vec![1.0, 2.0]).unwrap(),
            error_model: ErrorModel::UnitDiagonal,
        };
        let run = |states: &[StateVec], src: ObservationSource| {
            let mut tape = Tape::new();
            let bound = fc.bind(&mut tape, true).unwrap();
            let root = multi_source_loss(&mut tape, &bound, &states[0], &[src], 2).unwrap();
            let v = tape.value(root).item().unwrap();
            let g = tape.backward(root, &fc.params).unwrap();
            (v, flat_grads(&g))
        };
        let (va, ga) = run(&states, src.clone());
        assert!(linalg::norm2(&ga) > 0.0, "gradient must be nonzero");
        // Perturb an unobserved component of the target states.
        for s in states.iter_mut().skip(1) {
            s.values_mut()[5] += 10.0;
        }
        let (vb, _) = run(&states, src);
        assert_eq!(va, vb);
    }

    #[test]
    fn multi_source_rejects_shape_mismatch() {
        let fc = random_model(57);
        let states = random_segment_states(58, 2);
        let src = ObservationSource {
            name: "bad".into(),
            operator: ObsOperator::Discrete {
                indices: vec![0, 1],
            },
            values: vec![vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]],
            weights: WeightTable::uniform(2),
            error_model: ErrorModel::UnitDiagonal,
        };
        let mut tape = Tape::new();
        let bound = fc.bind(&mut tape, false).unwrap();
        let err = multi_source_loss(&mut tape, &bound, &states[0], &[src], 2).unwrap_err();
        assert!(err.to_string().contains("bad"), "error names the source: {err}");
    }

    #[test]
    fn full_cost_zero_at_perfect_fit() {
        let fc = identity_model();
        let x = StateVec::new(vec![0.2; N]);
        let b_cov = CovarianceModel::identity(N);
        let zeros = vec![0.0; fc.params.param_count()];
        let all: Vec<usize> = (0..N).collect();
        // Observations equal the (identity) forecast.
        let src = ObservationSource {
            name: "obs".into(),
            operator: ObsOperator::Discrete { indices: all },
            values: vec![x.values().to_vec(); 3],
            weights: WeightTable::uniform(N),
            error_model: ErrorModel::UnitDiagonal,
        };
        let cost = full_wc4dvar_cost(&x, &fc, &x, &fc, &b_cov, &zeros, &[src], 3).unwrap();
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn full_cost_background_term_only() {
        // x − x_b equal to the leading eigenvector of B with λ = 2 gives
        // ½·(1/2) = 0.25.
        let fc = identity_model();
        let b = random_spd(59, N, 2.0);
        let eig = eigendecompose(&b).unwrap();
        let u0 = eig.eigvec(0);
        let lambda0 = eig.eigvals()[0];
        let xb = StateVec::new(vec![0.0; N]);
        let x = StateVec::new(u0);
        let zeros = vec![0.0; fc.params.param_count()];
        let cost = full_wc4dvar_cost(&x, &fc, &xb, &fc, &b, &zeros, &[], 0).unwrap();
        assert!((cost - 0.5 / lambda0).abs() < 1e-10, "{cost}");
    }

    #[test]
    fn full_cost_reduces_to_half_model_cov() {
        // Perfect initial state, no parameter prior, H = I, R = A.
        for seed in 0..4 {
            let fc = random_model(61 + seed);
            let states = random_segment_states(70 + seed, 3);
            let a = random_spd(80 + seed, N, 4.0);
            let zeros = vec![0.0; fc.params.param_count()];
            let src = ObservationSource {
                name: "reanalysis".into(),
                operator: ObsOperator::Continuous {
                    encoder: ContinuousEncoder::Identity,
                },
                values: source_values_from(&states, None),
                weights: WeightTable::uniform(N),
                error_model: ErrorModel::Full(a.clone()),
            };
            let full = full_wc4dvar_cost(
                &states[0],
                &fc,
                &states[0],
                &fc,
                &CovarianceModel::identity(N),
                &zeros,
                &[src],
                3,
            )
            .unwrap();
            let cov_loss = eval_loss(|tape| {
                let bound = fc.bind(tape, false).unwrap();
                let seg = Segment::new(&states).unwrap();
                model_cov_loss(tape, &bound, &seg, &a).unwrap()
            });
            assert!(
                (full - 0.5 * cov_loss).abs() / cov_loss.abs() < 1e-12,
                "{full} vs half of {cov_loss}"
            );
        }
    }

    #[test]
    fn loss_kind_names_roundtrip() {
        for kind in [
            LossKind::FullWc4dvar,
            LossKind::ModelCov,
            LossKind::ModelDiag,
            LossKind::EigenWeighted,
            LossKind::Identity,
            LossKind::LatentCov,
            LossKind::LatentWeighted,
            LossKind::LatentNll,
            LossKind::ModelNll,
            LossKind::MultiSource,
        ] {
            assert_eq!(LossKind::from_name(kind.name()).unwrap(), kind);
        }
        assert!(LossKind::from_name("nope").is_err());
    }
}
