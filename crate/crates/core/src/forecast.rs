//! Deterministic forecast emulator: a residual single-step MLP over the
//! normalized state, composed autoregressively for rollouts. The residual
//! form makes a zero-initialized final layer an exact identity map, which
//! keeps early rollout training stable.

use crate::error::{Error, Result};
use crate::io;
use crate::nn::{read_params, read_sizes, write_params, write_sizes, MlpSpec, Normalization};
use crate::rng::Rng;
use crate::dynamics::StateVec;
use crate::tensor::{NodeId, ParamStore, Tape};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Training provenance carried in checkpoints; latent losses require a
/// stage-1 model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stage {
    Untrained,
    Stage1,
    Stage2 { loss_kind: String },
}

impl Stage {
    pub fn tag(&self) -> u8 {
        match self {
            Stage::Untrained => 0,
            Stage::Stage1 => 1,
            Stage::Stage2 { .. } => 2,
        }
    }

    pub fn loss_kind(&self) -> &str {
        match self {
            Stage::Stage2 { loss_kind } => loss_kind,
            _ => "",
        }
    }

    pub fn from_parts(tag: u8, loss_kind: String) -> Result<Self> {
        match tag {
            0 => Ok(Stage::Untrained),
            1 => Ok(Stage::Stage1),
            2 => Ok(Stage::Stage2 { loss_kind }),
            other => Err(Error::Corrupt(format!("unknown stage tag {other}"))),
        }
    }
}

/// Residual single-step map x ↦ x + σ⊙MLP((x − μ)/σ).
#[derive(Clone, Debug)]
pub struct ForecastParams {
    pub spec: MlpSpec,
    pub params: ParamStore,
    pub norm: Normalization,
    /// Model time units advanced per step.
    pub dt: f64,
    pub stage: Stage,
}

impl ForecastParams {
    /// Fresh model with a zero-initialized final layer (identity at init).
    pub fn init(
        n: usize,
        hidden: &[usize],
        norm: Normalization,
        dt: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut sizes = vec![n];
        sizes.extend_from_slice(hidden);
        sizes.push(n);
        let spec = MlpSpec::new(sizes)?;
        let mut params = ParamStore::new();
        spec.init_params("fc", &mut params, rng, true);
        Ok(ForecastParams {
            spec,
            params,
            norm,
            dt,
            stage: Stage::Untrained,
        })
    }

    pub fn dim(&self) -> usize {
        self.spec.input_dim()
    }

    /// Binds the forecast weights onto a tape, trainable or frozen.
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Result<BoundForecast<'a>> {
        let nodes = if trainable {
            tape.bind_params(&self.params)?
        } else {
            tape.bind_constants(&self.params)
        };
        Ok(BoundForecast { model: self, nodes })
    }

    /// Forecast checkpoint: magic "WCFM", version, layer table,
    /// normalization, dt, stage tag, loss-kind string, parameter block.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        io::write_magic(&mut w, b"WCFM")?;
        self.write_body(&mut w)
    }

    pub fn write_body<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        write_sizes(w, &self.spec.sizes)?;
        self.norm.write_to(w)?;
        io::write_f64(w, self.dt)?;
        io::write_u8(w, self.stage.tag())?;
        io::write_string(w, self.stage.loss_kind())?;
        write_params(w, &self.params)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        io::read_magic(&mut r, b"WCFM")?;
        Self::read_body(&mut r)
    }

    pub fn read_body<R: std::io::Read>(r: &mut R) -> Result<Self> {
        let spec = MlpSpec::new(read_sizes(r)?)?;
        let norm = Normalization::read_from(r)?;
        let dt = io::read_f64(r)?;
        let tag = io::read_u8(r)?;
        let loss_kind = io::read_string(r)?;
        let params = read_params(r)?;
        Ok(ForecastParams {
            spec,
            params,
            norm,
            dt,
            stage: Stage::from_parts(tag, loss_kind)?,
        })
    }
}

/// Forecast weights bound on one tape.
pub struct BoundForecast<'a> {
    model: &'a ForecastParams,
    nodes: BTreeMap<String, NodeId>,
}

impl<'a> BoundForecast<'a> {
    /// Wraps already-bound parameter nodes (e.g. from a shared binding that
    /// also carries log-variances).
    pub fn from_nodes(model: &'a ForecastParams, nodes: BTreeMap<String, NodeId>) -> Self {
        BoundForecast { model, nodes }
    }
}

impl BoundForecast<'_> {
    /// Differentiable single step.
    pub fn step(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let normed = self.model.norm.apply_tape(tape, x)?;
        let delta = self
            .model
            .spec
            .forward_tape("fc", tape, &self.nodes, normed)?;
        let scaled = self.model.norm.scale_residual_tape(tape, delta)?;
        tape.add(x, scaled)
    }

    /// Differentiable rollout; returns the nodes for steps 1..=t.
    pub fn rollout(&self, tape: &mut Tape, x0: NodeId, t: usize) -> Result<Vec<NodeId>> {
        if t < 1 {
            return Err(Error::Invalid("rollout length must be at least 1".into()));
        }
        let mut out = Vec::with_capacity(t);
        let mut cur = x0;
        for step_idx in 1..=t {
            cur = self.step(tape, cur)?;
            if !tape.value(cur).all_finite() {
                return Err(Error::Blowup {
                    context: "rollout".into(),
                    step: step_idx,
                });
            }
            out.push(cur);
        }
        Ok(out)
    }
}

/// Predicted states for steps 1..=T (index i holds step i+1).
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub states: Vec<StateVec>,
}

impl RolloutResult {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State after `step` model steps (1-based).
    pub fn at_step(&self, step: usize) -> &StateVec {
        &self.states[step - 1]
    }
}

/// Plain single step.
pub fn step(x: &StateVec, params: &ForecastParams) -> Result<StateVec> {
    if x.len() != params.dim() {
        return Err(Error::Invalid(format!(
            "state length {} does not match model dimension {}",
            x.len(),
            params.dim()
        )));
    }
    let normed = params.norm.apply(x.values());
    let delta = params.spec.forward("fc", &params.params, &normed)?;
    let out: Vec<f64> = x
        .values()
        .iter()
        .zip(delta.iter().zip(&params.norm.scale))
        .map(|(xi, (d, s))| xi + d * s)
        .collect();
    let out = StateVec::new(out);
    if !out.all_finite() {
        return Err(Error::Blowup {
            context: "forecast step".into(),
            step: 0,
        });
    }
    Ok(out)
}

/// Plain autoregressive rollout of `t` steps.
pub fn rollout(x0: &StateVec, t: usize, params: &ForecastParams) -> Result<RolloutResult> {
    if t < 1 {
        return Err(Error::Invalid("rollout length must be at least 1".into()));
    }
    let mut states = Vec::with_capacity(t);
    let mut cur = x0.clone();
    for step_idx in 1..=t {
        cur = step(&cur, params).map_err(|e| match e {
            Error::Blowup { context, .. } => Error::Blowup {
                context,
                step: step_idx,
            },
            other => other,
        })?;
        states.push(cur.clone());
    }
    Ok(RolloutResult { states })
}
