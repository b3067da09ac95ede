//! MLP autoencoder over system states, plus the checks that justify using
//! its latent space for training constraints: reconstruction quality, local
//! linearity of the encoder/decoder pair, and near-diagonality of the latent
//! error covariance.
//!
//! Inputs are normalized per component before encoding and decoder outputs
//! are denormalized, so slow and fast variables enter on comparable scales.
//! Hidden layers are tanh; a spec with no hidden sizes yields an exactly
//! linear autoencoder, used as the analytic reference case.

use crate::error::{Error, Result};
use crate::io;
use crate::linalg;
use crate::nn::{read_params, read_sizes, write_params, write_sizes, MlpSpec, Normalization};
use crate::optim::{adam_step, OptimizerState};
use crate::reanalysis::{CovarianceModel, ReanalysisSet};
use crate::rng::Rng;
use crate::dynamics::StateVec;
use crate::tensor::{NodeId, ParamStore, Tape};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Latent state z = E(x).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVec {
    values: Vec<f64>,
}

impl LatentVec {
    pub fn new(values: Vec<f64>) -> Self {
        LatentVec { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Encoder/decoder parameters with shared normalization statistics.
#[derive(Clone, Debug)]
pub struct AEParams {
    pub encoder: MlpSpec,
    pub decoder: MlpSpec,
    pub params: ParamStore,
    pub norm: Normalization,
}

impl AEParams {
    pub fn state_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Fresh tanh autoencoder n → hidden… → m and mirror decoder.
    pub fn init(
        n: usize,
        hidden: &[usize],
        m: usize,
        norm: Normalization,
        rng: &mut Rng,
    ) -> Result<Self> {
        if m >= n {
            return Err(Error::Invalid(format!(
                "latent dimension m = {m} must be below state dimension n = {n}"
            )));
        }
        let mut enc_sizes = vec![n];
        enc_sizes.extend_from_slice(hidden);
        enc_sizes.push(m);
        let mut dec_sizes = vec![m];
        dec_sizes.extend(hidden.iter().rev());
        dec_sizes.push(n);
        let encoder = MlpSpec::new(enc_sizes)?;
        let decoder = MlpSpec::new(dec_sizes)?;
        let mut params = ParamStore::new();
        encoder.init_params("enc", &mut params, rng, false);
        decoder.init_params("dec", &mut params, rng, false);
        Ok(AEParams {
            encoder,
            decoder,
            params,
            norm,
        })
    }

    /// Exactly linear pair E(x) = Wx, D(z) = Wᵀz from orthonormal rows W
    /// (m×n, row-major), with identity normalization.
    pub fn linear_orthogonal(w_rows: &[f64], m: usize, n: usize) -> Result<Self> {
        if w_rows.len() != m * n {
            return Err(Error::Invalid("W dimensions do not match m×n".into()));
        }
        let encoder = MlpSpec::new(vec![n, m])?;
        let decoder = MlpSpec::new(vec![m, n])?;
        let mut params = ParamStore::new();
        // Our forward computes x·W_enc, so W_enc = Wᵀ (n×m) and W_dec = W.
        params.insert(
            "enc.0.w",
            crate::tensor::Tensor::matrix(n, m, linalg::transpose(w_rows, m, n))?,
        );
        params.insert("enc.0.b", crate::tensor::Tensor::vector(vec![0.0; m]));
        params.insert(
            "dec.0.w",
            crate::tensor::Tensor::matrix(m, n, w_rows.to_vec())?,
        );
        params.insert("dec.0.b", crate::tensor::Tensor::vector(vec![0.0; n]));
        Ok(AEParams {
            encoder,
            decoder,
            params,
            norm: Normalization::none(n),
        })
    }

    pub fn encode(&self, x: &StateVec) -> Result<LatentVec> {
        if x.len() != self.state_dim() {
            return Err(Error::Invalid(format!(
                "encode input length {} does not match n = {}",
                x.len(),
                self.state_dim()
            )));
        }
        let normed = self.norm.apply(x.values());
        Ok(LatentVec::new(self.encoder.forward("enc", &self.params, &normed)?))
    }

    pub fn decode(&self, z: &LatentVec) -> Result<StateVec> {
        if z.len() != self.latent_dim() {
            return Err(Error::Invalid(format!(
                "decode input length {} does not match m = {}",
                z.len(),
                self.latent_dim()
            )));
        }
        let out = self.decoder.forward("dec", &self.params, z.values())?;
        Ok(StateVec::new(self.norm.invert(&out)))
    }

    /// Binds the (frozen) AE parameters onto a tape for differentiable
    /// encoding inside losses. Gradients flow through, never into, the AE.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> BoundAe<'a> {
        BoundAe {
            ae: self,
            nodes: tape.bind_constants(&self.params),
        }
    }

    /// AE checkpoint: magic "WCAE", version, encoder and decoder layer
    /// tables, normalization vectors, then the parameter block.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        io::write_magic(&mut w, b"WCAE")?;
        write_sizes(&mut w, &self.encoder.sizes)?;
        write_sizes(&mut w, &self.decoder.sizes)?;
        self.norm.write_to(&mut w)?;
        write_params(&mut w, &self.params)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        io::read_magic(&mut r, b"WCAE")?;
        let encoder = MlpSpec::new(read_sizes(&mut r)?)?;
        let decoder = MlpSpec::new(read_sizes(&mut r)?)?;
        let norm = Normalization::read_from(&mut r)?;
        let params = read_params(&mut r)?;
        Ok(AEParams {
            encoder,
            decoder,
            params,
            norm,
        })
    }
}

/// AE parameters bound as constants on one tape.
pub struct BoundAe<'a> {
    ae: &'a AEParams,
    nodes: BTreeMap<String, NodeId>,
}

impl BoundAe<'_> {
    /// Differentiable encode of a state node (normalization included).
    pub fn encode(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let normed = self.ae.norm.apply_tape(tape, x)?;
        self.ae.encoder.forward_tape("enc", tape, &self.nodes, normed)
    }
}

/// Autoencoder training configuration.
#[derive(Clone, Debug)]
pub struct AeTrainConfig {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Halve the learning rate whenever the epoch-mean loss fails to improve.
    pub plateau_halving: bool,
    pub shuffle: bool,
    /// Measure the reconstruction error in natural units (componentwise
    /// σ-weighted) rather than normalized units, matching how the quality
    /// threshold is stated against the climatological spread.
    pub natural_loss: bool,
    /// Cosine-decay floor; equal to `lr` means a constant rate.
    pub lr_floor: f64,
    pub seed: u64,
}

impl AeTrainConfig {
    pub fn default_lab(seed: u64) -> Self {
        AeTrainConfig {
            hidden: vec![64, 64],
            latent_dim: 12,
            epochs: 300,
            batch: 32,
            lr: 1e-3,
            plateau_halving: false,
            shuffle: true,
            natural_loss: true,
            lr_floor: 1e-5,
            seed,
        }
    }
}

/// Training curve (epoch-mean reconstruction loss in normalized units).
#[derive(Clone, Debug)]
pub struct AeTrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Trains the autoencoder by mean squared reconstruction error in
/// normalized space with Adam. Requires at least 10·m states.
pub fn train_ae(states: &[StateVec], cfg: &AeTrainConfig) -> Result<(AEParams, AeTrainReport)> {
    if states.len() < 10 * cfg.latent_dim {
        return Err(Error::Invalid(format!(
            "need at least {} training states for m = {}, got {}",
            10 * cfg.latent_dim,
            cfg.latent_dim,
            states.len()
        )));
    }
    let n = states[0].len();
    let rows: Vec<&[f64]> = states.iter().map(|s| s.values()).collect();
    let norm = Normalization::fit(&rows)?;
    let mut rng = Rng::from_tag(cfg.seed, "ae-init");
    let mut ae = AEParams::init(n, &cfg.hidden, cfg.latent_dim, norm, &mut rng)?;

    let normed: Vec<Vec<f64>> = states.iter().map(|s| ae.norm.apply(s.values())).collect();
    let residual_scale: Option<Vec<f64>> = if cfg.natural_loss {
        Some(ae.norm.scale.clone())
    } else {
        None
    };
    let mut opt = OptimizerState::new(&ae.params);
    let mut lr = cfg.lr;
    let total_steps = (cfg.epochs * normed.len().div_ceil(cfg.batch)) as u64;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..normed.len()).collect();
        if cfg.shuffle {
            let mut shuffler = Rng::new(cfg.seed ^ epoch as u64, crate::rng::stream_tag("ae-shuffle"));
            shuffler.shuffle(&mut order);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let nodes = tape.bind_params(&ae.params)?;
            let mut total: Option<NodeId> = None;
            for &idx in chunk {
                let x = tape.input_vector(&normed[idx]);
                let z = ae.encoder.forward_tape("enc", &mut tape, &nodes, x)?;
                let xr = ae.decoder.forward_tape("dec", &mut tape, &nodes, z)?;
                let mut r = tape.sub(xr, x)?;
                if let Some(scale) = &residual_scale {
                    let sc = tape.input_vector(scale);
                    r = tape.mul(r, sc)?;
                }
                let r2 = tape.square(r);
                let s = tape.sum(r2);
                total = Some(match total {
                    Some(t) => tape.add(t, s)?,
                    None => s,
                });
            }
            let root = total.expect("non-empty batch");
            let loss = tape.value(root).item()?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    loss,
                    grad_norm: f64::NAN,
                });
            }
            let grads = tape.backward(root, &ae.params)?;
            let step_lr = if cfg.plateau_halving || cfg.lr_floor >= cfg.lr {
                lr
            } else {
                crate::optim::warmup_cosine(step as u64, lr, 0, total_steps, cfg.lr_floor)
            };
            adam_step(&mut ae.params, &grads, &mut opt, step_lr)?;
            epoch_loss += loss;
            step += 1;
        }
        let mean_loss = epoch_loss / normed.len() as f64;
        if cfg.plateau_halving {
            if let Some(prev) = epoch_losses.last() {
                if mean_loss >= *prev {
                    lr *= 0.5;
                }
            }
        }
        epoch_losses.push(mean_loss);
    }

    let (first, last) = (epoch_losses[0], *epoch_losses.last().unwrap());
    if last > first {
        return Err(Error::NoConvergence(format!(
            "autoencoder loss did not improve: {first} → {last}"
        )));
    }
    Ok((ae, AeTrainReport { epoch_losses }))
}

/// Reconstruction RMSE in natural units, pooled over components and states.
pub fn reconstruction_rmse(ae: &AEParams, states: &[StateVec]) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Invalid("no states to evaluate".into()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for s in states {
        let rec = ae.decode(&ae.encode(s)?)?;
        for (a, b) in rec.values().iter().zip(s.values()) {
            acc += (a - b) * (a - b);
            count += 1;
        }
    }
    Ok((acc / count as f64).sqrt())
}

/// Pooled climatological standard deviation: √(mean over components of the
/// per-component variance).
pub fn pooled_std(states: &[StateVec]) -> Result<f64> {
    if states.len() < 2 {
        return Err(Error::Invalid("need at least 2 states".into()));
    }
    let rows: Vec<&[f64]> = states.iter().map(|s| s.values()).collect();
    let norm = Normalization::fit(&rows)?;
    let n = norm.dim() as f64;
    Ok((norm.scale.iter().map(|s| s * s).sum::<f64>() / n).sqrt())
}

/// Latent-space reanalysis error covariance A_z with its diagonal.
#[derive(Clone, Debug)]
pub struct LatentCov {
    pub matrix: Vec<f64>,
    pub diag: Vec<f64>,
    pub m: usize,
}

impl LatentCov {
    pub fn from_matrix(matrix: Vec<f64>, m: usize) -> Result<Self> {
        if matrix.len() != m * m {
            return Err(Error::Invalid("latent covariance dimensions".into()));
        }
        let diag = (0..m).map(|i| matrix[i * m + i]).collect();
        Ok(LatentCov { matrix, diag, m })
    }

    /// SPD view for solves; fails if the sample covariance is singular.
    pub fn model(&self) -> Result<CovarianceModel> {
        CovarianceModel::from_matrix(self.matrix.clone(), self.m)
    }
}

/// Second moment of E(x_a) − E(x_t) over all trajectory indices.
pub fn latent_error_cov(set: &ReanalysisSet, ae: &AEParams) -> Result<LatentCov> {
    if set.truth.len() < 2 {
        return Err(Error::Invalid(
            "need at least 2 samples for a covariance".into(),
        ));
    }
    let m = ae.latent_dim();
    let mut acc = vec![0.0; m * m];
    for (xa, xt) in set.reanalysis.states.iter().zip(&set.truth.states) {
        let za = ae.encode(xa)?;
        let zt = ae.encode(xt)?;
        let d: Vec<f64> = za
            .values()
            .iter()
            .zip(zt.values())
            .map(|(a, b)| a - b)
            .collect();
        for i in 0..m {
            for j in 0..m {
                acc[i * m + j] += d[i] * d[j];
            }
        }
    }
    let count = set.truth.len() as f64;
    for v in acc.iter_mut() {
        *v /= count;
    }
    LatentCov::from_matrix(acc, m)
}

/// Off-diagonal energy fraction Σ_{i≠j} c²_ij / Σ_{ij} c²_ij ∈ [0, 1];
/// 0 means perfectly diagonal.
pub fn diagonality_score(matrix: &[f64], m: usize) -> Result<f64> {
    let total: f64 = matrix.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Err(Error::Invalid(
            "diagonality score undefined for the zero matrix".into(),
        ));
    }
    let mut off = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                off += matrix[i * m + j] * matrix[i * m + j];
            }
        }
    }
    Ok(off / total)
}

/// Same score after normalizing to unit diagonal (correlation form).
pub fn correlation_diagonality_score(matrix: &[f64], m: usize) -> Result<f64> {
    let mut corr = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let d = (matrix[i * m + i] * matrix[j * m + j]).sqrt();
            if d == 0.0 {
                return Err(Error::Invalid(
                    "correlation score undefined with zero variance".into(),
                ));
            }
            corr[i * m + j] = matrix[i * m + j] / d;
        }
    }
    diagonality_score(&corr, m)
}

/// Diagonality of the same model-space errors pushed through a seeded
/// random orthonormal projection instead of the encoder; the baseline the
/// trained latent space must beat.
pub fn random_projection_diagonality(
    set: &ReanalysisSet,
    m: usize,
    seed: u64,
) -> Result<f64> {
    let n = set.truth.dim();
    let mut rng = Rng::from_tag(seed, "random-projection");
    let mut w: Vec<f64> = rng.normal_vec(m * n);
    linalg::orthonormalize_rows(&mut w, m, n)?;
    let mut acc = vec![0.0; m * m];
    for (xa, xt) in set.reanalysis.states.iter().zip(&set.truth.states) {
        let d: Vec<f64> = xa
            .values()
            .iter()
            .zip(xt.values())
            .map(|(a, b)| a - b)
            .collect();
        let z = linalg::matvec(&w, m, n, &d);
        for i in 0..m {
            for j in 0..m {
                acc[i * m + j] += z[i] * z[j];
            }
        }
    }
    let count = set.truth.len() as f64;
    for v in acc.iter_mut() {
        *v /= count;
    }
    diagonality_score(&acc, m)
}

/// Local-linearity deviations around one state.
#[derive(Clone, Debug)]
pub struct LinearityReport {
    /// ‖J_E · J_D − I_m‖_max with finite-difference Jacobians.
    pub jacobian_product_dev: f64,
    /// Mean of ‖D(z+δ)−D(z)−J_D δ‖ / ‖J_D δ‖ over random δ of the probe norm.
    pub second_order_residual: f64,
}

/// Finite-difference probe of encoder/decoder linearity at `x`.
///
/// Jacobians are built by central differences (step `fd_step`), deliberately
/// independent of the autodiff tape. The second-order residual is averaged
/// over `probes` random latent directions of norm `probe_scale`.
pub fn linearity_check(
    ae: &AEParams,
    x: &StateVec,
    probe_scale: f64,
    fd_step: f64,
    probes: usize,
    seed: u64,
) -> Result<LinearityReport> {
    if probe_scale <= 0.0 || fd_step <= 0.0 {
        return Err(Error::Invalid("probe_scale and fd_step must be positive".into()));
    }
    let n = ae.state_dim();
    let m = ae.latent_dim();
    let z = ae.encode(x)?;

    // J_E (m×n) at x.
    let mut je = vec![0.0; m * n];
    for i in 0..n {
        let mut xp = x.clone();
        xp.values_mut()[i] += fd_step;
        let mut xm = x.clone();
        xm.values_mut()[i] -= fd_step;
        let zp = ae.encode(&xp)?;
        let zm = ae.encode(&xm)?;
        for r in 0..m {
            je[r * n + i] = (zp.values()[r] - zm.values()[r]) / (2.0 * fd_step);
        }
    }
    // J_D (n×m) at z.
    let mut jd = vec![0.0; n * m];
    for j in 0..m {
        let mut zp = z.values().to_vec();
        zp[j] += fd_step;
        let mut zm = z.values().to_vec();
        zm[j] -= fd_step;
        let xp = ae.decode(&LatentVec::new(zp))?;
        let xm = ae.decode(&LatentVec::new(zm))?;
        for r in 0..n {
            jd[r * m + j] = (xp.values()[r] - xm.values()[r]) / (2.0 * fd_step);
        }
    }

    let prod = linalg::matmul(&je, m, n, &jd, m);
    let mut dev = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let expect = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((prod[i * m + j] - expect).abs());
        }
    }

    let mut rng = Rng::from_tag(seed, "linearity-probe");
    let mut resid_acc = 0.0;
    for _ in 0..probes.max(1) {
        let mut delta = rng.normal_vec(m);
        let nrm = linalg::norm2(&delta);
        for d in delta.iter_mut() {
            *d *= probe_scale / nrm;
        }
        let zp: Vec<f64> = z.values().iter().zip(&delta).map(|(a, b)| a + b).collect();
        let xp = ae.decode(&LatentVec::new(zp))?;
        let x0 = ae.decode(&z)?;
        let jd_delta = linalg::matvec(&jd, n, m, &delta);
        let mut num = 0.0;
        for i in 0..n {
            let lin = x0.values()[i] + jd_delta[i];
            num += (xp.values()[i] - lin) * (xp.values()[i] - lin);
        }
        let den = linalg::norm2(&jd_delta).max(1e-300);
        resid_acc += num.sqrt() / den;
    }
    Ok(LinearityReport {
        jacobian_product_dev: dev,
        second_order_residual: resid_acc / probes.max(1) as f64,
    })
}
