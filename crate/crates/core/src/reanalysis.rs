//! Synthetic reanalysis: truth plus correlated Gaussian error with a known,
//! controllable covariance, plus the eigen machinery used by the
//! covariance-weighted losses.
//!
//! The error covariance couples slow and fast variables through Gaussian
//! ring kernels, so its off-diagonals carry exactly the cross-variable
//! structure that equal-weight training ignores. It is held fixed in time.

use crate::dynamics::{L96Config, StateVec, Trajectory};
use crate::error::{Error, Result};
use crate::io;
use crate::linalg;
use crate::rng::Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Dense SPD error covariance with its Cholesky factor.
#[derive(Clone, Debug)]
pub struct CovarianceModel {
    n: usize,
    matrix: Vec<f64>,
    cholesky_factor: Vec<f64>,
    /// Zero covariance used as a degenerate test bypass.
    degenerate: bool,
}

impl CovarianceModel {
    /// Validates symmetry (to 1e-12 relative to the largest entry) and
    /// positive definiteness, then factors.
    pub fn from_matrix(matrix: Vec<f64>, n: usize) -> Result<Self> {
        if matrix.len() != n * n {
            return Err(Error::Invalid(format!(
                "covariance data length {} does not match n = {n}",
                matrix.len()
            )));
        }
        let scale = matrix.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..n {
            for j in i + 1..n {
                if (matrix[i * n + j] - matrix[j * n + i]).abs() > 1e-12 * scale {
                    return Err(Error::Invalid(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let cholesky_factor = match linalg::cholesky(&matrix, n) {
            Ok(l) => l,
            Err(_) => {
                let min = smallest_eigenvalue(&matrix, n)?;
                return Err(Error::NotPositiveDefinite {
                    min_eigenvalue: min,
                });
            }
        };
        Ok(CovarianceModel {
            n,
            matrix,
            cholesky_factor,
            degenerate: false,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
        CovarianceModel {
            n,
            matrix: m.clone(),
            cholesky_factor: m,
            degenerate: false,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn cholesky_factor(&self) -> &[f64] {
        &self.cholesky_factor
    }

    /// Scales the covariance by `s` (factor by √s). `s = 0` produces the
    /// degenerate zero covariance, valid only as a sampling bypass in tests.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        if s < 0.0 {
            return Err(Error::Invalid("covariance scale must be >= 0".into()));
        }
        let matrix: Vec<f64> = self.matrix.iter().map(|v| v * s).collect();
        let cholesky_factor: Vec<f64> =
            self.cholesky_factor.iter().map(|v| v * s.sqrt()).collect();
        Ok(CovarianceModel {
            n: self.n,
            matrix,
            cholesky_factor,
            degenerate: s == 0.0,
        })
    }

    /// Solves A x = b through the Cholesky factor.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if self.degenerate {
            return Err(Error::Invalid("degenerate covariance is singular".into()));
        }
        if b.len() != self.n {
            return Err(Error::Invalid(format!(
                "solve rhs length {} does not match n = {}",
                b.len(),
                self.n
            )));
        }
        Ok(linalg::cholesky_solve(&self.cholesky_factor, self.n, b))
    }

    /// Dense inverse, for quadratic forms embedded in differentiable losses.
    pub fn inverse(&self) -> Result<Vec<f64>> {
        if self.degenerate {
            return Err(Error::Invalid("degenerate covariance is singular".into()));
        }
        Ok(linalg::cholesky_inverse(&self.cholesky_factor, self.n))
    }

    /// rᵀ A⁻¹ r via Cholesky solve.
    pub fn mahalanobis(&self, r: &[f64]) -> Result<f64> {
        let x = self.solve(r)?;
        Ok(linalg::dot(r, &x))
    }

    /// Covariance file: magic "WCOV", version, n, then n² row-major f64.
    /// The eigendecomposition is recomputed on load, never stored.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        io::write_magic(&mut w, b"WCOV")?;
        io::write_u32(&mut w, self.n as u32)?;
        io::write_f64_slice(&mut w, &self.matrix)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        io::read_magic(&mut r, b"WCOV")?;
        let n = io::read_u32(&mut r)? as usize;
        let matrix = io::read_f64_vec(&mut r, n * n)?;
        CovarianceModel::from_matrix(matrix, n)
    }
}

fn smallest_eigenvalue(matrix: &[f64], n: usize) -> Result<f64> {
    let (vals, _) = linalg::jacobi_eigen(matrix, n, 1e-12, 100)?;
    Ok(*vals.last().expect("non-empty spectrum"))
}

/// Orthonormal eigenvectors (columns) and descending eigenvalues.
#[derive(Clone, Debug)]
pub struct EigenDecomp {
    n: usize,
    eigvals: Vec<f64>,
    /// Row-major n×n; column k is the k-th eigenvector.
    eigvecs: Vec<f64>,
}

impl EigenDecomp {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    pub fn eigvecs(&self) -> &[f64] {
        &self.eigvecs
    }

    pub fn eigvec(&self, k: usize) -> Vec<f64> {
        (0..self.n).map(|r| self.eigvecs[r * self.n + k]).collect()
    }
}

/// Cyclic Jacobi eigendecomposition of the covariance; rotations continue
/// until the largest off-diagonal entry falls below 1e-12.
pub fn eigendecompose(cov: &CovarianceModel) -> Result<EigenDecomp> {
    let (eigvals, eigvecs) = linalg::jacobi_eigen(cov.matrix(), cov.n(), 1e-12, 100)?;
    Ok(EigenDecomp {
        n: cov.n(),
        eigvals,
        eigvecs,
    })
}

/// Wrapped-Gaussian correlation between two ring slots, normalized so the
/// zero-distance value is exactly 1. The wrapped form (a periodic sum of
/// Gaussians) keeps the circulant's spectrum positive, which the plain
/// min-distance Gaussian does not guarantee on short rings.
fn ring_kernel(a: usize, b: usize, period: usize, length_scale: f64) -> f64 {
    let d = {
        let raw = a.abs_diff(b) % period;
        raw.min(period - raw) as f64
    };
    if length_scale == 0.0 {
        return if d == 0.0 { 1.0 } else { 0.0 };
    }
    let p = period as f64;
    let wraps = (8.0 * length_scale / p).ceil() as i64 + 1;
    let s = |x: f64| -> f64 {
        (-wraps..=wraps)
            .map(|m| {
                let u = x + m as f64 * p;
                (-u * u / (2.0 * length_scale * length_scale)).exp()
            })
            .sum::<f64>()
    };
    s(d) / s(0.0)
}

/// Structured covariance over the two-scale state.
///
/// Built as the covariance of an explicit generative model, which keeps it
/// SPD for any `|cross_coupling| < 1`: with g a slow ring field
/// (wrapped-Gaussian kernel, unit variance) and f independent white noise
/// on the fast ring, the error is `σ_slow·g_k` on slow components and
/// `σ_fast·(ρ·g_parent + √(1−ρ²)·f_m)` on fast ones. The slow–slow block is
/// then `σ_slow²·K_slow(d)`, the slow–fast block
/// `ρ·σ_slow·σ_fast·K_slow(d(k, parent))`, and the fast–fast block
/// `σ_fast²(ρ²·K_slow(parents) + (1−ρ²)·δ)`. Correlated large scales over
/// uncorrelated fine scales puts the smallest eigenvalues on the fine slow
/// structures. `length_scale = 0` collapses the slow kernel to a delta and
/// the matrix to a diagonal. Jittered by 1e-10·I if needed before Cholesky
/// factorization.
pub fn build_covariance(
    cfg: &L96Config,
    sigma_slow: f64,
    sigma_fast: f64,
    length_scale: f64,
    cross_coupling: f64,
) -> Result<CovarianceModel> {
    if sigma_slow <= 0.0 || sigma_fast <= 0.0 {
        return Err(Error::Invalid("sigmas must be positive".into()));
    }
    if length_scale < 0.0 {
        return Err(Error::Invalid("length_scale must be >= 0".into()));
    }
    if cross_coupling.abs() >= 1.0 {
        return Err(Error::Invalid("|cross_coupling| must be < 1".into()));
    }
    let k = cfg.k;
    let jk = cfg.k * cfg.j;
    let n = cfg.n();
    let rho = cross_coupling;

    let k_slow = |a: usize, b: usize| ring_kernel(a, b, k, length_scale);

    let mut m = vec![0.0; n * n];
    for a in 0..k {
        for b in 0..k {
            m[a * n + b] = sigma_slow * sigma_slow * k_slow(a, b);
        }
    }
    for a in 0..jk {
        for b in 0..jk {
            let white = if a == b { 1.0 } else { 0.0 };
            m[(k + a) * n + (k + b)] = sigma_fast
                * sigma_fast
                * (rho * rho * k_slow(a / cfg.j, b / cfg.j) + (1.0 - rho * rho) * white);
        }
    }
    for a in 0..k {
        for b in 0..jk {
            let v = rho * sigma_slow * sigma_fast * k_slow(a, b / cfg.j);
            m[a * n + (k + b)] = v;
            m[(k + b) * n + a] = v;
        }
    }

    match CovarianceModel::from_matrix(m.clone(), n) {
        Ok(cov) => Ok(cov),
        Err(_) => {
            for i in 0..n {
                m[i * n + i] += 1e-10;
            }
            match CovarianceModel::from_matrix(m.clone(), n) {
                Ok(cov) => Ok(cov),
                Err(_) => Err(Error::NotPositiveDefinite {
                    min_eigenvalue: smallest_eigenvalue(&m, n)?,
                }),
            }
        }
    }
}

/// One draw L·ξ with ξ i.i.d. standard normal from the counter-based
/// generator keyed by `seed`. Same seed, same sample.
pub fn sample_error(cov: &CovarianceModel, seed: u64) -> StateVec {
    let n = cov.n();
    let mut rng = Rng::from_tag(seed, "sample-error");
    let xi = rng.normal_vec(n);
    let l = cov.cholesky_factor();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..=i {
            s += l[i * n + j] * xi[j];
        }
        out[i] = s;
    }
    StateVec::new(out)
}

/// Truth plus reproducible correlated noise, aligned in time.
#[derive(Clone, Debug)]
pub struct ReanalysisSet {
    pub truth: Trajectory,
    pub reanalysis: Trajectory,
    pub cov: CovarianceModel,
    pub rng_seed: u64,
}

/// Builds the reanalysis trajectory `truth[i] + sample_error(cov, seed ⊕ i)`.
/// With `exact_initial` the index-0 state is left exactly the truth.
pub fn make_reanalysis(
    truth: &Trajectory,
    cov: &CovarianceModel,
    seed: u64,
    exact_initial: bool,
) -> Result<ReanalysisSet> {
    if truth.dim() != cov.n() {
        return Err(Error::Invalid(format!(
            "truth dimension {} does not match covariance n = {}",
            truth.dim(),
            cov.n()
        )));
    }
    let mut states = Vec::with_capacity(truth.len());
    for (i, s) in truth.states.iter().enumerate() {
        if i == 0 && exact_initial {
            states.push(s.clone());
            continue;
        }
        let noise = sample_error(cov, seed ^ i as u64);
        let vals: Vec<f64> = s
            .values()
            .iter()
            .zip(noise.values())
            .map(|(a, b)| a + b)
            .collect();
        states.push(StateVec::new(vals));
    }
    Ok(ReanalysisSet {
        truth: truth.clone(),
        reanalysis: Trajectory::new(states, truth.dt_between, truth.t0)?,
        cov: cov.clone(),
        rng_seed: seed,
    })
}

/// Projects an error vector onto the eigenbasis: α = Uᵀε.
pub fn project_error(eps: &[f64], eig: &EigenDecomp) -> Result<Vec<f64>> {
    if eps.len() != eig.n() {
        return Err(Error::Invalid(format!(
            "error length {} does not match eigenbasis n = {}",
            eps.len(),
            eig.n()
        )));
    }
    let n = eig.n();
    let mut alpha = vec![0.0; n];
    for (k, a) in alpha.iter_mut().enumerate() {
        let mut s = 0.0;
        for r in 0..n {
            s += eig.eigvecs[r * n + k] * eps[r];
        }
        *a = s;
    }
    Ok(alpha)
}

/// εᵀA⁻¹ε evaluated in the eigenbasis as Σ λ_k⁻¹ α_k².
pub fn quadratic_form(eps: &[f64], eig: &EigenDecomp) -> Result<f64> {
    if let Some(bad) = eig.eigvals().iter().find(|l| **l <= 0.0) {
        return Err(Error::Domain(format!(
            "quadratic form requires positive eigenvalues, found {bad}"
        )));
    }
    let alpha = project_error(eps, eig)?;
    Ok(alpha
        .iter()
        .zip(eig.eigvals())
        .map(|(a, l)| a * a / l)
        .sum())
}
