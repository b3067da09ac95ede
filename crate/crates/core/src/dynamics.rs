//! Two-scale Lorenz-96 truth dynamics.
//!
//! A ring of K slow variables, each coupled to J fast sub-variables that form
//! a second ring of length K·J. The slow advection is energy-conserving, the
//! fast ring evolves c times faster with amplitudes reduced by b, and the
//! coupling exchanges energy between the scales:
//!
//!   dX_k/dt = X_{k−1}(X_{k+1} − X_{k−2}) − X_k + F − (hc/b) Σ_j Y_{j,k}
//!   dY_m/dt = c·b·Y_{m+1}(Y_{m−1} − Y_{m+2}) − c·Y_m + (hc/b)·X_{k(m)}
//!
//! with cyclic indices in both rings (the fast ring wraps across slow
//! sectors). State layout is `[X_0 .. X_{K−1}, Y_{0,0} .. Y_{J−1,K−1}]` with
//! the fast block of slow sector k occupying `K + k·J ..= K + k·J + J − 1`.

use crate::error::{Error, Result};
use crate::io;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Configuration of the two-scale system.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct L96Config {
    /// Slow ring length.
    pub k: usize,
    /// Fast variables per slow variable.
    pub j: usize,
    /// Forcing.
    pub f: f64,
    /// Coupling strength.
    pub h: f64,
    /// Time-scale ratio of fast to slow.
    pub c: f64,
    /// Amplitude ratio of slow to fast.
    pub b: f64,
    /// Integration step in model time units.
    pub dt: f64,
}

impl L96Config {
    pub fn new(k: usize, j: usize, f: f64, h: f64, c: f64, b: f64, dt: f64) -> Result<Self> {
        if k < 4 {
            return Err(Error::Invalid(format!("K must be at least 4, got {k}")));
        }
        if j < 1 {
            return Err(Error::Invalid(format!("J must be at least 1, got {j}")));
        }
        if dt <= 0.0 || c <= 0.0 || b <= 0.0 {
            return Err(Error::Invalid(
                "dt, c and b must all be positive".to_string(),
            ));
        }
        Ok(L96Config { k, j, f, h, c, b, dt })
    }

    /// K=8, J=4, F=8, h=1, c=10, b=10, dt=0.005: chaotic, genuinely
    /// two-scale, and small enough (n = 40) for dense covariance work.
    pub fn default_lab() -> Self {
        L96Config {
            k: 8,
            j: 4,
            f: 8.0,
            h: 1.0,
            c: 10.0,
            b: 10.0,
            dt: 0.005,
        }
    }

    /// Total state dimension n = K + K·J.
    pub fn n(&self) -> usize {
        self.k + self.k * self.j
    }
}

/// Flat system state, slow ring first.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVec {
    values: Vec<f64>,
}

impl StateVec {
    pub fn new(values: Vec<f64>) -> Self {
        StateVec { values }
    }

    pub fn zeros(n: usize) -> Self {
        StateVec {
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn slow<'a>(&'a self, cfg: &L96Config) -> &'a [f64] {
        &self.values[..cfg.k]
    }

    pub fn fast<'a>(&'a self, cfg: &L96Config) -> &'a [f64] {
        &self.values[cfg.k..]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Uniformly spaced sequence of states.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<StateVec>,
    pub dt_between: f64,
    pub t0: f64,
}

impl Trajectory {
    pub fn new(states: Vec<StateVec>, dt_between: f64, t0: f64) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Invalid("trajectory must be non-empty".into()));
        }
        let n = states[0].len();
        if states.iter().any(|s| s.len() != n) {
            return Err(Error::Invalid(
                "trajectory states must all have the same length".into(),
            ));
        }
        Ok(Trajectory {
            states,
            dt_between,
            t0,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// Binary trajectory file: magic "WCLB", version, n, count, dt, t0,
    /// then count·n little-endian f64 values in time order.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        io::write_magic(&mut w, b"WCLB")?;
        io::write_u32(&mut w, self.dim() as u32)?;
        io::write_u32(&mut w, self.len() as u32)?;
        io::write_f64(&mut w, self.dt_between)?;
        io::write_f64(&mut w, self.t0)?;
        for s in &self.states {
            io::write_f64_slice(&mut w, s.values())?;
        }
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        io::read_magic(&mut r, b"WCLB")?;
        let n = io::read_u32(&mut r)? as usize;
        let count = io::read_u32(&mut r)? as usize;
        let dt_between = io::read_f64(&mut r)?;
        let t0 = io::read_f64(&mut r)?;
        let mut states = Vec::with_capacity(count);
        for _ in 0..count {
            states.push(StateVec::new(io::read_f64_vec(&mut r, n)?));
        }
        Trajectory::new(states, dt_between, t0)
    }
}

/// Time derivative of the two-scale system at `state`.
pub fn tendency(state: &StateVec, cfg: &L96Config) -> Result<StateVec> {
    let n = cfg.n();
    if state.len() != n {
        return Err(Error::Invalid(format!(
            "state length {} does not match config n = {n}",
            state.len()
        )));
    }
    let k = cfg.k;
    let jk = cfg.k * cfg.j;
    let x = &state.values()[..k];
    let y = &state.values()[k..];
    let coupling = cfg.h * cfg.c / cfg.b;

    let mut d = vec![0.0; n];
    for i in 0..k {
        let im1 = (i + k - 1) % k;
        let im2 = (i + k - 2) % k;
        let ip1 = (i + 1) % k;
        let fast_sum: f64 = y[i * cfg.j..(i + 1) * cfg.j].iter().sum();
        d[i] = x[im1] * (x[ip1] - x[im2]) - x[i] + cfg.f - coupling * fast_sum;
    }
    for m in 0..jk {
        let mp1 = (m + 1) % jk;
        let mp2 = (m + 2) % jk;
        let mm1 = (m + jk - 1) % jk;
        let parent = m / cfg.j;
        d[k + m] =
            cfg.c * cfg.b * y[mp1] * (y[mm1] - y[mp2]) - cfg.c * y[m] + coupling * x[parent];
    }
    Ok(StateVec::new(d))
}

/// One classical RK4 step of an arbitrary autonomous system.
pub fn rk4_step_with<F>(f: F, state: &[f64], dt: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = state.len();
    let k1 = f(state);
    let mut tmp: Vec<f64> = (0..n).map(|i| state[i] + 0.5 * dt * k1[i]).collect();
    let k2 = f(&tmp);
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * dt * k2[i];
    }
    let k3 = f(&tmp);
    for i in 0..n {
        tmp[i] = state[i] + dt * k3[i];
    }
    let k4 = f(&tmp);
    (0..n)
        .map(|i| state[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// One RK4 step of the two-scale system with the config's dt.
pub fn rk4_step(state: &StateVec, cfg: &L96Config) -> Result<StateVec> {
    // Propagate dimension errors before stepping.
    tendency(state, cfg)?;
    let next = rk4_step_with(
        |s| {
            tendency(&StateVec::new(s.to_vec()), cfg)
                .expect("dimension checked above")
                .into_values()
        },
        state.values(),
        cfg.dt,
    );
    let next = StateVec::new(next);
    if !next.all_finite() {
        return Err(Error::Blowup {
            context: "rk4_step".into(),
            step: 0,
        });
    }
    Ok(next)
}

/// Integrates `steps` RK4 steps, saving every `save_every`-th state.
///
/// The result holds floor(steps/save_every) + 1 states, the first being the
/// initial condition.
pub fn integrate(
    init: &StateVec,
    steps: usize,
    save_every: usize,
    cfg: &L96Config,
) -> Result<Trajectory> {
    if steps < 1 || save_every < 1 {
        return Err(Error::Invalid(
            "steps and save_every must be at least 1".into(),
        ));
    }
    let mut states = Vec::with_capacity(steps / save_every + 1);
    states.push(init.clone());
    let mut current = init.clone();
    for step in 1..=steps {
        current = rk4_step(&current, cfg).map_err(|e| match e {
            Error::Blowup { context, .. } => Error::Blowup { context, step },
            other => other,
        })?;
        if step % save_every == 0 {
            states.push(current.clone());
        }
    }
    Trajectory::new(states, cfg.dt * save_every as f64, 0.0)
}

/// Runs `spinup_steps` and returns the final state only.
pub fn spin_up(init: &StateVec, spinup_steps: usize, cfg: &L96Config) -> Result<StateVec> {
    let mut current = init.clone();
    for step in 1..=spinup_steps {
        current = rk4_step(&current, cfg).map_err(|e| match e {
            Error::Blowup { context, .. } => Error::Blowup { context, step },
            other => other,
        })?;
    }
    Ok(current)
}

/// Removes fine scales: the slow ring is replaced by the inverse transform
/// of its DFT truncated to wavenumbers 0..=keep, and fast variables are
/// zeroed. `keep == K/2` retains the slow ring exactly.
pub fn smooth_state(state: &StateVec, keep_wavenumbers: usize, cfg: &L96Config) -> Result<StateVec> {
    if keep_wavenumbers > cfg.k / 2 {
        return Err(Error::Invalid(format!(
            "keep_wavenumbers {keep_wavenumbers} exceeds K/2 = {}",
            cfg.k / 2
        )));
    }
    if state.len() != cfg.n() {
        return Err(Error::Invalid(
            "state length does not match config".into(),
        ));
    }
    let k = cfg.k;
    let x = state.slow(cfg);
    // Direct DFT of the slow ring.
    let mut re = vec![0.0; k];
    let mut im = vec![0.0; k];
    for w in 0..k {
        for (i, xi) in x.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * (w * i) as f64 / k as f64;
            re[w] += xi * ang.cos();
            im[w] += xi * ang.sin();
        }
    }
    // Zero all modes with min(w, K−w) > keep, then invert.
    for w in 0..k {
        let wavenumber = w.min(k - w);
        if wavenumber > keep_wavenumbers {
            re[w] = 0.0;
            im[w] = 0.0;
        }
    }
    let mut out = vec![0.0; cfg.n()];
    for (i, o) in out.iter_mut().enumerate().take(k) {
        let mut s = 0.0;
        for w in 0..k {
            let ang = 2.0 * std::f64::consts::PI * (w * i) as f64 / k as f64;
            s += re[w] * ang.cos() - im[w] * ang.sin();
        }
        *o = s / k as f64;
    }
    Ok(StateVec::new(out))
}
