//! Adam optimizer and learning-rate schedules, shared by the autoencoder
//! and forecast training loops.

use crate::error::{Error, Result};
use crate::io;
use crate::nn::{read_params, write_params};
use crate::tensor::{GradMap, ParamStore, Tensor};
use std::io::{Read, Write};

/// First/second-moment accumulators with bias-corrected updates.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (name, t) in params.iter() {
            m.insert(name, Tensor::zeros(t.shape().to_vec()));
            v.insert(name, Tensor::zeros(t.shape().to_vec()));
        }
        OptimizerState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_f64(w, self.beta1)?;
        io::write_f64(w, self.beta2)?;
        io::write_f64(w, self.eps)?;
        io::write_u64(w, self.step)?;
        write_params(w, &self.m)?;
        write_params(w, &self.v)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let beta1 = io::read_f64(r)?;
        let beta2 = io::read_f64(r)?;
        let eps = io::read_f64(r)?;
        let step = io::read_u64(r)?;
        let m = read_params(r)?;
        let v = read_params(r)?;
        Ok(OptimizerState {
            beta1,
            beta2,
            eps,
            step,
            m,
            v,
        })
    }
}

/// One bias-corrected adaptive-moment update. Rejects non-finite gradients
/// before touching any parameter.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradMap,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::Divergence {
                step: opt.step as usize,
                loss: f64::NAN,
                grad_norm: f64::INFINITY,
            });
        }
        if params.get(name).is_none() {
            return Err(Error::Invalid(format!("gradient for unknown parameter {name}")));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (name, g) in grads {
        let m = opt.m.get_mut(name).expect("moment matches params");
        let v = opt.v.get_mut(name).expect("moment matches params");
        let p = params.get_mut(name).expect("checked above");
        let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
        for ((mi, vi), (pi, gi)) in md
            .iter_mut()
            .zip(vd.iter_mut())
            .zip(pd.iter_mut().zip(g.data()))
        {
            *mi = opt.beta1 * *mi + (1.0 - opt.beta1) * gi;
            *vi = opt.beta2 * *vi + (1.0 - opt.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Global L2 norm across all gradients.
pub fn grad_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .map(|t| t.data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// In-place rescaling so the global norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grads(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        for t in grads.values_mut() {
            for g in t.data_mut() {
                *g *= f;
            }
        }
    }
    norm
}

/// Linear warm-up to `peak` over `warmup_steps`, then cosine decay to
/// `floor` at `total_steps`, constant at `floor` afterwards.
pub fn warmup_cosine(step: u64, peak: f64, warmup_steps: u64, total_steps: u64, floor: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps || total_steps <= warmup_steps {
        return floor;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn store(v: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::vector(v));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = store(vec![1.0, -2.0]);
        let mut opt = OptimizerState::new(&params);
        let mut grads = GradMap::new();
        grads.insert("p".into(), Tensor::vector(vec![0.0, 0.0]));
        adam_step(&mut params, &grads, &mut opt, 0.1).unwrap();
        assert_eq!(params.get("p").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_step_magnitude_approaches_lr() {
        // With a constant gradient m̂/√v̂ → 1, so |Δp| → lr.
        let mut params = store(vec![0.0]);
        let mut opt = OptimizerState::new(&params);
        let mut grads = GradMap::new();
        grads.insert("p".into(), Tensor::vector(vec![0.37]));
        let lr = 1e-3;
        let mut prev = params.get("p").unwrap().data()[0];
        let mut last_step = 0.0;
        for _ in 0..2000 {
            adam_step(&mut params, &grads, &mut opt, lr).unwrap();
            let cur = params.get("p").unwrap().data()[0];
            last_step = (cur - prev).abs();
            prev = cur;
        }
        assert!((last_step - lr).abs() < 0.02 * lr, "step {last_step}");
    }

    #[test]
    fn non_finite_gradient_rejected_params_untouched() {
        let mut params = store(vec![1.0]);
        let before = params.clone();
        let mut opt = OptimizerState::new(&params);
        let mut grads = GradMap::new();
        grads.insert("p".into(), Tensor::vector(vec![f64::NAN]));
        assert!(adam_step(&mut params, &grads, &mut opt, 0.1).is_err());
        assert_eq!(params, before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut params = store(vec![0.5, -0.25, 2.0]);
            let mut opt = OptimizerState::new(&params);
            for k in 0..50 {
                let mut grads = BTreeMap::new();
                grads.insert(
                    "p".to_string(),
                    Tensor::vector(vec![0.1 * k as f64, -0.2, 0.05]),
                );
                adam_step(&mut params, &grads, &mut opt, 3e-3).unwrap();
            }
            params
                .get("p")
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clip_reduces_norm() {
        let mut grads = GradMap::new();
        grads.insert("p".into(), Tensor::vector(vec![3.0, 4.0]));
        let pre = clip_grads(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        assert!((grad_norm(&grads) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_cosine_shape() {
        let (peak, floor) = (5e-4, 1e-6);
        assert_eq!(warmup_cosine(0, peak, 100, 1000, floor), 0.0);
        assert_eq!(warmup_cosine(100, peak, 100, 1000, floor), peak);
        let mid = warmup_cosine(550, peak, 100, 1000, floor);
        assert!((mid - (floor + 0.5 * (peak - floor))).abs() < 1e-9);
        assert_eq!(warmup_cosine(1000, peak, 100, 1000, floor), floor);
        assert_eq!(warmup_cosine(5000, peak, 100, 1000, floor), floor);
    }

    #[test]
    fn optimizer_state_roundtrip() {
        let mut params = store(vec![0.5, -0.25]);
        let mut opt = OptimizerState::new(&params);
        let mut grads = GradMap::new();
        grads.insert("p".into(), Tensor::vector(vec![0.3, 0.7]));
        adam_step(&mut params, &grads, &mut opt, 1e-3).unwrap();
        let mut buf = Vec::new();
        opt.write_to(&mut buf).unwrap();
        let back = OptimizerState::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, opt);
    }
}
