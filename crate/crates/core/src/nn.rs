//! Shared MLP machinery: layer-size specs, parameter naming and
//! initialization, per-component normalization, and forward passes both as
//! plain f64 evaluation and recorded on an autodiff tape.
//!
//! Hidden layers use tanh; the output layer is linear, so a spec with no
//! hidden sizes is an exactly linear map.

use crate::error::{Error, Result};
use crate::io;
use crate::rng::Rng;
use crate::tensor::{NodeId, ParamStore, Tape, Tensor};
use std::collections::BTreeMap;
use std::io::{Read, Write};

/// Layer widths including input and output, e.g. [40, 128, 128, 40].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Invalid(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(MlpSpec { sizes })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    fn weight_name(&self, prefix: &str, layer: usize) -> String {
        format!("{prefix}.{layer}.w")
    }

    fn bias_name(&self, prefix: &str, layer: usize) -> String {
        format!("{prefix}.{layer}.b")
    }

    /// Inserts freshly initialized parameters under `prefix` into `store`.
    /// Weights are scaled by 1/√fan_in; biases start at zero. With
    /// `zero_final` the last layer is zero-initialized, making residual
    /// models exact identities at init.
    pub fn init_params(
        &self,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut Rng,
        zero_final: bool,
    ) {
        for l in 0..self.layer_count() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let last = l + 1 == self.sizes.len() - 1;
            let data: Vec<f64> = if last && zero_final {
                vec![0.0; fan_in * fan_out]
            } else {
                let scale = 1.0 / (fan_in as f64).sqrt();
                (0..fan_in * fan_out).map(|_| scale * rng.normal()).collect()
            };
            store.insert(
                &self.weight_name(prefix, l),
                Tensor::matrix(fan_in, fan_out, data).unwrap(),
            );
            store.insert(&self.bias_name(prefix, l), Tensor::vector(vec![0.0; fan_out]));
        }
    }

    /// Plain forward pass reading weights from `store`.
    pub fn forward(&self, prefix: &str, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Invalid(format!(
                "mlp input length {} does not match spec input {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut h = x.to_vec();
        for l in 0..self.layer_count() {
            let w = self.weight(prefix, store, l)?;
            let b = self.bias(prefix, store, l)?;
            let fan_out = self.sizes[l + 1];
            let mut next = b.data().to_vec();
            for (i, hi) in h.iter().enumerate() {
                if *hi == 0.0 {
                    continue;
                }
                let row = &w.data()[i * fan_out..(i + 1) * fan_out];
                for (nj, rj) in next.iter_mut().zip(row) {
                    *nj += hi * rj;
                }
            }
            h = if l + 1 < self.layer_count() {
                next.iter().map(|v| v.tanh()).collect()
            } else {
                next
            };
        }
        Ok(h)
    }

    fn weight<'a>(&self, prefix: &str, store: &'a ParamStore, l: usize) -> Result<&'a Tensor> {
        store
            .get(&self.weight_name(prefix, l))
            .ok_or_else(|| Error::Invalid(format!("missing weight {prefix}.{l}.w")))
    }

    fn bias<'a>(&self, prefix: &str, store: &'a ParamStore, l: usize) -> Result<&'a Tensor> {
        store
            .get(&self.bias_name(prefix, l))
            .ok_or_else(|| Error::Invalid(format!("missing bias {prefix}.{l}.b")))
    }

    /// Forward pass on a tape; `nodes` maps parameter names to tape leaves
    /// (trainable or frozen, as the caller bound them).
    pub fn forward_tape(
        &self,
        prefix: &str,
        tape: &mut Tape,
        nodes: &BTreeMap<String, NodeId>,
        x: NodeId,
    ) -> Result<NodeId> {
        let mut h = x;
        for l in 0..self.layer_count() {
            let w = *nodes
                .get(&self.weight_name(prefix, l))
                .ok_or_else(|| Error::Invalid(format!("missing weight node {prefix}.{l}.w")))?;
            let b = *nodes
                .get(&self.bias_name(prefix, l))
                .ok_or_else(|| Error::Invalid(format!("missing bias node {prefix}.{l}.b")))?;
            let z = tape.matmul(h, w)?;
            let z = tape.add(z, b)?;
            h = if l + 1 < self.layer_count() {
                tape.tanh(z)
            } else {
                z
            };
        }
        Ok(h)
    }

    /// Subset of `store` belonging to this spec's prefix.
    pub fn extract(&self, prefix: &str, store: &ParamStore) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for l in 0..self.layer_count() {
            for name in [self.weight_name(prefix, l), self.bias_name(prefix, l)] {
                let t = store
                    .get(&name)
                    .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))?;
                out.insert(&name, t.clone());
            }
        }
        Ok(out)
    }
}

/// Per-component shift and scale fitted on training states.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    /// Identity normalization.
    pub fn none(n: usize) -> Self {
        Normalization {
            mean: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Componentwise mean and standard deviation over rows; scales are
    /// floored at 1e-8 to stay positive.
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Invalid("cannot fit normalization on no data".into()));
        }
        let n = rows[0].len();
        let count = rows.len() as f64;
        let mut mean = vec![0.0; n];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        let mut var = vec![0.0; n];
        for r in rows {
            for i in 0..n {
                let d = r[i] - mean[i];
                var[i] += d * d;
            }
        }
        let scale = var.iter().map(|v| (v / count).sqrt().max(1e-8)).collect();
        Ok(Normalization { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    /// Tape version of [`apply`](Self::apply).
    pub fn apply_tape(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mean = tape.input_vector(&self.mean);
        let inv_scale: Vec<f64> = self.scale.iter().map(|s| 1.0 / s).collect();
        let inv = tape.input_vector(&inv_scale);
        let centered = tape.sub(x, mean)?;
        tape.mul(centered, inv)
    }

    /// Rescales a normalized residual back to state units (no mean shift).
    pub fn scale_residual_tape(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let scale = tape.input_vector(&self.scale);
        tape.mul(x, scale)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_u32(w, self.dim() as u32)?;
        io::write_f64_slice(w, &self.mean)?;
        io::write_f64_slice(w, &self.scale)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let n = io::read_u32(r)? as usize;
        let mean = io::read_f64_vec(r, n)?;
        let scale = io::read_f64_vec(r, n)?;
        Ok(Normalization { mean, scale })
    }
}

/// Writes a parameter block: entry count, then (name, rank, dims, data).
pub fn write_params<W: Write>(w: &mut W, store: &ParamStore) -> Result<()> {
    io::write_u32(w, store.len() as u32)?;
    for (name, t) in store.iter() {
        io::write_string(w, name)?;
        io::write_u8(w, t.shape().len() as u8)?;
        for d in t.shape() {
            io::write_u32(w, *d as u32)?;
        }
        io::write_f64_slice(w, t.data())?;
    }
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R) -> Result<ParamStore> {
    let count = io::read_u32(r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = io::read_string(r)?;
        let rank = io::read_u8(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(io::read_u32(r)? as usize);
        }
        let len: usize = shape.iter().product();
        let data = io::read_f64_vec(r, len)?;
        store.insert(
            &name,
            Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("parameter {name}: {e}")))?,
        );
    }
    Ok(store)
}

pub fn write_sizes<W: Write>(w: &mut W, sizes: &[usize]) -> Result<()> {
    io::write_u32(w, sizes.len() as u32)?;
    for s in sizes {
        io::write_u32(w, *s as u32)?;
    }
    Ok(())
}

pub fn read_sizes<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let count = io::read_u32(r)? as usize;
    if count > 64 {
        return Err(Error::Corrupt(format!("implausible layer count {count}")));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(io::read_u32(r)? as usize);
    }
    Ok(out)
}
