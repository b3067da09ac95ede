//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! The tape is define-by-run: every forward operation appends a node holding
//! the computed value plus whatever the backward pass needs. Nodes are stored
//! in evaluation order, so the tape itself is a topological order of the DAG
//! and the backward pass is a single reverse sweep. Tapes are rebuilt per
//! forward pass and never shared across threads.
//!
//! Broadcasting is restricted to scalar-with-tensor; all other elementwise
//! operands must agree in shape exactly.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Dense row-major tensor of 64-bit floats.
///
/// Rank-0 tensors (`shape == []`, one element) act as scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Invalid(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Single-element tensors broadcast against any shape.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// Constant leaf: participates in forward, receives no reported gradient.
    Input,
    /// Named trainable leaf; the name-to-node map lives on the tape.
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat(NodeId, NodeId),
    Slice(NodeId, usize, usize),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Recording tape for one forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

/// Gradients keyed by parameter name, in the shape of each parameter.
pub type GradMap = BTreeMap<String, Tensor>;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Records a constant leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn input_vector(&mut self, data: &[f64]) -> NodeId {
        self.input(Tensor::vector(data.to_vec()))
    }

    pub fn input_scalar(&mut self, v: f64) -> NodeId {
        self.input(Tensor::scalar(v))
    }

    /// Records a named trainable leaf. Names must be unique per tape.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(Error::Invalid(format!(
                "parameter {name:?} bound twice on one tape"
            )));
        }
        let id = self.push(Op::Param, value);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Binds every entry of a [`ParamStore`] as a trainable leaf.
    pub fn bind_params(&mut self, store: &ParamStore) -> Result<BTreeMap<String, NodeId>> {
        let mut map = BTreeMap::new();
        for (name, tensor) in store.iter() {
            map.insert(name.clone(), self.param(name, tensor.clone())?);
        }
        Ok(map)
    }

    /// Binds every entry of a [`ParamStore`] as a frozen constant.
    pub fn bind_constants(&mut self, store: &ParamStore) -> BTreeMap<String, NodeId> {
        let mut map = BTreeMap::new();
        for (name, tensor) in store.iter() {
            map.insert(name.clone(), self.input(tensor.clone()));
        }
        map
    }

    fn matmul_dims(&self, a: NodeId, b: NodeId) -> Result<(usize, usize, usize)> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        let (r, k1) = match sa {
            [k] => (1, *k),
            [r, k] => (*r, *k),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        let (k2, c) = match sb {
            [k] => (*k, 1),
            [k, c] => (*k, *c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        if k1 != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok((r, k1, c))
    }

    /// Matrix product. Accepts 2-D×2-D, 1-D×2-D (row vector) and
    /// 2-D×1-D (column vector); 1-D operands keep rank 1 in the result.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, k, c) = self.matmul_dims(a, b)?;
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let row = &db[p * c..(p + 1) * c];
                let dst = &mut out[i * c..(i + 1) * c];
                for j in 0..c {
                    dst[j] += av * row[j];
                }
            }
        }
        let shape = match (self.value(a).shape().len(), self.value(b).shape().len()) {
            (1, 2) => vec![c],
            (2, 1) => vec![r],
            (1, 1) => vec![],
            _ => vec![r, c],
        };
        let value = Tensor { shape, data: out };
        Ok(self.push(Op::MatMul(a, b), value))
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let ta = self.value(a);
        let tb = self.value(b);
        let value = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| f(*x, *y))
                .collect();
            Tensor {
                shape: ta.shape().to_vec(),
                data,
            }
        } else if tb.is_scalar() {
            let s = tb.data()[0];
            Tensor {
                shape: ta.shape().to_vec(),
                data: ta.data().iter().map(|x| f(*x, s)).collect(),
            }
        } else if ta.is_scalar() {
            let s = ta.data()[0];
            Tensor {
                shape: tb.shape().to_vec(),
                data: tb.data().iter().map(|y| f(s, *y)).collect(),
            }
        } else {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("subtract", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("multiply", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplies by a compile-time constant scalar.
    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = Tensor {
            shape: self.value(a).shape().to_vec(),
            data: self.value(a).data().iter().map(|x| x * s).collect(),
        };
        self.push(Op::Scale(a, s), value)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let value = Tensor {
            shape: self.value(a).shape().to_vec(),
            data: self.value(a).data().iter().map(|x| f(*x)).collect(),
        };
        self.push(op, value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(v) = self.value(a).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        Ok(self.unary(a, f64::ln, Op::Ln(a)))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Reduces to a rank-0 scalar by summation.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Reduces to a rank-0 scalar by arithmetic mean.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    /// Concatenates along axis 0. Trailing dimensions must agree.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape().is_empty() || tb.shape().is_empty() || ta.shape()[1..] != tb.shape()[1..] {
            return Err(Error::ShapeMismatch {
                op: "concatenate",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut shape = ta.shape().to_vec();
        shape[0] += tb.shape()[0];
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        Ok(self.push(Op::Concat(a, b), Tensor { shape, data }))
    }

    /// Takes rows `[start, start + len)` along axis 0.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.shape().is_empty() || start + len > ta.shape()[0] {
            return Err(Error::Invalid(format!(
                "slice [{start}, {}) out of bounds for shape {:?}",
                start + len,
                ta.shape()
            )));
        }
        let row: usize = ta.shape()[1..].iter().product();
        let mut shape = ta.shape().to_vec();
        shape[0] = len;
        let data = ta.data()[start * row..(start + len) * row].to_vec();
        Ok(self.push(Op::Slice(a, start, len), Tensor { shape, data }))
    }

    /// Reverse sweep from a scalar root. Every parameter in `store` gets an
    /// entry; parameters the root does not depend on receive exact zeros.
    pub fn backward(&self, root: NodeId, store: &ParamStore) -> Result<GradMap> {
        if self.value(root).len() != 1 {
            return Err(Error::Invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let go = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Input | Op::Param => {
                    grads[idx] = Some(go);
                }
                Op::MatMul(a, b) => {
                    let (r, k, c) = self.matmul_dims(*a, *b).expect("recorded matmul");
                    let da = self.value(*a).data();
                    let db = self.value(*b).data();
                    // dA = dC · Bᵀ
                    let ga = grads[a.0].get_or_insert_with(|| vec![0.0; r * k]);
                    for i in 0..r {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..c {
                                s += go[i * c + j] * db[p * c + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                    // dB = Aᵀ · dC
                    let gb = grads[b.0].get_or_insert_with(|| vec![0.0; k * c]);
                    for p in 0..k {
                        for i in 0..r {
                            let av = da[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..c {
                                gb[p * c + j] += av * go[i * c + j];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate_broadcast(&mut grads, *a, &go, 1.0);
                    self.accumulate_broadcast(&mut grads, *b, &go, 1.0);
                }
                Op::Sub(a, b) => {
                    self.accumulate_broadcast(&mut grads, *a, &go, 1.0);
                    self.accumulate_broadcast(&mut grads, *b, &go, -1.0);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let out_len = va.len().max(vb.len());
                    let get = |t: &Tensor, i: usize| {
                        if t.is_scalar() {
                            t.data()[0]
                        } else {
                            t.data()[i]
                        }
                    };
                    let contrib_a: Vec<f64> =
                        (0..out_len).map(|i| go[i] * get(vb, i)).collect();
                    let contrib_b: Vec<f64> =
                        (0..out_len).map(|i| go[i] * get(va, i)).collect();
                    self.accumulate_broadcast(&mut grads, *a, &contrib_a, 1.0);
                    self.accumulate_broadcast(&mut grads, *b, &contrib_b, 1.0);
                }
                Op::Scale(a, s) => {
                    let contrib: Vec<f64> = go.iter().map(|g| g * s).collect();
                    self.accumulate(&mut grads, *a, &contrib);
                }
                Op::Tanh(a) => {
                    let out = self.value_at(idx).data();
                    let contrib: Vec<f64> = go
                        .iter()
                        .zip(out)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    self.accumulate(&mut grads, *a, &contrib);
                }
                Op::Exp(a) => {
                    let out = self.value_at(idx).data();
                    let contrib: Vec<f64> = go.iter().zip(out).map(|(g, y)| g * y).collect();
                    self.accumulate(&mut grads, *a, &contrib);
                }
                Op::Ln(a) => {
                    let xin = self.value(*a).data();
                    let contrib: Vec<f64> = go.iter().zip(xin).map(|(g, x)| g / x).collect();
                    self.accumulate(&mut grads, *a, &contrib);
                }
                Op::Square(a) => {
                    let xin = self.value(*a).data();
                    let contrib: Vec<f64> =
                        go.iter().zip(xin).map(|(g, x)| 2.0 * g * x).collect();
                    self.accumulate(&mut grads, *a, &contrib);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    let contrib = vec![go[0]; n];
                    self.accumulate(&mut grads, *a, &contrib);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    let contrib = vec![go[0] / n as f64; n];
                    self.accumulate(&mut grads, *a, &contrib);
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    self.accumulate(&mut grads, *a, &go[..na]);
                    self.accumulate(&mut grads, *b, &go[na..]);
                }
                Op::Slice(a, start, _len) => {
                    let ta = self.value(*a);
                    let row: usize = ta.shape()[1..].iter().product();
                    let ga = grads[a.0].get_or_insert_with(|| vec![0.0; ta.len()]);
                    for (i, g) in go.iter().enumerate() {
                        ga[start * row + i] += g;
                    }
                }
            }
        }

        let mut out = GradMap::new();
        for (name, tensor) in store.iter() {
            let grad = match self.params.get(name) {
                Some(id) => match &grads[id.0] {
                    Some(g) => Tensor {
                        shape: tensor.shape().to_vec(),
                        data: g.clone(),
                    },
                    None => Tensor::zeros(tensor.shape().to_vec()),
                },
                None => Tensor::zeros(tensor.shape().to_vec()),
            };
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }

    fn value_at(&self, idx: usize) -> &Tensor {
        &self.nodes[idx].value
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: NodeId, contrib: &[f64]) {
        let n = self.value(target).len();
        let g = grads[target.0].get_or_insert_with(|| vec![0.0; n]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    /// Accumulation that collapses onto a scalar operand by summation.
    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: NodeId,
        contrib: &[f64],
        sign: f64,
    ) {
        let n = self.value(target).len();
        let g = grads[target.0].get_or_insert_with(|| vec![0.0; n]);
        if n == contrib.len() {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += sign * ci;
            }
        } else {
            debug_assert_eq!(n, 1);
            g[0] += sign * contrib.iter().sum::<f64>();
        }
    }
}

/// Named parameter tensors with a stable flat ordering (lexicographic by name).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.entries.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Concatenates all tensors in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) against this store's shapes.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamStore> {
        if flat.len() != self.param_count() {
            return Err(Error::Invalid(format!(
                "flat length {} does not match parameter count {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut out = ParamStore::new();
        let mut offset = 0;
        for (name, t) in self.entries.iter() {
            let n = t.len();
            out.insert(
                name,
                Tensor {
                    shape: t.shape().to_vec(),
                    data: flat[offset..offset + n].to_vec(),
                },
            );
            offset += n;
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.all_finite())
    }
}

/// Max relative error between reverse-mode and central finite-difference
/// gradients of a scalar function of a [`ParamStore`].
///
/// The denominator is `max(|g_fd|, 1e-12)` per component.
pub fn grad_check<F>(f: F, point: &ParamStore, fd_step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &BTreeMap<String, NodeId>) -> Result<NodeId>,
{
    if fd_step <= 0.0 {
        return Err(Error::Invalid("fd_step must be positive".into()));
    }
    let mut tape = Tape::new();
    let nodes = tape.bind_params(point)?;
    let root = f(&mut tape, &nodes)?;
    let grads = tape.backward(root, point)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let nodes = tape.bind_params(store)?;
        let root = f(&mut tape, &nodes)?;
        tape.value(root).item()
    };

    let mut max_rel = 0.0f64;
    let flat = point.flatten();
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += fd_step;
        let mut minus = flat.clone();
        minus[i] -= fd_step;
        let fp = eval(&point.unflatten(&plus)?)?;
        let fm = eval(&point.unflatten(&minus)?)?;
        let g_fd = (fp - fm) / (2.0 * fd_step);
        let g_ad = grad_flat(&grads, point, i);
        let rel = (g_ad - g_fd).abs() / g_fd.abs().max(1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn grad_flat(grads: &GradMap, point: &ParamStore, flat_index: usize) -> f64 {
    let mut offset = 0;
    for (name, t) in point.iter() {
        if flat_index < offset + t.len() {
            return grads[name].data()[flat_index - offset];
        }
        offset += t.len();
    }
    unreachable!("flat index within param count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tensor_2x2(a: f64, b: f64, c: f64, d: f64) -> Tensor {
        Tensor::matrix(2, 2, vec![a, b, c, d]).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.input(tensor_2x2(1.0, 0.0, 0.0, 1.0));
        let m = tape.input(tensor_2x2(3.0, -1.0, 2.0, 5.0));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, -1.0, 2.0, 5.0]);
    }

    #[test]
    fn matmul_shape_mismatch_named() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.input(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"));
    }

    #[test]
    fn tanh_odd_at_origin() {
        let mut tape = Tape::new();
        let z = tape.input_vector(&[0.0, 0.0, 0.0]);
        let out = tape.tanh(z);
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sum_reduce() {
        let mut tape = Tape::new();
        let v = tape.input_vector(&[1.0, 2.0, 3.0]);
        let s = tape.sum(v);
        assert_eq!(tape.value(s).item().unwrap(), 6.0);
    }

    #[test]
    fn ln_rejects_non_positive() {
        let mut tape = Tape::new();
        let v = tape.input_vector(&[1.0, 0.0]);
        assert!(matches!(tape.ln(v), Err(Error::Domain(_))));
    }

    #[test]
    fn square_derivative() {
        // f(x) = x·x at x = 3 → df/dx = 6
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let nodes = tape.bind_params(&store).unwrap();
        let sq = tape.square(nodes["x"]);
        let root = tape.sum(sq);
        let grads = tape.backward(root, &store).unwrap();
        assert_eq!(grads["x"].data(), &[6.0]);
    }

    #[test]
    fn unreachable_param_gets_exact_zero() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::scalar(2.0));
        store.insert("unused", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let nodes = tape.bind_params(&store).unwrap();
        let root = tape.square(nodes["used"]);
        let grads = tape.backward(root, &store).unwrap();
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let nodes = tape.bind_params(&store).unwrap();
        let doubled = tape.scale(nodes["x"], 2.0);
        assert!(tape.backward(doubled, &store).is_err());
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.input_vector(&[1.0, 2.0]);
        let b = tape.input_vector(&[3.0, 4.0, 5.0]);
        let cat = tape.concat(a, b).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let back = tape.slice(cat, 2, 3).unwrap();
        assert_eq!(tape.value(back).data(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn scalar_broadcast_add_mul() {
        let mut tape = Tape::new();
        let v = tape.input_vector(&[1.0, 2.0, 3.0]);
        let s = tape.input_scalar(10.0);
        let shifted = tape.add(v, s).unwrap();
        assert_eq!(tape.value(shifted).data(), &[11.0, 12.0, 13.0]);
        let scaled = tape.mul(shifted, s).unwrap();
        assert_eq!(tape.value(scaled).data(), &[110.0, 120.0, 130.0]);
    }

    // Small MLP used by the finite-difference oracles below.
    fn mlp_params(sizes: &[usize], rng: &mut Rng) -> ParamStore {
        let mut store = ParamStore::new();
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| scale * rng.normal())
                .collect();
            let b: Vec<f64> = (0..fan_out).map(|_| 0.1 * rng.normal()).collect();
            store.insert(
                &format!("{l}.w"),
                Tensor::matrix(fan_in, fan_out, w).unwrap(),
            );
            store.insert(&format!("{l}.b"), Tensor::vector(b));
        }
        store
    }

    fn mlp_loss(
        tape: &mut Tape,
        nodes: &BTreeMap<String, NodeId>,
        sizes: &[usize],
        x: &[f64],
        y: &[f64],
    ) -> Result<NodeId> {
        let mut h = tape.input_vector(x);
        for l in 0..sizes.len() - 1 {
            let z = tape.matmul(h, nodes[&format!("{l}.w")])?;
            let z = tape.add(z, nodes[&format!("{l}.b")])?;
            h = if l + 1 < sizes.len() - 1 { tape.tanh(z) } else { z };
        }
        let target = tape.input_vector(y);
        let r = tape.sub(h, target)?;
        let r2 = tape.square(r);
        Ok(tape.sum(r2))
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        // 17 params: 2→3 (9) + 3→2 (8); rel err < 1e-6 at step 1e-5.
        let sizes = [2usize, 3, 2];
        let mut rng = Rng::new(11, 0);
        let store = mlp_params(&sizes, &mut rng);
        assert_eq!(store.param_count(), 17);
        let x = [0.3, -0.7];
        let y = [0.1, 0.5];
        let err = grad_check(
            |tape, nodes| mlp_loss(tape, nodes, &sizes, &x, &y),
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn three_layer_tanh_mlp_matches_finite_differences() {
        let sizes = [3usize, 5, 4, 1];
        let mut rng = Rng::new(23, 0);
        let store = mlp_params(&sizes, &mut rng);
        let x = [0.2, -0.4, 0.9];
        let y = [0.3];
        let err = grad_check(
            |tape, nodes| mlp_loss(tape, nodes, &sizes, &x, &y),
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn grad_check_quadratic_analytic() {
        // f(p) = pᵀp has gradient 2p; AD and FD agree to 1e-9.
        let mut rng = Rng::new(7, 0);
        let mut store = ParamStore::new();
        store.insert(
            "p",
            Tensor::vector((0..6).map(|_| rng.normal()).collect()),
        );
        let err = grad_check(
            |tape, nodes| {
                let sq = tape.square(nodes["p"]);
                Ok(tape.sum(sq))
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "max rel err {err}");
    }

    #[test]
    fn grad_check_constant_function() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(vec![1.0, -2.0]));
        let err = grad_check(
            |tape, _nodes| Ok(tape.input_scalar(4.2)),
            &store,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn per_op_gradients_match_finite_differences() {
        // Every differentiable op kind exercised through one composite scalar.
        let mut rng = Rng::new(99, 0);
        let mut store = ParamStore::new();
        store.insert(
            "m",
            Tensor::matrix(3, 3, (0..9).map(|_| 0.5 * rng.normal()).collect()).unwrap(),
        );
        store.insert(
            "v",
            Tensor::vector((0..3).map(|_| 0.5 + 0.1 * rng.normal()).collect()),
        );
        store.insert("s", Tensor::scalar(1.3));
        let err = grad_check(
            |tape, nodes| {
                let mv = tape.matmul(nodes["v"], nodes["m"])?;
                let t = tape.tanh(mv);
                let e = tape.exp(t);
                let sq = tape.square(e);
                let sc = tape.scale(sq, 0.7);
                let shifted = tape.add(sc, nodes["s"])?;
                let l = tape.ln(shifted)?;
                let prod = tape.mul(l, nodes["v"])?;
                let diff = tape.sub(prod, nodes["v"])?;
                let cat = tape.concat(diff, nodes["v"])?;
                let sl = tape.slice(cat, 1, 4)?;
                let m1 = tape.mean(sl);
                let s1 = tape.sum(sl);
                tape.add(m1, s1)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn gradient_linearity_on_shared_tape() {
        // grad(a·f + b·g) == a·grad(f) + b·grad(g) to 1e-12.
        let mut rng = Rng::new(5, 0);
        let mut store = ParamStore::new();
        store.insert(
            "p",
            Tensor::vector((0..4).map(|_| rng.normal()).collect()),
        );
        let (a, b) = (2.5, -1.25);

        let build = |tape: &mut Tape, nodes: &BTreeMap<String, NodeId>| {
            let f = {
                let sq = tape.square(nodes["p"]);
                tape.sum(sq)
            };
            let g = {
                let t = tape.tanh(nodes["p"]);
                tape.sum(t)
            };
            (f, g)
        };

        let mut tape = Tape::new();
        let nodes = tape.bind_params(&store).unwrap();
        let (f, g) = build(&mut tape, &nodes);
        let gf = tape.backward(f, &store).unwrap();
        let gg = tape.backward(g, &store).unwrap();

        let mut tape2 = Tape::new();
        let nodes2 = tape2.bind_params(&store).unwrap();
        let (f2, g2) = build(&mut tape2, &nodes2);
        let af = tape2.scale(f2, a);
        let bg = tape2.scale(g2, b);
        let combo = tape2.add(af, bg).unwrap();
        let gc = tape2.backward(combo, &store).unwrap();

        for i in 0..4 {
            let expect = a * gf["p"].data()[i] + b * gg["p"].data()[i];
            assert!((gc["p"].data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_and_backward_deterministic() {
        let run = || {
            let mut rng = Rng::new(31, 0);
            let sizes = [4usize, 6, 4];
            let store = mlp_params(&sizes, &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let y: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let mut tape = Tape::new();
            let nodes = tape.bind_params(&store).unwrap();
            let root = mlp_loss(&mut tape, &nodes, &sizes, &x, &y).unwrap();
            let v = tape.value(root).item().unwrap();
            let g = tape.backward(root, &store).unwrap();
            (v.to_bits(), g["0.w"].data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn flatten_unflatten_identity() {
        let mut rng = Rng::new(3, 0);
        let mut store = ParamStore::new();
        store.insert("b.w", Tensor::matrix(2, 3, (0..6).map(|_| rng.normal()).collect()).unwrap());
        store.insert("a.v", Tensor::vector((0..4).map(|_| rng.normal()).collect()));
        let flat = store.flatten();
        assert_eq!(flat.len(), store.param_count());
        let back = store.unflatten(&flat).unwrap();
        assert_eq!(back, store);
    }
}
