use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Result, RtaError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub weight_decay_exempt: bool,
    /// Frozen parameters receive no update at all.
    pub frozen: bool,
}

/// Named learnable tensors of one model. Insertion order is the stable
/// iteration (and serialization) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, weight_decay_exempt: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(RtaError::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            weight_decay_exempt,
            frozen: false,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}

/// Gradient for one parameter: a dense buffer for weights used whole, and
/// per-row buffers for embedding tables touched through row gathers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradBuf {
    pub dense: Option<Vec<f32>>,
    pub rows: BTreeMap<usize, Vec<f32>>,
}

impl GradBuf {
    fn merge(&mut self, other: GradBuf) {
        match (&mut self.dense, other.dense) {
            (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (slot @ None, Some(b)) => *slot = Some(b),
            _ => {}
        }
        for (r, g) in other.rows {
            match self.rows.get_mut(&r) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                None => {
                    self.rows.insert(r, g);
                }
            }
        }
    }

    /// Materializes the full gradient (testing and gradient checks).
    pub fn to_dense(&self, len: usize, cols: usize) -> Vec<f32> {
        let mut out = self.dense.clone().unwrap_or_else(|| vec![0.0; len]);
        for (r, g) in &self.rows {
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                *o += *v;
            }
        }
        out
    }
}

/// Gradients keyed by parameter, accumulated over any number of backward passes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    bufs: BTreeMap<ParamId, GradBuf>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&GradBuf> {
        self.bufs.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &GradBuf)> {
        self.bufs.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub(crate) fn add_dense(&mut self, id: ParamId, grad: &[f32]) {
        let buf = self.bufs.entry(id).or_default();
        match &mut buf.dense {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += *g),
            None => buf.dense = Some(grad.to_vec()),
        }
    }

    pub(crate) fn add_row(&mut self, id: ParamId, row: usize, grad: &[f32]) {
        let buf = self.bufs.entry(id).or_default();
        match buf.rows.get_mut(&row) {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += *g),
            None => {
                buf.rows.insert(row, grad.to_vec());
            }
        }
    }

    /// Adds `other` into `self`. Callers merge in a fixed order to keep the
    /// floating-point reduction deterministic.
    pub fn merge(&mut self, other: Gradients) {
        for (id, buf) in other.bufs {
            self.bufs.entry(id).or_default().merge(buf);
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for buf in self.bufs.values_mut() {
            if let Some(d) = &mut buf.dense {
                d.iter_mut().for_each(|v| *v *= factor);
            }
            for g in buf.rows.values_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Euclidean norm over every parameter's gradient.
    pub fn global_norm(&self, params: &ParamStore) -> f64 {
        let sq = |v: &[f32]| v.iter().map(|&x| x as f64 * x as f64).sum::<f64>();
        self.bufs
            .iter()
            .map(|(&id, buf)| match &buf.dense {
                Some(_) if !buf.rows.is_empty() => sq(&self.dense(params, id)),
                Some(d) => sq(d),
                None => buf.rows.values().map(|r| sq(r)).sum(),
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn dense(&self, params: &ParamStore, id: ParamId) -> Vec<f32> {
        let t = params.tensor(id);
        match self.bufs.get(&id) {
            Some(buf) => buf.to_dense(t.len(), t.cols()),
            None => vec![0.0; t.len()],
        }
    }
}
