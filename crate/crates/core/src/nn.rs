//! Parameter storage and the small set of layers the detector is built from.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};

/// Which optimizer/EMA group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Pyramid and heads: trained by the task loss, tracked by the EMA copy.
    Detector,
    /// Domain discriminators and class conditioning.
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Named, grouped parameter matrices addressed by [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.groups.push(group);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(move |id| self.groups[id.0] == group)
    }

    /// Copy keeping only one group's values; other slots are left empty (`0×0`).
    pub fn restricted_to(&self, group: ParamGroup) -> ParamStore {
        let values = self
            .values
            .iter()
            .zip(&self.groups)
            .map(|(v, g)| if *g == group { v.clone() } else { Array2::zeros((0, 0)) })
            .collect();
        ParamStore {
            names: self.names.clone(),
            groups: self.groups.clone(),
            values,
        }
    }

    /// Order-sensitive checksum of every value's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.values {
            for x in v.iter() {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    pub(crate) fn values(&self) -> &[Array2<f64>] {
        &self.values
    }
}

/// A tape bound to a parameter store. Parameters become leaves lazily on
/// first use, so a parameter that never takes part in a forward pass has no
/// gradient.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Backward from `root`; returns the gradient of every parameter that took
    /// part in the graph.
    pub fn param_grads(&self, root: Var) -> Vec<Option<Array2<f64>>> {
        let mut grads = self.g.backward(root);
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }

    pub fn touched(&self) -> Vec<bool> {
        self.bound.iter().map(Option::is_some).collect()
    }
}

/// `y = x W + b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        let b = Array2::from_shape_fn((1, fan_out), |_| rng.random_range(-bound..bound));
        Self {
            w: store.add(format!("{name}.w"), group, w),
            b: store.add(format!("{name}.b"), group, b),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        let y = ctx.g.matmul(x, w);
        ctx.g.add_row(y, b)
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).ncols()
    }
}

/// Kernel-3, stride-1, zero-padded temporal convolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv1d {
    pub inner: Linear,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            inner: Linear::new(store, name, group, 3 * in_dim, out_dim, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let u = ctx.g.unfold3(x);
        self.inner.forward(ctx, u)
    }
}

/// Multi-layer perceptron with ReLU between layers and a linear output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dims: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), group, w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ctx, h);
            if i + 1 < self.layers.len() {
                h = ctx.g.relu(h);
            }
        }
        h
    }
}

/// Column vector (`n×1`) with 1.0 at valid rows, for masking via `mul_const`.
pub fn mask_column(mask: &[bool]) -> Array2<f64> {
    Array2::from_shape_fn((mask.len(), 1), |(i, _)| if mask[i] { 1.0 } else { 0.0 })
}
