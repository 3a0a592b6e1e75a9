//! Parameter storage, the per-forward [`Graph`] context, and basic layers.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Conv2dOpts, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Name prefix reserved for non-trainable state such as BN running stats.
pub const BUFFER_PREFIX: &str = "@running/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    kinds: Vec<ParamKind>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.kinds.push(kind);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// All entries in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.ids()
            .map(move |id| (id, self.names[id.0].as_str(), &self.values[id.0]))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.ids()
            .filter(move |id| self.kinds[id.0] == ParamKind::Trainable)
            .map(move |id| (id, &self.values[id.0]))
    }

    /// Number of trainable scalars whose names start with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(id, name, _)| self.kind(*id) == ParamKind::Trainable && name.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending exponential-moving-average update of one BN layer.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
    pub momentum: f32,
}

impl BnUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let m = self.momentum;
        for (r, b) in store
            .get_mut(self.running_mean)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_mean)
        {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store
            .get_mut(self.running_var)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_var)
        {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Graph<'p> {
    pub tape: Tape,
    pub mode: Mode,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    overrides: Vec<Option<Tensor>>,
    track: bool,
    bn_updates: Vec<BnUpdate>,
}

impl<'p> Graph<'p> {
    /// `track` marks bound parameters and inputs as requiring gradients.
    pub fn new(params: &'p ParamStore, mode: Mode, track: bool) -> Self {
        Self {
            tape: Tape::new(),
            mode,
            params,
            bound: vec![None; params.len()],
            overrides: vec![None; params.len()],
            track,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.overrides[id.0]
            .take()
            .unwrap_or_else(|| self.params.get(id).clone());
        let rg = self.track && self.params.kind(id) == ParamKind::Trainable;
        let v = self.tape.leaf(value, rg);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn param_value(&self, id: ParamId) -> &Tensor {
        self.params.get(id)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.leaf(value, self.track)
    }

    /// Binds `values[0]` as the input and `values[1..]` as replacements for
    /// the trainable parameters, in store order. Returns the handles.
    pub fn bind_inputs(&mut self, values: &[Tensor]) -> Vec<Var> {
        let mut out = vec![self.input(values[0].clone())];
        let ids: Vec<ParamId> = self.params.trainable().map(|(id, _)| id).collect();
        for (id, value) in ids.into_iter().zip(&values[1..]) {
            self.overrides[id.0] = Some(value.clone());
            out.push(self.param(id));
        }
        out
    }

    /// Gradients accumulated on bound trainable parameters.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f32])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }
}

// ------------------------------------------------------------------ init

/// Normal sample truncated to ±2σ.
pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z: f32 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

/// He-uniform with fan-in: `U(−√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

// ---------------------------------------------------------------- layers

/// Token-wise affine map over the last dim; weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            trunc_normal(&[in_dim, out_dim], 0.02, rng),
            ParamKind::Trainable,
        );
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]), ParamKind::Trainable);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::dim("linear", &shape, &[self.in_dim, self.out_dim]));
        }
        let rows = shape.iter().product::<usize>() / self.in_dim;
        let flat = g.tape.reshape(x, &[rows, self.in_dim])?;
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.tape.matmul(flat, w)?;
        let y = g.tape.add(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        g.tape.reshape(y, &out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub opts: Conv2dOpts,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c / groups * kernel * kernel;
        let weight = store.register(
            format!("{name}.weight"),
            kaiming_uniform(&[out_c, in_c / groups, kernel, kernel], fan_in, rng),
            ParamKind::Trainable,
        );
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_c]), ParamKind::Trainable);
        Self {
            weight,
            bias,
            opts: Conv2dOpts::new(stride, pad, groups),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.tape.conv2d(x, w, Some(b), self.opts)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f32) -> Self {
        Self {
            gamma: store.register(format!("{name}.weight"), Tensor::ones(&[dim]), ParamKind::Trainable),
            beta: store.register(format!("{name}.bias"), Tensor::zeros(&[dim]), ParamKind::Trainable),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.tape.layer_norm(x, gamma, beta, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, eps: f32, momentum: f32) -> Self {
        Self {
            gamma: store.register(
                format!("{name}.weight"),
                Tensor::ones(&[channels]),
                ParamKind::Trainable,
            ),
            beta: store.register(format!("{name}.bias"), Tensor::zeros(&[channels]), ParamKind::Trainable),
            running_mean: store.register(
                format!("{BUFFER_PREFIX}{name}.mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            ),
            running_var: store.register(
                format!("{BUFFER_PREFIX}{name}.var"),
                Tensor::ones(&[channels]),
                ParamKind::Buffer,
            ),
            eps,
            momentum,
        }
    }

    /// Train mode normalizes with batch statistics and queues a running-stat
    /// update on the graph; eval mode uses the stored statistics.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        match g.mode {
            Mode::Train => {
                let (y, batch_mean, batch_var) = g.tape.batch_norm_train(x, gamma, beta, self.eps)?;
                g.bn_updates.push(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    batch_mean,
                    batch_var,
                    momentum: self.momentum,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = g.params.get(self.running_mean).data().to_vec();
                let var = g.params.get(self.running_var).data().to_vec();
                g.tape.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
            }
        }
    }
}

/// `[N, L, C]` tokens on an `h×w` grid to a `[N, C, h, w]` map.
pub fn tokens_to_map(g: &mut Graph, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.tape.shape(tokens).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::Geometry(format!("tokens {s:?} do not tile a {h}x{w} grid")));
    }
    let t = g.tape.transpose(tokens, 1, 2)?;
    g.tape.reshape(t, &[s[0], s[2], h, w])
}

/// `[N, C, h, w]` map to `[N, h·w, C]` tokens.
pub fn map_to_tokens(g: &mut Graph, map: Var) -> Result<(Var, usize, usize)> {
    let s = g.tape.shape(map).to_vec();
    if s.len() != 4 {
        return Err(Error::dim("map_to_tokens", &s, &[]));
    }
    let flat = g.tape.reshape(map, &[s[0], s[1], s[2] * s[3]])?;
    Ok((g.tape.transpose(flat, 1, 2)?, s[2], s[3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn momentum_one_copies_batch_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2, 1e-5, 1.0);
        let x = Tensor::from_fn(&[3, 2, 2, 2], |i| (i as f32 * 0.7).sin());
        let (train_out, updates) = {
            let mut g = Graph::new(&store, Mode::Train, false);
            let xv = g.input(x.clone());
            let y = bn.forward(&mut g, xv).unwrap();
            (g.tape.value(y).clone(), g.take_bn_updates())
        };
        for u in &updates {
            u.apply(&mut store);
        }
        let mut g = Graph::new(&store, Mode::Eval, false);
        let xv = g.input(x);
        let y = bn.forward(&mut g, xv).unwrap();
        assert!(g.tape.value(y).max_abs_diff(&train_out) < 1e-5);
    }

    #[test]
    fn eval_before_training_uses_unit_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1, 0.0, 0.1);
        let x = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f32);
        let mut g = Graph::new(&store, Mode::Eval, false);
        let xv = g.input(x.clone());
        let y = bn.forward(&mut g, xv).unwrap();
        assert_eq!(g.tape.value(y), &x);
    }

    #[test]
    fn linear_preserves_leading_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "fc", 4, 6, &mut rng);
        let mut g = Graph::new(&store, Mode::Eval, false);
        let x = g.input(Tensor::zeros(&[2, 5, 4]));
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.shape(y), &[2, 5, 6]);
    }

    #[test]
    fn tokens_and_maps_invert() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Eval, false);
        let m = g.input(Tensor::from_fn(&[2, 3, 4, 5], |i| i as f32));
        let (t, h, w) = map_to_tokens(&mut g, m).unwrap();
        assert_eq!(g.tape.shape(t), &[2, 20, 3]);
        let back = tokens_to_map(&mut g, t, h, w).unwrap();
        assert_eq!(g.tape.value(back), g.tape.value(m));
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = trunc_normal(&[1000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }
}
