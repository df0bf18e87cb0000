//! Parameter storage and the layers the models are assembled from.
//!
//! Parameters live in a [`ParamStore`] outside any tape. Each forward pass
//! binds the trainable entries onto a fresh [`Graph`] as leaves; layers then
//! look their tensors up through the [`Bound`] map. All initialization draws
//! f64 values from the given RNG regardless of the element type, so an f32
//! and an f64 model built from the same seed share the same underlying
//! numbers.

use crate::graph::{BatchNormState, Element, Graph, Gradients, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::Rng as _;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

struct ParamEntry<E: Element> {
    name: String,
    value: ArrayD<E>,
    trainable: bool,
}

/// Named parameter arrays (trainable weights plus persistent state such as
/// batch-norm running statistics), in stable insertion order.
pub struct ParamStore<E: Element> {
    entries: Vec<ParamEntry<E>>,
    by_name: HashMap<String, usize>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<E>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<E> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<E> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Total number of trainable scalars.
    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Map from parameters to their leaf tensors on the current graph.
pub struct Bound {
    tensors: Vec<Option<Tensor>>,
}

impl Bound {
    /// Binds every trainable parameter as a gradient-requiring leaf.
    pub fn new<E: Element>(g: &mut Graph<E>, store: &ParamStore<E>) -> Self {
        let mut tensors = vec![None; store.len()];
        for id in store.ids() {
            if store.is_trainable(id) {
                tensors[id.0] = Some(g.leaf(store.value(id).clone()));
            }
        }
        Bound { tensors }
    }

    pub fn get(&self, id: ParamId) -> Tensor {
        self.tensors[id.0].expect("parameter was not bound")
    }

    /// Collects gradients per parameter after a backward pass. Parameters
    /// that did not participate in the graph get `None`.
    pub fn grads<E: Element>(
        &self,
        store: &ParamStore<E>,
        grads: &Gradients<E>,
    ) -> Vec<(ParamId, Option<ArrayD<E>>)> {
        store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let g = self.tensors[id.0]
                    .and_then(|t| grads.get(t))
                    .cloned();
                (id, g)
            })
            .collect()
    }
}

/// Uniform(-bound, bound) array drawn in f64.
pub fn uniform_init<E: Element>(
    shape: &[usize],
    bound: f64,
    rng: &mut crate::rng::Rng,
) -> ArrayD<E> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        E::from_f64(rng.gen_range(-bound..bound))
    })
}

/// Standard-normal array drawn in f64.
pub fn randn<E: Element>(shape: &[usize], rng: &mut crate::rng::Rng) -> ArrayD<E> {
    use rand_distr::{Distribution, StandardNormal};
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let v: f64 = StandardNormal.sample(rng);
        E::from_f64(v)
    })
}

// ----- layers -----

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId, // [in, out]
    pub b: ParamId, // [out]
}

impl Linear {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut crate::rng::Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let k = (1.0 / in_dim as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform_init(&[in_dim, out_dim], k, rng), true);
        let b = store.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_dim])), true);
        Linear { w, b }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, bound: &Bound, x: Tensor) -> Tensor {
        let xw = g.matmul(x, bound.get(self.w));
        g.add_rowvec(xw, bound.get(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId, // [co, ci, kh, kw]
    pub b: ParamId, // [co]
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut crate::rng::Rng,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = (1.0 / (ci * k * k) as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform_init(&[co, ci, k, k], bound, rng), true);
        let b = store.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[co])), true);
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, bound: &Bound, x: Tensor) -> Tensor {
        g.conv2d(x, bound.get(self.w), bound.get(self.b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: ParamId, // [ci, co, kh, kw]
    pub b: ParamId, // [co]
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut crate::rng::Rng,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = (1.0 / (ci * k * k) as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform_init(&[ci, co, k, k], bound, rng), true);
        let b = store.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[co])), true);
        ConvTranspose2d { w, b, stride, pad }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, bound: &Bound, x: Tensor) -> Tensor {
        g.conv_transpose2d(x, bound.get(self.w), bound.get(self.b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, channels: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            ArrayD::from_elem(IxDyn(&[channels]), E::one()),
            true,
        );
        let beta = store.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])), true);
        let running_mean =
            store.add(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[channels])), false);
        let running_var = store.add(
            format!("{name}.running_var"),
            ArrayD::from_elem(IxDyn(&[channels]), E::one()),
            false,
        );
        BatchNorm2d { gamma, beta, running_mean, running_var, momentum: 0.1, eps: 1e-5 }
    }

    /// Eval-mode forward: a fixed per-channel affine map from the running
    /// statistics; never writes back.
    pub fn forward_eval<E: Element>(
        &self,
        g: &mut Graph<E>,
        bound: &Bound,
        store: &ParamStore<E>,
        x: Tensor,
    ) -> Tensor {
        let mut state = BatchNormState {
            mean: store
                .value(self.running_mean)
                .view()
                .into_dimensionality()
                .expect("running mean rank")
                .to_owned(),
            var: store
                .value(self.running_var)
                .view()
                .into_dimensionality()
                .expect("running var rank")
                .to_owned(),
        };
        g.batch_norm2d(x, bound.get(self.gamma), bound.get(self.beta), &mut state, false, self.momentum, self.eps)
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        bound: &Bound,
        store: &mut ParamStore<E>,
        x: Tensor,
        train: bool,
    ) -> Tensor {
        let mut owned = BatchNormState {
            mean: store
                .value(self.running_mean)
                .view()
                .into_dimensionality()
                .expect("running mean rank")
                .to_owned(),
            var: store
                .value(self.running_var)
                .view()
                .into_dimensionality()
                .expect("running var rank")
                .to_owned(),
        };
        let y = g.batch_norm2d(
            x,
            bound.get(self.gamma),
            bound.get(self.beta),
            &mut owned,
            train,
            self.momentum,
            self.eps,
        );
        if train {
            *store.value_mut(self.running_mean) = owned.mean.into_dyn();
            *store.value_mut(self.running_var) = owned.var.into_dyn();
        }
        y
    }
}

/// Single-layer LSTM with gate order (input, forget, cell, output) and the
/// forget-gate bias initialized to one.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: ParamId, // [in, 4h]
    pub w_hh: ParamId, // [h, 4h]
    pub b: ParamId,    // [4h]
    pub hidden: usize,
}

impl Lstm {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut crate::rng::Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let k = (1.0 / hidden as f64).sqrt();
        let w_ih = store.add(format!("{name}.w_ih"), uniform_init(&[in_dim, 4 * hidden], k, rng), true);
        let w_hh = store.add(format!("{name}.w_hh"), uniform_init(&[hidden, 4 * hidden], k, rng), true);
        let mut bias = ArrayD::<E>::zeros(IxDyn(&[4 * hidden]));
        for i in hidden..2 * hidden {
            bias[IxDyn(&[i])] = E::one();
        }
        let b = store.add(format!("{name}.b"), bias, true);
        Lstm { w_ih, w_hh, b, hidden }
    }

    /// One LSTM cell step. `x: [B,in]`, state tensors `[B,h]`.
    pub fn step<E: Element>(
        &self,
        g: &mut Graph<E>,
        bound: &Bound,
        x: Tensor,
        h: Tensor,
        c: Tensor,
    ) -> (Tensor, Tensor) {
        let hd = self.hidden;
        let xg = g.matmul(x, bound.get(self.w_ih));
        let hg = g.matmul(h, bound.get(self.w_hh));
        let sum = g.add(xg, hg);
        let gates = g.add_rowvec(sum, bound.get(self.b));
        let i_g = {
            let s = g.slice_cols(gates, 0, hd);
            g.sigmoid(s)
        };
        let f_g = {
            let s = g.slice_cols(gates, hd, 2 * hd);
            g.sigmoid(s)
        };
        let g_g = {
            let s = g.slice_cols(gates, 2 * hd, 3 * hd);
            g.tanh(s)
        };
        let o_g = {
            let s = g.slice_cols(gates, 3 * hd, 4 * hd);
            g.sigmoid(s)
        };
        let fc = g.mul(f_g, c);
        let ig = g.mul(i_g, g_g);
        let c_new = g.add(fc, ig);
        let ct = g.tanh(c_new);
        let h_new = g.mul(o_g, ct);
        (h_new, c_new)
    }

    /// Runs the cell over `xs: [T,B,in]`, returning the hidden state at
    /// every step. State starts at zero.
    pub fn forward_seq<E: Element>(
        &self,
        g: &mut Graph<E>,
        bound: &Bound,
        xs: Tensor,
    ) -> Vec<Tensor> {
        let shape = g.shape(xs).to_vec();
        assert_eq!(shape.len(), 3, "lstm input must be [T,B,in]");
        let (t_len, b) = (shape[0], shape[1]);
        let mut h = g.constant(ArrayD::zeros(IxDyn(&[b, self.hidden])));
        let mut c = g.constant(ArrayD::zeros(IxDyn(&[b, self.hidden])));
        let mut out = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let x_t = g.index_axis0(xs, t);
            let (h2, c2) = self.step(g, bound, x_t, h, c);
            h = h2;
            c = c2;
            out.push(h);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::testutil::{assert_close, finite_diff};

    #[test]
    fn lstm_grads_match_finite_differences() {
        let mut rng = crate::rng::seeded(31);
        let mut store: ParamStore<f64> = ParamStore::new();
        let lstm = Lstm::new(&mut store, &mut rng, "lstm", 3, 4);
        let head = Linear::new(&mut store, &mut rng, "head", 4, 2);
        let xs = randn::<f64>(&[5, 2, 3], &mut rng);

        let run = |store: &ParamStore<f64>| {
            let mut g = Graph::new();
            let bound = Bound::new(&mut g, store);
            let x = g.constant(xs.clone());
            let hs = lstm.forward_seq(&mut g, &bound, x);
            let last = *hs.last().unwrap();
            let y = head.forward(&mut g, &bound, last);
            let sq = g.square(y);
            let s = g.sum_all(sq);
            (g, bound, s)
        };

        let (g, bound, s) = run(&store);
        let grads = g.backward(s);
        for (id, analytic) in bound.grads(&store, &grads) {
            let analytic = analytic.expect("all params used");
            let base = store.value(id).clone();
            let fd = finite_diff(&base, 1e-6, |v| {
                let mut st2 = ParamStore::new();
                // Rebuild an identical store with one value swapped.
                for old_id in store.ids() {
                    let val = if old_id == id { v.clone() } else { store.value(old_id).clone() };
                    st2.add(store.name(old_id).to_string(), val, store.is_trainable(old_id));
                }
                let (g2, _, s2) = run(&st2);
                g2.scalar_value(s2)
            });
            assert_close(&analytic, &fd, 1e-5, store.name(id));
        }
    }
}
