//! A small reverse-mode autodiff tape over `ndarray` arrays.
//!
//! Values are computed eagerly; every differentiable op records a backward
//! closure on the tape. One `Graph` is built per forward pass (a training
//! step, an inference call) and dropped afterwards. All computation is
//! single-threaded and performed in creation order, so results are exactly
//! reproducible.

use ndarray::{ArrayD, IxDyn};

mod conv;
mod ops;
mod stats;

pub use conv::BatchNormState;

/// Element type the tape is generic over. `f32` for throughput, `f64` for
/// gradient-oracle work.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssign
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(pub(crate) usize);

pub(crate) struct BackArgs<'a, E: Element> {
    pub out: &'a ArrayD<E>,
    pub parents: &'a [&'a ArrayD<E>],
    pub grad: &'a ArrayD<E>,
}

type BackFn<E> = Box<dyn Fn(BackArgs<'_, E>) -> Vec<Option<ArrayD<E>>> + Send>;

struct Node<E: Element> {
    value: ArrayD<E>,
    parents: Vec<usize>,
    backward: Option<BackFn<E>>,
    needs_grad: bool,
}

/// The tape. All ops are methods on this type.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

/// Gradients produced by [`Graph::backward`], indexed by tensor handle.
pub struct Gradients<E: Element> {
    by_node: Vec<Option<ArrayD<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, t: Tensor) -> Option<&ArrayD<E>> {
        self.by_node.get(t.0).and_then(|g| g.as_ref())
    }
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    /// Inserts a value that does not require gradients.
    pub fn constant(&mut self, value: ArrayD<E>) -> Tensor {
        self.push(value, vec![], None, false)
    }

    /// Inserts a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: ArrayD<E>) -> Tensor {
        self.push(value, vec![], None, true)
    }

    /// Rank-0 constant.
    pub fn scalar(&mut self, v: E) -> Tensor {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self, t: Tensor) -> &ArrayD<E> {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    /// Value of a rank-0 tensor.
    pub fn scalar_value(&self, t: Tensor) -> E {
        let v = &self.nodes[t.0].value;
        assert_eq!(v.ndim(), 0, "expected a scalar tensor");
        v[IxDyn(&[])]
    }

    pub fn needs_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].needs_grad
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<E>,
        parents: Vec<usize>,
        backward: Option<BackFn<E>>,
        leaf_grad: bool,
    ) -> Tensor {
        let needs_grad =
            leaf_grad || parents.iter().any(|&p| self.nodes[p].needs_grad);
        let backward = if needs_grad { backward } else { None };
        self.nodes.push(Node { value, parents, backward, needs_grad });
        Tensor(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar root. Returns per-node gradients; only
    /// nodes on a path from a grad-requiring leaf to the root are populated.
    pub fn backward(&self, root: Tensor) -> Gradients<E> {
        let mut grads: Vec<Option<ArrayD<E>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let root_val = &self.nodes[root.0].value;
        assert_eq!(root_val.ndim(), 0, "backward root must be a scalar");
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[]), E::one()));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            match &node.backward {
                None => {
                    // Leaf: keep the accumulated gradient.
                    grads[id] = Some(gout);
                }
                Some(f) => {
                    let parent_vals: Vec<&ArrayD<E>> =
                        node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                    let pgrads = f(BackArgs {
                        out: &node.value,
                        parents: &parent_vals,
                        grad: &gout,
                    });
                    debug_assert_eq!(pgrads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        if !self.nodes[p].needs_grad {
                            continue;
                        }
                        debug_assert_eq!(
                            pg.shape(),
                            self.nodes[p].value.shape(),
                            "gradient shape mismatch flowing into node {p}"
                        );
                        match &mut grads[p] {
                            Some(acc) => *acc += &pg,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Gradients { by_node: grads }
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn constant_subgraphs_are_pruned() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(arr1(&[1.0, 2.0]).into_dyn());
        let b = g.constant(arr1(&[3.0, 4.0]).into_dyn());
        let c = g.mul(a, b);
        let s = g.sum_all(c);
        assert!(!g.needs_grad(s));
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn grad_accumulates_over_multiple_uses() {
        // y = sum(x*x + x) => dy/dx = 2x + 1
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(arr1(&[1.0, -2.0, 0.5]).into_dyn());
        let sq = g.mul(x, x);
        let y = g.add(sq, x);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let got = grads.get(x).unwrap();
        let want = arr1(&[3.0, -3.0, 2.0]).into_dyn();
        assert_eq!(got, &want);
    }
}
