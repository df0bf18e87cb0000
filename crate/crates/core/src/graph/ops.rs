//! Elementwise ops, linear algebra, reductions and shape manipulation.

use super::{BackArgs, Element, Graph, Tensor};
use ndarray::{Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};

fn map2<E: Element>(a: &ArrayD<E>, b: &ArrayD<E>, f: impl Fn(E, E) -> E) -> ArrayD<E> {
    assert_eq!(a.shape(), b.shape(), "elementwise op on mismatched shapes");
    let mut out = a.clone();
    out.zip_mut_with(b, |x, &y| *x = f(*x, y));
    out
}

impl<E: Element> Graph<E> {
    // ----- binary elementwise -----

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let v = map2(self.value(a), self.value(b), |x, y| x + y);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|c: BackArgs<E>| {
                vec![Some(c.grad.clone()), Some(c.grad.clone())]
            })),
            false,
        )
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let v = map2(self.value(a), self.value(b), |x, y| x - y);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|c: BackArgs<E>| {
                vec![Some(c.grad.clone()), Some(c.grad.mapv(|g| -g))]
            })),
            false,
        )
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let v = map2(self.value(a), self.value(b), |x, y| x * y);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|c: BackArgs<E>| {
                let da = map2(c.grad, c.parents[1], |g, y| g * y);
                let db = map2(c.grad, c.parents[0], |g, x| g * x);
                vec![Some(da), Some(db)]
            })),
            false,
        )
    }

    // ----- scalar broadcast -----

    pub fn add_scalar(&mut self, a: Tensor, s: E) -> Tensor {
        let v = self.value(a).mapv(|x| x + s);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|c: BackArgs<E>| vec![Some(c.grad.clone())])),
            false,
        )
    }

    pub fn mul_scalar(&mut self, a: Tensor, s: E) -> Tensor {
        let v = self.value(a).mapv(|x| x * s);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |c: BackArgs<E>| {
                vec![Some(c.grad.mapv(|g| g * s))]
            })),
            false,
        )
    }

    // ----- unary elementwise -----

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        self.mul_scalar(a, E::from_f64(-1.0))
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).mapv(|x| x.exp());
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|c: BackArgs<E>| {
                vec![Some(map2(c.grad, c.out, |g, o| g * o))]
            })),
            false,
        )
    }

    pub fn ln(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).mapv(|x| x.ln());
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|c: BackArgs<E>| {
                vec![Some(map2(c.grad, c.parents[0], |g, x| g / x))]
            })),
            false,
        )
    }

    pub fn sqrt(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).mapv(|x| x.sqrt());
        let half = E::from_f64(0.5);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |c: BackArgs<E>| {
                vec![Some(map2(c.grad, c.out, |g, o| g * half / o))]
            })),
            false,
        )
    }

    pub fn square(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).mapv(|x| x * x);
        let two = E::from_f64(2.0);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |c: BackArgs<E>| {
                vec![Some(map2(c.grad, c.parents[0], |g, x| g * two * x))]
            })),
            false,
        )
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).mapv(sigmoid_stable);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|c: BackArgs<E>| {
                vec![Some(map2(c.grad, c.out, |g, o| g * o * (E::one() - o)))]
            })),
            false,
        )
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).mapv(|x| x.tanh());
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|c: BackArgs<E>| {
                vec![Some(map2(c.grad, c.out, |g, o| g * (E::one() - o * o)))]
            })),
            false,
        )
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).mapv(|x| if x > E::zero() { x } else { E::zero() });
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|c: BackArgs<E>| {
                vec![Some(map2(c.grad, c.parents[0], |g, x| {
                    if x > E::zero() {
                        g
                    } else {
                        E::zero()
                    }
                }))]
            })),
            false,
        )
    }

    pub fn leaky_relu(&mut self, a: Tensor, slope: f64) -> Tensor {
        let al = E::from_f64(slope);
        let v = self.value(a).mapv(|x| if x > E::zero() { x } else { x * al });
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |c: BackArgs<E>| {
                vec![Some(map2(c.grad, c.parents[0], |g, x| {
                    if x > E::zero() {
                        g
                    } else {
                        g * al
                    }
                }))]
            })),
            false,
        )
    }

    pub fn clamp(&mut self, a: Tensor, lo: f64, hi: f64) -> Tensor {
        let (l, h) = (E::from_f64(lo), E::from_f64(hi));
        let v = self.value(a).mapv(|x| x.max(l).min(h));
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |c: BackArgs<E>| {
                vec![Some(map2(c.grad, c.parents[0], |g, x| {
                    if x >= l && x <= h {
                        g
                    } else {
                        E::zero()
                    }
                }))]
            })),
            false,
        )
    }

    // ----- linear algebra -----

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let v = av.dot(&bv).into_dyn();
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|c: BackArgs<E>| {
                let g = as2(c.grad);
                let a = as2(c.parents[0]);
                let b = as2(c.parents[1]);
                let da = g.dot(&b.t()).into_dyn();
                let db = a.t().dot(&g).into_dyn();
                vec![Some(da), Some(db)]
            })),
            false,
        )
    }

    /// Adds a row vector `[d]` to each row of `[n,d]`.
    pub fn add_rowvec(&mut self, x: Tensor, b: Tensor) -> Tensor {
        let xv = as2(self.value(x));
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias must be rank 1");
        assert_eq!(xv.ncols(), bv.len(), "bias length");
        let v = (&xv + &bv).into_dyn();
        self.push(
            v,
            vec![x.0, b.0],
            Some(Box::new(|c: BackArgs<E>| {
                let g = as2(c.grad);
                let db = g.sum_axis(Axis(0)).into_dyn();
                vec![Some(c.grad.clone()), Some(db)]
            })),
            false,
        )
    }

    // ----- reductions -----

    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let s = self.value(a).sum();
        let v = ArrayD::from_elem(IxDyn(&[]), s);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|c: BackArgs<E>| {
                let g = c.grad[IxDyn(&[])];
                vec![Some(ArrayD::from_elem(c.parents[0].raw_dim(), g))]
            })),
            false,
        )
    }

    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.mul_scalar(s, E::from_f64(1.0 / n as f64))
    }

    /// `[n,d] -> [n]`, summing over the second axis.
    pub fn sum_axis1(&mut self, a: Tensor) -> Tensor {
        let av = as2(self.value(a));
        let v = av.sum_axis(Axis(1)).into_dyn();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|c: BackArgs<E>| {
                let n = c.parents[0].shape()[0];
                let d = c.parents[0].shape()[1];
                let g = c
                    .grad
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("grad rank");
                let mut out = Array2::<E>::zeros((n, d));
                for (mut row, &gi) in out.rows_mut().into_iter().zip(g.iter()) {
                    row.fill(gi);
                }
                vec![Some(out.into_dyn())]
            })),
            false,
        )
    }

    // ----- shape ops -----

    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Tensor {
        let v = self
            .value(a)
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let orig: Vec<usize> = self.shape(a).to_vec();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |c: BackArgs<E>| {
                let g = c
                    .grad
                    .to_owned()
                    .into_shape_with_order(IxDyn(&orig))
                    .expect("reshape grad");
                vec![Some(g)]
            })),
            false,
        )
    }

    /// Permutes axes (copies into standard layout).
    pub fn permute(&mut self, a: Tensor, axes: &[usize]) -> Tensor {
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |c: BackArgs<E>| {
                let g = c
                    .grad
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                vec![Some(g)]
            })),
            false,
        )
    }

    /// Selects index `i` along axis 0, dropping that axis.
    pub fn index_axis0(&mut self, a: Tensor, i: usize) -> Tensor {
        let v = self.value(a).index_axis(Axis(0), i).to_owned();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |c: BackArgs<E>| {
                let mut out = ArrayD::zeros(c.parents[0].raw_dim());
                out.index_axis_mut(Axis(0), i).assign(c.grad);
                vec![Some(out)]
            })),
            false,
        )
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack_axis0(&mut self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|t| self.value(*t).view()).collect();
        let v = ndarray::stack(Axis(0), &views).expect("stack shapes");
        let parents: Vec<usize> = parts.iter().map(|t| t.0).collect();
        self.push(
            v,
            parents,
            Some(Box::new(|c: BackArgs<E>| {
                (0..c.parents.len())
                    .map(|i| Some(c.grad.index_axis(Axis(0), i).to_owned()))
                    .collect()
            })),
            false,
        )
    }

    /// Concatenates two rank-2 tensors along axis 1.
    pub fn concat_cols(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(av.nrows(), bv.nrows(), "concat rows");
        let da = av.ncols();
        let v = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
            .expect("concat")
            .into_dyn();
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(move |c: BackArgs<E>| {
                let g = as2(c.grad);
                let ga = g.slice(ndarray::s![.., ..da]).to_owned().into_dyn();
                let gb = g.slice(ndarray::s![.., da..]).to_owned().into_dyn();
                vec![Some(ga), Some(gb)]
            })),
            false,
        )
    }

    /// Columns `[lo, hi)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Tensor, lo: usize, hi: usize) -> Tensor {
        let av = as2(self.value(a));
        let v = av.slice(ndarray::s![.., lo..hi]).to_owned().into_dyn();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |c: BackArgs<E>| {
                let mut out = ArrayD::<E>::zeros(c.parents[0].raw_dim());
                {
                    let mut o2 = out
                        .view_mut()
                        .into_dimensionality::<Ix2>()
                        .expect("rank 2");
                    o2.slice_mut(ndarray::s![.., lo..hi]).assign(&as2(c.grad));
                }
                vec![Some(out)]
            })),
            false,
        )
    }

    /// Tiles a rank-2 tensor `[n,d]` along axis 0, producing `[times*n, d]`
    /// (block copies; block `i` is the whole input).
    pub fn repeat_rows(&mut self, a: Tensor, times: usize) -> Tensor {
        let av = as2(self.value(a));
        let (n, d) = av.dim();
        let mut v = Array2::<E>::zeros((times * n, d));
        for i in 0..times {
            v.slice_mut(ndarray::s![i * n..(i + 1) * n, ..]).assign(&av);
        }
        self.push(
            v.into_dyn(),
            vec![a.0],
            Some(Box::new(move |c: BackArgs<E>| {
                let g = as2(c.grad);
                let mut acc = Array2::<E>::zeros((n, d));
                for i in 0..times {
                    acc += &g.slice(ndarray::s![i * n..(i + 1) * n, ..]);
                }
                vec![Some(acc.into_dyn())]
            })),
            false,
        )
    }
}

pub(crate) fn as2<E: Element>(a: &ArrayD<E>) -> ndarray::ArrayView2<'_, E> {
    a.view().into_dimensionality::<Ix2>().expect("expected rank-2 tensor")
}

pub(crate) fn sigmoid_stable<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{assert_close, finite_diff};
    use super::super::Graph;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng as _;

    fn randn(shape: &[usize], rng: &mut crate::rng::Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks d(sum of some scalar function of the op output)/d(input)
    /// against central differences.
    fn check_unary(name: &str, f: impl Fn(&mut Graph<f64>, super::Tensor) -> super::Tensor) {
        let mut rng = crate::rng::seeded(11);
        let x0 = randn(&[3, 4], &mut rng).mapv(|v| v * 0.8 + 1.2); // keep ln/sqrt in-domain
        let analytic = {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone());
            let y = f(&mut g, x);
            let s = g.sum_all(y);
            let grads = g.backward(s);
            grads.get(x).unwrap().clone()
        };
        let fd = finite_diff(&x0, 1e-6, |x| {
            let mut g = Graph::new();
            let xt = g.leaf(x.clone());
            let y = f(&mut g, xt);
            let s = g.sum_all(y);
            g.scalar_value(s)
        });
        assert_close(&analytic, &fd, 1e-6, name);
    }

    #[test]
    fn unary_gradients_match_finite_differences() {
        check_unary("exp", |g, x| g.exp(x));
        check_unary("ln", |g, x| g.ln(x));
        check_unary("sqrt", |g, x| g.sqrt(x));
        check_unary("square", |g, x| g.square(x));
        check_unary("sigmoid", |g, x| g.sigmoid(x));
        check_unary("tanh", |g, x| g.tanh(x));
        check_unary("leaky", |g, x| g.leaky_relu(x, 0.2));
        check_unary("sum_axis1", |g, x| g.sum_axis1(x));
        check_unary("reshape", |g, x| g.reshape(x, &[4, 3]));
        check_unary("permute", |g, x| g.permute(x, &[1, 0]));
        check_unary("index", |g, x| g.index_axis0(x, 1));
        check_unary("slice_cols", |g, x| g.slice_cols(x, 1, 3));
        check_unary("repeat", |g, x| g.repeat_rows(x, 3));
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = crate::rng::seeded(3);
        let a0 = randn(&[3, 5], &mut rng);
        let b0 = randn(&[5, 2], &mut rng);
        let run = |a: &ArrayD<f64>, b: &ArrayD<f64>| {
            let mut g = Graph::new();
            let at = g.leaf(a.clone());
            let bt = g.leaf(b.clone());
            let y = g.matmul(at, bt);
            let sq = g.square(y);
            let s = g.sum_all(sq);
            (g.scalar_value(s), g, at, bt, s)
        };
        let (_, g, at, bt, s) = run(&a0, &b0);
        let grads = g.backward(s);
        let fd_a = finite_diff(&a0, 1e-6, |a| run(a, &b0).0);
        let fd_b = finite_diff(&b0, 1e-6, |b| run(&a0, b).0);
        assert_close(grads.get(at).unwrap(), &fd_a, 1e-6, "matmul dA");
        assert_close(grads.get(bt).unwrap(), &fd_b, 1e-6, "matmul dB");
    }

    #[test]
    fn binary_and_stack_gradients() {
        let mut rng = crate::rng::seeded(5);
        let a0 = randn(&[2, 3], &mut rng);
        let b0 = randn(&[2, 3], &mut rng);
        let run = |a: &ArrayD<f64>, b: &ArrayD<f64>| {
            let mut g = Graph::new();
            let at = g.leaf(a.clone());
            let bt = g.leaf(b.clone());
            let m = g.mul(at, bt);
            let d = g.sub(at, bt);
            let st = g.stack_axis0(&[m, d]);
            let cc = {
                let r = g.reshape(st, &[4, 3]);
                let c = g.concat_cols(r, r);
                c
            };
            let sq = g.square(cc);
            let s = g.sum_all(sq);
            (g.scalar_value(s), g, at, bt, s)
        };
        let (_, g, at, bt, s) = run(&a0, &b0);
        let grads = g.backward(s);
        let fd_a = finite_diff(&a0, 1e-6, |a| run(a, &b0).0);
        let fd_b = finite_diff(&b0, 1e-6, |b| run(&a0, b).0);
        assert_close(grads.get(at).unwrap(), &fd_a, 1e-6, "dA");
        assert_close(grads.get(bt).unwrap(), &fd_b, 1e-6, "dB");
    }
}
