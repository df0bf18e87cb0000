//! Spatial ops: conv2d, transposed conv2d, nearest upsampling, batch norm.
//!
//! Convolutions run one image at a time through an im2col buffer and a
//! single matrix product; backward recomputes the column buffer instead of
//! keeping it alive, trading a little time for memory.

use super::{BackArgs, Element, Graph, Tensor};
use ndarray::{Array1, Array2, ArrayD, ArrayView3, Axis, Ix1, Ix4};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn out_dim(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kh) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kw) / self.stride + 1;
        assert_eq!(
            (oh - 1) * self.stride + self.kh,
            h + 2 * self.pad,
            "conv geometry does not tile the input exactly"
        );
        assert_eq!((ow - 1) * self.stride + self.kw, w + 2 * self.pad);
        (oh, ow)
    }
}

/// Gathers sliding patches of `x` into a `[C*kh*kw, oh*ow]` matrix.
fn im2col<E: Element>(x: &ArrayView3<E>, g: ConvGeom) -> Array2<E> {
    let (c, h, w) = x.dim();
    let (oh, ow) = g.out_dim(h, w);
    let mut cols = Array2::<E>::zeros((c * g.kh * g.kw, oh * ow));
    for ci in 0..c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let mut r = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        r[oy * ow + ox] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto an image.
fn col2im<E: Element>(cols: &Array2<E>, c: usize, h: usize, w: usize, g: ConvGeom) -> ndarray::Array3<E> {
    let (oh, ow) = g.out_dim(h, w);
    let mut x = ndarray::Array3::<E>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let r = cols.row(row);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci, iy as usize, ix as usize)] += r[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

fn view4<E: Element>(a: &ArrayD<E>) -> ndarray::ArrayView4<'_, E> {
    a.view().into_dimensionality::<Ix4>().expect("expected rank-4 tensor")
}

/// Running statistics for batch norm, owned by the caller (kept outside the
/// tape so they can be checkpointed).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<E: Element> {
    pub mean: Array1<E>,
    pub var: Array1<E>,
}

impl<E: Element> BatchNormState<E> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            mean: Array1::zeros(channels),
            var: Array1::from_elem(channels, E::one()),
        }
    }
}

impl<E: Element> Graph<E> {
    /// `x: [N,Ci,H,W]`, `w: [Co,Ci,kh,kw]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Tensor, w: Tensor, b: Tensor, stride: usize, pad: usize) -> Tensor {
        let xv = view4(self.value(x));
        let wv = view4(self.value(w));
        let (n, ci, h, wd) = xv.dim();
        let (co, ci_w, kh, kw) = wv.dim();
        assert_eq!(ci, ci_w, "conv2d channel mismatch");
        let geom = ConvGeom { kh, kw, stride, pad };
        let (oh, ow) = geom.out_dim(h, wd);

        let w_mat = wv
            .to_shape((co, ci * kh * kw))
            .expect("weight reshape")
            .to_owned();
        let bias = self
            .value(b)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias rank")
            .to_owned();

        let mut out = ndarray::Array4::<E>::zeros((n, co, oh, ow));
        for i in 0..n {
            let cols = im2col(&xv.index_axis(Axis(0), i), geom);
            let mut o = w_mat.dot(&cols); // [Co, P]
            for (mut row, &bv) in o.rows_mut().into_iter().zip(bias.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
            out.index_axis_mut(Axis(0), i).assign(
                &o.into_shape_with_order((co, oh, ow)).expect("conv out reshape"),
            );
        }

        self.push(
            out.into_dyn(),
            vec![x.0, w.0, b.0],
            Some(Box::new(move |c: BackArgs<E>| {
                let xv = view4(c.parents[0]);
                let wv = view4(c.parents[1]);
                let gv = view4(c.grad);
                let (n, ci, h, wd) = xv.dim();
                let (co, _, kh, kw) = wv.dim();
                let w_mat = wv
                    .to_shape((co, ci * kh * kw))
                    .expect("weight reshape")
                    .to_owned();
                let mut dx = ndarray::Array4::<E>::zeros(xv.raw_dim());
                let mut dw = Array2::<E>::zeros((co, ci * kh * kw));
                let mut db = Array1::<E>::zeros(co);
                for i in 0..n {
                    let g_i = gv
                        .index_axis(Axis(0), i)
                        .to_shape((co, oh * ow))
                        .expect("grad reshape")
                        .to_owned();
                    let dcols = w_mat.t().dot(&g_i);
                    dx.index_axis_mut(Axis(0), i)
                        .assign(&col2im(&dcols, ci, h, wd, geom));
                    let cols = im2col(&xv.index_axis(Axis(0), i), geom);
                    dw = dw + g_i.dot(&cols.t());
                    db = db + g_i.sum_axis(Axis(1));
                }
                let dw = dw
                    .into_shape_with_order((co, ci, kh, kw))
                    .expect("dw reshape");
                vec![
                    Some(dx.into_dyn()),
                    Some(dw.into_dyn()),
                    Some(db.into_dyn()),
                ]
            })),
            false,
        )
    }

    /// `x: [N,Ci,H,W]`, `w: [Ci,Co,kh,kw]`, `b: [Co]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Tensor,
        w: Tensor,
        b: Tensor,
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let xv = view4(self.value(x));
        let wv = view4(self.value(w));
        let (n, ci, h, wd) = xv.dim();
        let (ci_w, co, kh, kw) = wv.dim();
        assert_eq!(ci, ci_w, "conv_transpose2d channel mismatch");
        let geom = ConvGeom { kh, kw, stride, pad };
        let h_out = (h - 1) * stride + kh - 2 * pad;
        let w_out = (wd - 1) * stride + kw - 2 * pad;
        // The input grid must be exactly the patch grid of the output.
        assert_eq!(geom.out_dim(h_out, w_out), (h, wd));

        let w_col = wv
            .to_shape((ci, co * kh * kw))
            .expect("weight reshape")
            .to_owned();
        let bias = self
            .value(b)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias rank")
            .to_owned();

        let mut out = ndarray::Array4::<E>::zeros((n, co, h_out, w_out));
        for i in 0..n {
            let x_flat = xv
                .index_axis(Axis(0), i)
                .to_shape((ci, h * wd))
                .expect("x reshape")
                .to_owned();
            let cols = w_col.t().dot(&x_flat); // [Co*kh*kw, P]
            let mut img = col2im(&cols, co, h_out, w_out, geom);
            for (mut ch, &bv) in img.outer_iter_mut().zip(bias.iter()) {
                ch.mapv_inplace(|v| v + bv);
            }
            out.index_axis_mut(Axis(0), i).assign(&img);
        }

        self.push(
            out.into_dyn(),
            vec![x.0, w.0, b.0],
            Some(Box::new(move |c: BackArgs<E>| {
                let xv = view4(c.parents[0]);
                let wv = view4(c.parents[1]);
                let gv = view4(c.grad);
                let (n, ci, h, wd) = xv.dim();
                let (_, co, kh, kw) = wv.dim();
                let w_col = wv
                    .to_shape((ci, co * kh * kw))
                    .expect("weight reshape")
                    .to_owned();
                let mut dx = ndarray::Array4::<E>::zeros(xv.raw_dim());
                let mut dw = Array2::<E>::zeros((ci, co * kh * kw));
                let mut db = Array1::<E>::zeros(co);
                for i in 0..n {
                    let g_img = gv.index_axis(Axis(0), i);
                    let gcols = im2col(&g_img, geom); // [Co*kh*kw, P]
                    let dx_flat = w_col.dot(&gcols); // [Ci, P]
                    dx.index_axis_mut(Axis(0), i).assign(
                        &dx_flat
                            .into_shape_with_order((ci, h, wd))
                            .expect("dx reshape"),
                    );
                    let x_flat = xv
                        .index_axis(Axis(0), i)
                        .to_shape((ci, h * wd))
                        .expect("x reshape")
                        .to_owned();
                    dw = dw + x_flat.dot(&gcols.t());
                    for (cch, acc) in g_img.outer_iter().zip(db.iter_mut()) {
                        *acc += cch.sum();
                    }
                }
                let dw = dw
                    .into_shape_with_order((ci, co, kh, kw))
                    .expect("dw reshape");
                vec![
                    Some(dx.into_dyn()),
                    Some(dw.into_dyn()),
                    Some(db.into_dyn()),
                ]
            })),
            false,
        )
    }

    /// Nearest-neighbour 2x upsampling of `[N,C,H,W]`.
    pub fn upsample2x(&mut self, x: Tensor) -> Tensor {
        let xv = view4(self.value(x));
        let (n, c, h, w) = xv.dim();
        let mut out = ndarray::Array4::<E>::zeros((n, c, 2 * h, 2 * w));
        for ((i, ci, y, xx), &v) in xv.indexed_iter() {
            out[(i, ci, 2 * y, 2 * xx)] = v;
            out[(i, ci, 2 * y, 2 * xx + 1)] = v;
            out[(i, ci, 2 * y + 1, 2 * xx)] = v;
            out[(i, ci, 2 * y + 1, 2 * xx + 1)] = v;
        }
        self.push(
            out.into_dyn(),
            vec![x.0],
            Some(Box::new(|c: BackArgs<E>| {
                let gv = view4(c.grad);
                let (n, cc, h2, w2) = gv.dim();
                let mut dx = ndarray::Array4::<E>::zeros((n, cc, h2 / 2, w2 / 2));
                for ((i, ci, y, xx), &g) in gv.indexed_iter() {
                    dx[(i, ci, y / 2, xx / 2)] += g;
                }
                vec![Some(dx.into_dyn())]
            })),
            false,
        )
    }

    /// Batch norm over `[N,C,H,W]` with per-channel affine parameters.
    ///
    /// In training mode the batch statistics enter the graph (their
    /// dependence on `x` is differentiated) and `state` is updated with the
    /// momentum rule. In eval mode the op is a fixed per-channel affine map
    /// and `state` is left untouched, so outputs for one element never
    /// depend on the rest of the batch.
    pub fn batch_norm2d(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        state: &mut BatchNormState<E>,
        train: bool,
        momentum: f64,
        eps: f64,
    ) -> Tensor {
        let xv = view4(self.value(x));
        let (n, c, h, w) = xv.dim();
        let cnt = (n * h * w) as f64;
        let epse = E::from_f64(eps);

        let (mean, var) = if train {
            let mut mean = Array1::<E>::zeros(c);
            let mut var = Array1::<E>::zeros(c);
            for ci in 0..c {
                let sl = xv.index_axis(Axis(1), ci);
                let m = sl.sum() / E::from_f64(cnt);
                let v = sl.mapv(|x| (x - m) * (x - m)).sum() / E::from_f64(cnt);
                mean[ci] = m;
                var[ci] = v;
            }
            // Momentum update with the unbiased variance, eval-style.
            let mom = E::from_f64(momentum);
            let keep = E::one() - mom;
            let unbias = if cnt > 1.0 {
                E::from_f64(cnt / (cnt - 1.0))
            } else {
                E::one()
            };
            for ci in 0..c {
                state.mean[ci] = keep * state.mean[ci] + mom * mean[ci];
                state.var[ci] = keep * state.var[ci] + mom * var[ci] * unbias;
            }
            (mean, var)
        } else {
            (state.mean.clone(), state.var.clone())
        };

        let gvec = self
            .value(gamma)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("gamma rank")
            .to_owned();
        let bvec = self
            .value(beta)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("beta rank")
            .to_owned();
        let inv_std = var.mapv(|v| E::one() / (v + epse).sqrt());

        let mut out = xv.to_owned();
        for ci in 0..c {
            let (m, s, ga, be) = (mean[ci], inv_std[ci], gvec[ci], bvec[ci]);
            out.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| (v - m) * s * ga + be);
        }

        let mean_b = mean.clone();
        let inv_b = inv_std.clone();
        self.push(
            out.into_dyn(),
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |cargs: BackArgs<E>| {
                let xv = view4(cargs.parents[0]);
                let gm = cargs.parents[1]
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("gamma rank");
                let gv = view4(cargs.grad);
                let (n, c, h, w) = xv.dim();
                let m_elems = E::from_f64((n * h * w) as f64);
                let mut dx = ndarray::Array4::<E>::zeros(xv.raw_dim());
                let mut dgamma = Array1::<E>::zeros(c);
                let mut dbeta = Array1::<E>::zeros(c);
                for ci in 0..c {
                    let xs = xv.index_axis(Axis(1), ci);
                    let gs = gv.index_axis(Axis(1), ci);
                    let (mu, istd, ga) = (mean_b[ci], inv_b[ci], gm[ci]);
                    let xhat = xs.mapv(|v| (v - mu) * istd);
                    let sum_g = gs.sum();
                    let sum_gx = xhat
                        .iter()
                        .zip(gs.iter())
                        .fold(E::zero(), |acc, (&xh, &g)| acc + xh * g);
                    dgamma[ci] = sum_gx;
                    dbeta[ci] = sum_g;
                    let mut dxs = dx.index_axis_mut(Axis(1), ci);
                    if train {
                        let mg = sum_g / m_elems;
                        let mgx = sum_gx / m_elems;
                        ndarray::Zip::from(&mut dxs).and(&gs).and(&xhat).for_each(
                            |d, &g, &xh| {
                                *d = ga * istd * (g - mg - xh * mgx);
                            },
                        );
                    } else {
                        ndarray::Zip::from(&mut dxs).and(&gs).for_each(|d, &g| {
                            *d = ga * istd * g;
                        });
                    }
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(dgamma.into_dyn()),
                    Some(dbeta.into_dyn()),
                ]
            })),
            false,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{assert_close, finite_diff};
    use super::super::Graph;
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng as _;

    fn randn(shape: &[usize], rng: &mut crate::rng::Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = crate::rng::seeded(1);
        let x = randn(&[2, 3, 5, 5], &mut rng);
        let w = randn(&[4, 3, 3, 3], &mut rng);
        let b = randn(&[4], &mut rng);
        let mut g: Graph<f64> = Graph::new();
        let (xt, wt, bt) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xt, wt, bt, 2, 1);
        let yv = g.value(y);
        // Direct quadruple loop.
        let (s, p, kh) = (2usize, 1isize, 3usize);
        for n in 0..2 {
            for co in 0..4 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = b[IxDyn(&[co])];
                        for ci in 0..3 {
                            for ky in 0..kh {
                                for kx in 0..kh {
                                    let iy = (oy * s + ky) as isize - p;
                                    let ix = (ox * s + kx) as isize - p;
                                    if iy < 0 || iy >= 5 || ix < 0 || ix >= 5 {
                                        continue;
                                    }
                                    acc += x[IxDyn(&[n, ci, iy as usize, ix as usize])]
                                        * w[IxDyn(&[co, ci, ky, kx])];
                                }
                            }
                        }
                        let got = yv[IxDyn(&[n, co, oy, ox])];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    fn check_spatial(
        name: &str,
        xs: &[usize],
        ws: &[usize],
        bs: usize,
        f: impl Fn(&mut Graph<f64>, Tensor, Tensor, Tensor) -> Tensor,
    ) {
        let mut rng = crate::rng::seeded(9);
        let x0 = randn(xs, &mut rng);
        let w0 = randn(ws, &mut rng);
        let b0 = randn(&[bs], &mut rng);
        let run = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| {
            let mut g = Graph::new();
            let (xt, wt, bt) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
            let y = f(&mut g, xt, wt, bt);
            let sq = g.square(y);
            let s = g.sum_all(sq);
            (g.scalar_value(s), g, xt, wt, bt, s)
        };
        let (_, g, xt, wt, bt, s) = run(&x0, &w0, &b0);
        let grads = g.backward(s);
        let fd_x = finite_diff(&x0, 1e-6, |x| run(x, &w0, &b0).0);
        let fd_w = finite_diff(&w0, 1e-6, |w| run(&x0, w, &b0).0);
        let fd_b = finite_diff(&b0, 1e-6, |b| run(&x0, &w0, b).0);
        assert_close(grads.get(xt).unwrap(), &fd_x, 1e-5, &format!("{name} dX"));
        assert_close(grads.get(wt).unwrap(), &fd_w, 1e-5, &format!("{name} dW"));
        assert_close(grads.get(bt).unwrap(), &fd_b, 1e-5, &format!("{name} dB"));
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        check_spatial("conv", &[2, 2, 6, 6], &[3, 2, 4, 4], 3, |g, x, w, b| {
            g.conv2d(x, w, b, 2, 1)
        });
    }

    #[test]
    fn conv_transpose2d_gradients_match_finite_differences() {
        check_spatial("convT", &[2, 3, 3, 3], &[3, 2, 4, 4], 2, |g, x, w, b| {
            g.conv_transpose2d(x, w, b, 1, 0)
        });
        check_spatial("convT-s2", &[1, 2, 4, 4], &[2, 3, 4, 4], 3, |g, x, w, b| {
            g.conv_transpose2d(x, w, b, 2, 1)
        });
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with shared weights and zero bias.
        let mut rng = crate::rng::seeded(17);
        let x = randn(&[1, 2, 6, 6], &mut rng);
        let y = randn(&[1, 3, 3, 3], &mut rng);
        // As a conv weight this is [Co=3,Ci=2,kh,kw]; the same buffer read as
        // a convT weight is [Ci=3,Co=2,kh,kw], which is exactly the adjoint.
        let w = randn(&[3, 2, 4, 4], &mut rng);
        let mut g: Graph<f64> = Graph::new();
        let zb3 = g.constant(ArrayD::zeros(IxDyn(&[3])));
        let zb2 = g.constant(ArrayD::zeros(IxDyn(&[2])));
        let (xt, yt) = (g.constant(x.clone()), g.constant(y.clone()));
        let (wc, wtc) = (g.constant(w.clone()), g.constant(w.clone()));
        let cx = g.conv2d(xt, wc, zb3, 2, 1);
        let cty = g.conv_transpose2d(yt, wtc, zb2, 2, 1);
        let lhs: f64 = g
            .value(cx)
            .iter()
            .zip(y.iter())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = g
            .value(cty)
            .iter()
            .zip(x.iter())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn upsample_and_batchnorm_gradients() {
        check_spatial("up+bn", &[2, 3, 3, 3], &[3], 3, |g, x, gamma, beta| {
            let u = g.upsample2x(x);
            let mut st = BatchNormState::new(3);
            g.batch_norm2d(u, gamma, beta, &mut st, true, 0.1, 1e-5)
        });
    }

    #[test]
    fn batchnorm_eval_uses_running_stats_and_is_elementwise() {
        let mut rng = crate::rng::seeded(23);
        let x = randn(&[2, 2, 3, 3], &mut rng);
        let mut st = BatchNormState::<f64>::new(2);
        st.mean = ndarray::arr1(&[0.3, -0.2]);
        st.var = ndarray::arr1(&[1.5, 0.7]);
        let before = st.clone();
        let mut g: Graph<f64> = Graph::new();
        let xt = g.constant(x.clone());
        let gamma = g.constant(ndarray::arr1(&[1.1, 0.9]).into_dyn());
        let beta = g.constant(ndarray::arr1(&[0.1, -0.1]).into_dyn());
        let y = g.batch_norm2d(xt, gamma, beta, &mut st, false, 0.1, 1e-5);
        assert_eq!(st, before, "eval mode must not touch running stats");
        let yv = g.value(y);
        let expect = (x[IxDyn(&[0, 0, 0, 0])] - 0.3) / (1.5f64 + 1e-5).sqrt() * 1.1 + 0.1;
        assert!((yv[IxDyn(&[0, 0, 0, 0])] - expect).abs() < 1e-12);
    }
}
