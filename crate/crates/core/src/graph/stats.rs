//! Probabilistic building blocks: reparameterized Gaussian sampling, stable
//! classification losses, and the batched Gaussian log-density kernel used
//! by the aggregated-posterior entropy estimator.

use super::ops::{as2, sigmoid_stable};
use super::{BackArgs, Element, Graph, Tensor};
use ndarray::{Array1, Array2, ArrayD, Ix1, IxDyn};

const LN_2PI: f64 = 1.8378770664093453;

impl<E: Element> Graph<E> {
    /// `mean + exp(log_var/2) * eps`, with `eps` held constant so gradients
    /// flow into the distribution parameters only.
    pub fn gaussian_sample(&mut self, mean: Tensor, log_var: Tensor, eps: ArrayD<E>) -> Tensor {
        assert_eq!(self.shape(mean), eps.shape(), "eps shape");
        assert_eq!(self.shape(mean), self.shape(log_var));
        let half = E::from_f64(0.5);
        let mut v = self.value(mean).clone();
        {
            let lv = self.value(log_var);
            ndarray::Zip::from(&mut v).and(lv).and(&eps).for_each(|o, &l, &e| {
                *o = *o + (l * half).exp() * e;
            });
        }
        self.push(
            v,
            vec![mean.0, log_var.0],
            Some(Box::new(move |c: BackArgs<E>| {
                let mut dlv = c.grad.clone();
                ndarray::Zip::from(&mut dlv)
                    .and(c.parents[1])
                    .and(&eps)
                    .for_each(|g, &l, &e| {
                        *g = *g * half * (l * half).exp() * e;
                    });
                vec![Some(c.grad.clone()), Some(dlv)]
            })),
            false,
        )
    }

    /// Numerically stable `sum(max(l,0) - l*t + ln(1+exp(-|l|)))`: the
    /// Bernoulli negative log-likelihood of targets `t` under logits `l`.
    pub fn bce_with_logits_sum(&mut self, logits: Tensor, targets: Tensor) -> Tensor {
        let lv = self.value(logits);
        let tv = self.value(targets);
        assert_eq!(lv.shape(), tv.shape());
        let mut acc = E::zero();
        ndarray::Zip::from(lv).and(tv).for_each(|&l, &t| {
            let pos = if l > E::zero() { l } else { E::zero() };
            acc = acc + pos - l * t + (E::one() + (-l.abs()).exp()).ln();
        });
        self.push(
            ArrayD::from_elem(IxDyn(&[]), acc),
            vec![logits.0, targets.0],
            Some(Box::new(|c: BackArgs<E>| {
                let g = c.grad[IxDyn(&[])];
                let mut dl = c.parents[0].clone();
                ndarray::Zip::from(&mut dl).and(c.parents[1]).for_each(|l, &t| {
                    *l = (sigmoid_stable(*l) - t) * g;
                });
                vec![Some(dl), None]
            })),
            false,
        )
    }

    /// Sum over rows of `logsumexp(row) - row[target]`: multinomial
    /// cross-entropy against integer class targets.
    pub fn softmax_ce_sum(&mut self, logits: Tensor, targets: &[usize]) -> Tensor {
        let lv = as2(self.value(logits));
        let (n, k) = lv.dim();
        assert_eq!(targets.len(), n, "one target per row");
        assert!(targets.iter().all(|&t| t < k), "target class out of range");
        let mut total = E::zero();
        for (row, &t) in lv.rows().into_iter().zip(targets.iter()) {
            let m = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).fold(E::zero(), |a, b| a + b).ln();
            total = total + lse - row[t];
        }
        let tg = targets.to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total),
            vec![logits.0],
            Some(Box::new(move |c: BackArgs<E>| {
                let g = c.grad[IxDyn(&[])];
                let lv = as2(c.parents[0]);
                let mut dl = Array2::<E>::zeros(lv.dim());
                for ((row, mut drow), &t) in
                    lv.rows().into_iter().zip(dl.rows_mut()).zip(tg.iter())
                {
                    let m = row.iter().cloned().fold(E::neg_infinity(), E::max);
                    let denom = row.iter().map(|&v| (v - m).exp()).fold(E::zero(), |a, b| a + b);
                    for (d, &v) in drow.iter_mut().zip(row.iter()) {
                        *d = (v - m).exp() / denom * g;
                    }
                    drow[t] = drow[t] - g;
                }
                vec![Some(dl.into_dyn())]
            })),
            false,
        )
    }

    /// Matrix of Gaussian log-densities: `out[i,j] = log N(z_i; mu_j, diag
    /// exp(lv_j))` for `z, mu, lv` of shape `[M,d]` (rows are batch items).
    pub fn pairwise_gauss_logpdf(&mut self, z: Tensor, mu: Tensor, lv: Tensor) -> Tensor {
        let zv = as2(self.value(z));
        let mv = as2(self.value(mu));
        let sv = as2(self.value(lv));
        let (m, d) = zv.dim();
        assert_eq!(mv.dim(), (m, d));
        assert_eq!(sv.dim(), (m, d));
        let ln2pi = E::from_f64(LN_2PI);
        let half = E::from_f64(0.5);
        let mut out = Array2::<E>::zeros((m, m));
        for i in 0..m {
            for j in 0..m {
                let mut s = E::zero();
                for k in 0..d {
                    let diff = zv[(i, k)] - mv[(j, k)];
                    s = s + diff * diff * (-sv[(j, k)]).exp() + sv[(j, k)] + ln2pi;
                }
                out[(i, j)] = -half * s;
            }
        }
        self.push(
            out.into_dyn(),
            vec![z.0, mu.0, lv.0],
            Some(Box::new(move |c: BackArgs<E>| {
                let zv = as2(c.parents[0]);
                let mv = as2(c.parents[1]);
                let sv = as2(c.parents[2]);
                let gv = as2(c.grad);
                let (m, d) = zv.dim();
                let mut dz = Array2::<E>::zeros((m, d));
                let mut dmu = Array2::<E>::zeros((m, d));
                let mut dlv = Array2::<E>::zeros((m, d));
                for i in 0..m {
                    for j in 0..m {
                        let g = gv[(i, j)];
                        if g == E::zero() {
                            continue;
                        }
                        for k in 0..d {
                            let prec = (-sv[(j, k)]).exp();
                            let diff = zv[(i, k)] - mv[(j, k)];
                            dz[(i, k)] = dz[(i, k)] - g * diff * prec;
                            dmu[(j, k)] = dmu[(j, k)] + g * diff * prec;
                            dlv[(j, k)] =
                                dlv[(j, k)] + g * half * (diff * diff * prec - E::one());
                        }
                    }
                }
                vec![
                    Some(dz.into_dyn()),
                    Some(dmu.into_dyn()),
                    Some(dlv.into_dyn()),
                ]
            })),
            false,
        )
    }

    /// Row-wise `log(sum(exp(x)))` of a rank-2 tensor, max-shifted.
    pub fn logsumexp_rows(&mut self, x: Tensor) -> Tensor {
        let xv = as2(self.value(x));
        let mut out = Array1::<E>::zeros(xv.nrows());
        for (o, row) in out.iter_mut().zip(xv.rows()) {
            let m = row.iter().cloned().fold(E::neg_infinity(), E::max);
            *o = m + row.iter().map(|&v| (v - m).exp()).fold(E::zero(), |a, b| a + b).ln();
        }
        self.push(
            out.into_dyn(),
            vec![x.0],
            Some(Box::new(|c: BackArgs<E>| {
                let xv = as2(c.parents[0]);
                let gv = c
                    .grad
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("grad rank");
                let mut dx = Array2::<E>::zeros(xv.dim());
                for ((row, mut drow), &g) in
                    xv.rows().into_iter().zip(dx.rows_mut()).zip(gv.iter())
                {
                    let m = row.iter().cloned().fold(E::neg_infinity(), E::max);
                    let denom =
                        row.iter().map(|&v| (v - m).exp()).fold(E::zero(), |a, b| a + b);
                    for (d, &v) in drow.iter_mut().zip(row.iter()) {
                        *d = (v - m).exp() / denom * g;
                    }
                }
                vec![Some(dx.into_dyn())]
            })),
            false,
        )
    }
}
