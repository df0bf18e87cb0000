//! Objective terms: reconstruction, the two KL terms, the static
//! consistency triplet, dynamic-factor prediction, and the mutual
//! information regularizer with its minibatch-weighted-sampling entropy
//! estimator. Graph builders carry gradients for training; the plain-array
//! functions evaluate the same math for tests and reporting.

use crate::datasets::DataKind;
use crate::error::{Error, Result};
use crate::graph::{Element, Graph, Tensor};
use crate::model::{GaussianParams, GaussianSeq};
use ndarray::{Array1, Array2, ArrayD};
use serde::{Deserialize, Serialize};

/// Balancing weights of the auxiliary terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub scc: f64,
    pub dfp: f64,
    pub mi: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas { scc: 1000.0, dfp: 100.0, mi: 1.0 }
    }
}

impl Lambdas {
    pub fn zero() -> Self {
        Lambdas { scc: 0.0, dfp: 0.0, mi: 0.0 }
    }
}

/// Per-term values of one objective evaluation. `scc`, `dfp`, `mi` are
/// stored unweighted; `total` applies the lambdas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_f: f64,
    pub kl_dyn: f64,
    pub scc: f64,
    pub dfp: f64,
    pub mi: f64,
    pub lambda_scc: f64,
    pub lambda_dfp: f64,
    pub lambda_mi: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomposes the total from the parts; equals `total` by construction.
    pub fn composed_total(&self) -> f64 {
        self.recon
            + self.kl_f
            + self.kl_dyn
            + self.lambda_scc * self.scc
            + self.lambda_dfp * self.dfp
            + self.lambda_mi * self.mi
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("recon", self.recon),
            ("kl_f", self.kl_f),
            ("kl_dyn", self.kl_dyn),
            ("scc", self.scc),
            ("dfp", self.dfp),
            ("mi", self.mi),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Composes the weighted objective from already-evaluated terms.
pub fn total_loss(
    recon: f64,
    kl_f: f64,
    kl_dyn: f64,
    scc: f64,
    dfp: f64,
    mi: f64,
    lambdas: Lambdas,
) -> LossBreakdown {
    let mut b = LossBreakdown {
        recon,
        kl_f,
        kl_dyn,
        scc,
        dfp,
        mi,
        lambda_scc: lambdas.scc,
        lambda_dfp: lambdas.dfp,
        lambda_mi: lambdas.mi,
        total: 0.0,
    };
    b.total = b.composed_total();
    b
}

// ----- graph builders (used by the training step) -----

/// Diagonal-Gaussian KL `KL(q || p)` summed over every element of the
/// `[B,d]` parameter tensors.
pub fn kl_gaussians_graph<E: Element>(
    g: &mut Graph<E>,
    q_mu: Tensor,
    q_lv: Tensor,
    p_mu: Tensor,
    p_lv: Tensor,
) -> Tensor {
    let dl = g.sub(p_lv, q_lv);
    let ratio = {
        let d = g.sub(q_lv, p_lv);
        g.exp(d)
    };
    let quad = {
        let diff = g.sub(q_mu, p_mu);
        let sq = g.square(diff);
        let neg_plv = g.neg(p_lv);
        let prec = g.exp(neg_plv);
        g.mul(sq, prec)
    };
    let s1 = g.add(dl, ratio);
    let s2 = g.add(s1, quad);
    let s3 = g.add_scalar(s2, E::from_f64(-1.0));
    let tot = g.sum_all(s3);
    g.mul_scalar(tot, E::from_f64(0.5))
}

/// Triplet hinge `mean_b max(D(a,p) - D(a,n) + m, 0)` with Euclidean D
/// over rows of `[B,d]` tensors.
pub fn scc_triplet_graph<E: Element>(
    g: &mut Graph<E>,
    anchor: Tensor,
    pos: Tensor,
    neg: Tensor,
    margin: f64,
) -> Tensor {
    let d_ap = row_distance(g, anchor, pos);
    let d_an = row_distance(g, anchor, neg);
    let gap = g.sub(d_ap, d_an);
    let shifted = g.add_scalar(gap, E::from_f64(margin));
    let hinge = g.relu(shifted);
    g.mean_all(hinge)
}

fn row_distance<E: Element>(g: &mut Graph<E>, a: Tensor, b: Tensor) -> Tensor {
    let diff = g.sub(a, b);
    let sq = g.square(diff);
    let ssum = g.sum_axis1(sq);
    // Small floor keeps the sqrt differentiable when a == b.
    let floored = g.add_scalar(ssum, E::from_f64(1e-12));
    g.sqrt(floored)
}

/// Batched view of one latent group: samples and posterior parameters,
/// each `[M,d]` on the graph.
#[derive(Clone, Copy)]
pub struct GaussBatch {
    pub z: Tensor,
    pub mu: Tensor,
    pub lv: Tensor,
}

/// Minibatch-weighted-sampling estimate of `E[log q(z)]` from the pairwise
/// density matrix: `(1/M) sum_i [ logsumexp_j log q(z_i|x_j) ] - log(N*M)`.
pub fn mws_entropy_graph<E: Element>(g: &mut Graph<E>, batch: &GaussBatch, n_data: usize) -> Tensor {
    let mat = g.pairwise_gauss_logpdf(batch.z, batch.mu, batch.lv);
    mws_from_logmat(g, mat, n_data)
}

/// Joint-group variant: the per-pair density is the product of the two
/// groups' densities, so the log matrices add.
pub fn mws_entropy_joint_graph<E: Element>(
    g: &mut Graph<E>,
    a: &GaussBatch,
    b: &GaussBatch,
    n_data: usize,
) -> Tensor {
    let mat_a = g.pairwise_gauss_logpdf(a.z, a.mu, a.lv);
    let mat_b = g.pairwise_gauss_logpdf(b.z, b.mu, b.lv);
    let mat = g.add(mat_a, mat_b);
    mws_from_logmat(g, mat, n_data)
}

fn mws_from_logmat<E: Element>(g: &mut Graph<E>, logmat: Tensor, n_data: usize) -> Tensor {
    let m = g.shape(logmat)[0];
    assert!(n_data >= 1, "dataset size must be positive");
    let lse = g.logsumexp_rows(logmat);
    let mean = g.mean_all(lse);
    g.add_scalar(mean, E::from_f64(-((n_data as f64 * m as f64).ln())))
}

/// Mutual-information regularizer: `sum_t [H(z_f) + H(z_t) - H(z_f,z_t)]`
/// with every entropy estimated by minibatch weighted sampling
/// (`H = -E[log q]`). The static entropy is t-independent and computed
/// once.
pub fn mi_graph<E: Element>(
    g: &mut Graph<E>,
    z_f: &GaussBatch,
    z_steps: &[GaussBatch],
    n_data: usize,
) -> Tensor {
    let mat_f = g.pairwise_gauss_logpdf(z_f.z, z_f.mu, z_f.lv);
    let est_f = mws_from_logmat(g, mat_f, n_data);
    let t_len = z_steps.len();
    let mut acc = g.mul_scalar(est_f, E::from_f64(-(t_len as f64))); // sum_t H(z_f)
    for step in z_steps {
        let mat_t = g.pairwise_gauss_logpdf(step.z, step.mu, step.lv);
        let est_t = mws_from_logmat(g, mat_t, n_data);
        let joint_mat = g.add(mat_f, mat_t);
        let est_joint = mws_from_logmat(g, joint_mat, n_data);
        // H_t - H_joint = -est_t + est_joint
        let d = g.sub(est_joint, est_t);
        acc = g.add(acc, d);
    }
    acc
}

// ----- plain-array evaluation (tests, reports, eval paths) -----

/// Negative log-likelihood of a single sequence's observations given
/// decoded means: per-pixel Bernoulli cross-entropy for video (`x_hat` in
/// `[0,1]`), summed squared error for audio features. Summed over all
/// elements of the sequence.
pub fn reconstruction_loss(x: &ArrayD<f64>, x_hat: &ArrayD<f64>, kind: DataKind) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Precondition(format!(
            "shape mismatch: {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    match kind {
        DataKind::Shapes => {
            for (&a, &b) in x.iter().zip(x_hat.iter()) {
                if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
                    return Err(Error::Precondition(format!(
                        "cross-entropy inputs must lie in [0,1], got ({a}, {b})"
                    )));
                }
            }
            let eps = 1e-12;
            let mut total = 0.0;
            ndarray::Zip::from(x).and(x_hat).for_each(|&t, &p| {
                total -= t * (p.max(eps)).ln() + (1.0 - t) * ((1.0 - p).max(eps)).ln();
            });
            Ok(total)
        }
        DataKind::Tones => {
            let mut total = 0.0;
            ndarray::Zip::from(x).and(x_hat).for_each(|&t, &p| {
                total += (t - p) * (t - p);
            });
            Ok(total)
        }
    }
}

/// Closed-form KL divergence between diagonal Gaussians.
pub fn kl_gaussians(q: &GaussianParams<f64>, p: &GaussianParams<f64>) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Precondition(format!(
            "dimension mismatch: {} vs {}",
            q.dim(),
            p.dim()
        )));
    }
    let mut total = 0.0;
    for k in 0..q.dim() {
        let (mq, lq) = (q.mean[k], q.log_var[k]);
        let (mp, lp) = (p.mean[k], p.log_var[k]);
        total += 0.5 * (lp - lq + (lq - lp).exp() + (mq - mp) * (mq - mp) * (-lp).exp() - 1.0);
    }
    Ok(total)
}

/// Posterior bundle of one sequence.
#[derive(Debug, Clone)]
pub struct SeqPosteriors {
    pub stat: GaussianParams<f64>,
    pub dynamic: GaussianSeq<f64>,
}

/// Sequence evidence-bound loss: reconstruction plus the static KL against
/// N(0, I) plus the per-step dynamic KLs against the rolled prior.
pub fn elbo_loss(
    x: &ArrayD<f64>,
    x_hat: &ArrayD<f64>,
    q: &SeqPosteriors,
    dyn_prior: &GaussianSeq<f64>,
    kind: DataKind,
) -> Result<f64> {
    let recon = reconstruction_loss(x, x_hat, kind)?;
    let kl_f = kl_gaussians(&q.stat, &GaussianParams::standard(q.stat.dim()))?;
    let t_len = q.dynamic.mean.nrows();
    if dyn_prior.mean.nrows() != t_len {
        return Err(Error::Precondition("prior/posterior step counts differ".into()));
    }
    let mut kl_dyn = 0.0;
    for t in 0..t_len {
        kl_dyn += kl_gaussians(&q.dynamic.step(t), &dyn_prior.step(t))?;
    }
    Ok(recon + kl_f + kl_dyn)
}

/// Triplet hinge on one (anchor, positive, negative) triple.
pub fn scc_triplet(
    anchor: &Array1<f64>,
    pos: &Array1<f64>,
    neg: &Array1<f64>,
    margin: f64,
) -> Result<f64> {
    if anchor.len() != pos.len() || anchor.len() != neg.len() {
        return Err(Error::Precondition("triplet dims differ".into()));
    }
    let d = |a: &Array1<f64>, b: &Array1<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    Ok((d(anchor, pos) - d(anchor, neg) + margin).max(0.0))
}

/// Cross-entropy of integer targets, averaged over rows.
pub fn dfp_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let (n, k) = logits.dim();
    if labels.len() != n {
        return Err(Error::Precondition("one label per row required".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Precondition(format!("label {bad} out of range (K={k})")));
    }
    let mut g: Graph<f64> = Graph::new();
    let lt = g.constant(logits.clone().into_dyn());
    let s = g.softmax_ce_sum(lt, labels);
    Ok(g.scalar_value(s) / n as f64)
}

/// Multi-hot binary cross-entropy for unordered top-k targets, summed over
/// classes and averaged over rows.
pub fn dfp_loss_multilabel(logits: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    if logits.dim() != targets.dim() {
        return Err(Error::Precondition("logits/targets dims differ".into()));
    }
    let n = logits.nrows();
    let mut g: Graph<f64> = Graph::new();
    let lt = g.constant(logits.clone().into_dyn());
    let tt = g.constant(targets.clone().into_dyn());
    let s = g.bce_with_logits_sum(lt, tt);
    Ok(g.scalar_value(s) / n as f64)
}

/// Minibatch-weighted-sampling estimate of `E[log q(z)]` for one latent
/// group over a batch of M samples from a dataset of size `n_data`.
pub fn mws_entropy_term(
    z: &Array2<f64>,
    mu: &Array2<f64>,
    lv: &Array2<f64>,
    n_data: usize,
) -> Result<f64> {
    check_batch(z, mu, lv, n_data)?;
    let mut g: Graph<f64> = Graph::new();
    let batch = constant_batch(&mut g, z, mu, lv);
    let est = mws_entropy_graph(&mut g, &batch, n_data);
    finite(g.scalar_value(est))
}

/// Joint-group estimate where the per-pair density is
/// `q(z_f(x_i)|x_j) * q(z_t(x_i)|x_j)`.
pub fn mws_entropy_joint(
    f: (&Array2<f64>, &Array2<f64>, &Array2<f64>),
    t: (&Array2<f64>, &Array2<f64>, &Array2<f64>),
    n_data: usize,
) -> Result<f64> {
    check_batch(f.0, f.1, f.2, n_data)?;
    check_batch(t.0, t.1, t.2, n_data)?;
    let mut g: Graph<f64> = Graph::new();
    let fb = constant_batch(&mut g, f.0, f.1, f.2);
    let tb = constant_batch(&mut g, t.0, t.1, t.2);
    let est = mws_entropy_joint_graph(&mut g, &fb, &tb, n_data);
    finite(g.scalar_value(est))
}

/// Mutual-information estimate `sum_t [H(z_f) + H(z_t) - H(z_f, z_t)]`.
pub fn mi_loss(
    z_f: (&Array2<f64>, &Array2<f64>, &Array2<f64>),
    z_steps: &[(Array2<f64>, Array2<f64>, Array2<f64>)],
    n_data: usize,
) -> Result<f64> {
    check_batch(z_f.0, z_f.1, z_f.2, n_data)?;
    let mut g: Graph<f64> = Graph::new();
    let fb = constant_batch(&mut g, z_f.0, z_f.1, z_f.2);
    let steps: Vec<GaussBatch> = z_steps
        .iter()
        .map(|(z, mu, lv)| {
            check_batch(z, mu, lv, n_data)?;
            Ok(constant_batch(&mut g, z, mu, lv))
        })
        .collect::<Result<_>>()?;
    let est = mi_graph(&mut g, &fb, &steps, n_data);
    finite(g.scalar_value(est))
}

fn check_batch(z: &Array2<f64>, mu: &Array2<f64>, lv: &Array2<f64>, n_data: usize) -> Result<()> {
    if z.dim() != mu.dim() || z.dim() != lv.dim() {
        return Err(Error::Precondition("batch parameter dims differ".into()));
    }
    if z.nrows() == 0 {
        return Err(Error::Precondition("batch must hold at least one sample".into()));
    }
    if n_data < z.nrows() {
        return Err(Error::Precondition(format!(
            "dataset size {n_data} smaller than batch {}",
            z.nrows()
        )));
    }
    if z.iter().chain(mu.iter()).chain(lv.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Precondition("non-finite batch values".into()));
    }
    Ok(())
}

fn constant_batch(
    g: &mut Graph<f64>,
    z: &Array2<f64>,
    mu: &Array2<f64>,
    lv: &Array2<f64>,
) -> GaussBatch {
    GaussBatch {
        z: g.constant(z.clone().into_dyn()),
        mu: g.constant(mu.clone().into_dyn()),
        lv: g.constant(lv.clone().into_dyn()),
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Precondition("non-finite density estimate".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, IxDyn};
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::Distribution as _;

    fn randu(shape: &[usize], lo: f64, hi: f64, rng: &mut crate::rng::Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
    }

    fn randu2(n: usize, d: usize, lo: f64, hi: f64, rng: &mut crate::rng::Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.gen_range(lo..hi))
    }

    // ----- reconstruction -----

    #[test]
    fn perfect_binary_reconstruction_is_zero() {
        let x = arr2(&[[0.0, 1.0], [1.0, 0.0]]).into_dyn();
        assert_eq!(reconstruction_loss(&x, &x, DataKind::Shapes).unwrap(), 0.0);
    }

    #[test]
    fn uniform_half_gives_ln2_per_pixel() {
        let shape = [15usize, 1, 8, 8];
        let x = ArrayD::from_elem(IxDyn(&shape), 0.5);
        let got = reconstruction_loss(&x, &x, DataKind::Shapes).unwrap();
        let want = (15 * 8 * 8) as f64 * std::f64::consts::LN_2;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn bce_matches_scalar_loop_on_random_pairs() {
        let mut rng = crate::rng::seeded(51);
        for _ in 0..5 {
            let x = randu(&[3, 2, 4, 4], 0.0, 1.0, &mut rng);
            let p = randu(&[3, 2, 4, 4], 0.01, 0.99, &mut rng);
            let got = reconstruction_loss(&x, &p, DataKind::Shapes).unwrap();
            let xs = x.as_slice().unwrap();
            let ps = p.as_slice().unwrap();
            let mut want = 0.0;
            for i in 0..xs.len() {
                want -= xs[i] * ps[i].ln() + (1.0 - xs[i]) * (1.0 - ps[i]).ln();
            }
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn bce_rejects_out_of_range_values() {
        let x = arr1(&[1.2]).into_dyn();
        let p = arr1(&[0.5]).into_dyn();
        assert!(reconstruction_loss(&x, &p, DataKind::Shapes).is_err());
        assert!(reconstruction_loss(&p, &x, DataKind::Shapes).is_err());
    }

    #[test]
    fn audio_reconstruction_is_summed_squared_error() {
        let x = arr2(&[[1.0, -2.0], [0.5, 0.0]]).into_dyn();
        let y = arr2(&[[0.0, -1.0], [0.5, 2.0]]).into_dyn();
        let got = reconstruction_loss(&x, &y, DataKind::Tones).unwrap();
        assert!((got - (1.0 + 1.0 + 0.0 + 4.0)).abs() < 1e-12);
    }

    // ----- KL -----

    #[test]
    fn kl_identity_is_zero_and_mean_shift_is_quadratic() {
        let std4 = GaussianParams::standard(4);
        assert_eq!(kl_gaussians(&std4, &std4).unwrap(), 0.0);
        let q = GaussianParams { mean: arr1(&[1.0, -2.0, 0.5, 0.0]), log_var: arr1(&[0.0; 4]) };
        let got = kl_gaussians(&q, &std4).unwrap();
        let want = (1.0 + 4.0 + 0.25 + 0.0) / 2.0;
        assert!((got - want).abs() < 1e-12);
        let q3 = GaussianParams::standard(3);
        assert!(kl_gaussians(&q3, &std4).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo_on_random_draws() {
        let mut rng = crate::rng::seeded(52);
        let normal = rand_distr::StandardNormal;
        for draw in 0..10 {
            let d = 4;
            let q = GaussianParams {
                mean: Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0)),
                log_var: Array1::from_shape_fn(d, |_| rng.gen_range(-0.7..0.7)),
            };
            let p = GaussianParams {
                mean: Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0)),
                log_var: Array1::from_shape_fn(d, |_| rng.gen_range(-0.7..0.7)),
            };
            let closed = kl_gaussians(&q, &p).unwrap();
            // MC estimate of E_q[log q - log p] with 1e6 samples.
            let n = 1_000_000usize;
            let mut acc = 0.0f64;
            for _ in 0..n {
                let mut lq = 0.0;
                let mut lp = 0.0;
                for k in 0..d {
                    let e: f64 = normal.sample(&mut rng);
                    let z = q.mean[k] + (q.log_var[k] / 2.0).exp() * e;
                    lq += -0.5 * ((z - q.mean[k]).powi(2) * (-q.log_var[k]).exp() + q.log_var[k]);
                    lp += -0.5 * ((z - p.mean[k]).powi(2) * (-p.log_var[k]).exp() + p.log_var[k]);
                }
                acc += lq - lp;
            }
            let mc = acc / n as f64;
            let rel = (closed - mc).abs() / closed.abs().max(1e-9);
            assert!(rel < 0.01, "draw {draw}: closed {closed} vs MC {mc} (rel {rel})");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        /// Nonnegativity of the closed form, and zero only at equality.
        #[test]
        fn kl_is_nonnegative(seed in 0u64..10_000) {
            let mut rng = crate::rng::seeded(seed);
            let d = 1 + (seed as usize % 6);
            let q = GaussianParams {
                mean: Array1::from_shape_fn(d, |_| rng.gen_range(-3.0..3.0)),
                log_var: Array1::from_shape_fn(d, |_| rng.gen_range(-2.0..2.0)),
            };
            let p = GaussianParams {
                mean: Array1::from_shape_fn(d, |_| rng.gen_range(-3.0..3.0)),
                log_var: Array1::from_shape_fn(d, |_| rng.gen_range(-2.0..2.0)),
            };
            let kl = kl_gaussians(&q, &p).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert!(kl_gaussians(&q, &q).unwrap().abs() < 1e-12);
        }
    }

    // ----- elbo -----

    #[test]
    fn elbo_vanishes_when_posteriors_match_priors_and_reconstruction_is_perfect() {
        let x = arr2(&[[0.0, 1.0], [1.0, 1.0]]).into_dyn();
        let q = SeqPosteriors {
            stat: GaussianParams::standard(3),
            dynamic: GaussianSeq { mean: Array2::zeros((2, 2)), log_var: Array2::zeros((2, 2)) },
        };
        let prior = GaussianSeq { mean: Array2::zeros((2, 2)), log_var: Array2::zeros((2, 2)) };
        let got = elbo_loss(&x, &x, &q, &prior, DataKind::Shapes).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn elbo_is_monotone_in_static_kl_and_composes() {
        let mut rng = crate::rng::seeded(53);
        let x = randu(&[3, 4], 0.0, 1.0, &mut rng);
        let xh = randu(&[3, 4], 0.05, 0.95, &mut rng);
        let dyn_mean = randu2(3, 2, -0.5, 0.5, &mut rng);
        let dyn_lv = randu2(3, 2, -0.5, 0.5, &mut rng);
        let mk = |shift: f64| SeqPosteriors {
            stat: GaussianParams { mean: arr1(&[shift, 0.0]), log_var: arr1(&[0.0, 0.0]) },
            dynamic: GaussianSeq { mean: dyn_mean.clone(), log_var: dyn_lv.clone() },
        };
        let prior = GaussianSeq {
            mean: randu2(3, 2, -0.5, 0.5, &mut rng),
            log_var: randu2(3, 2, -0.5, 0.5, &mut rng),
        };
        let lo = elbo_loss(&x, &xh, &mk(0.5), &prior, DataKind::Shapes).unwrap();
        let hi = elbo_loss(&x, &xh, &mk(2.0), &prior, DataKind::Shapes).unwrap();
        assert!(hi > lo, "increasing kl_f must increase the loss");

        // Compositional oracle: recompute the three terms separately.
        let q = mk(1.3);
        let got = elbo_loss(&x, &xh, &q, &prior, DataKind::Shapes).unwrap();
        let mut want = reconstruction_loss(&x, &xh, DataKind::Shapes).unwrap();
        want += kl_gaussians(&q.stat, &GaussianParams::standard(2)).unwrap();
        for t in 0..3 {
            want += kl_gaussians(&q.dynamic.step(t), &prior.step(t)).unwrap();
        }
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    // ----- triplet -----

    #[test]
    fn triplet_edge_cases() {
        let a = arr1(&[0.0, 0.0]);
        let n = arr1(&[2.0, 0.0]);
        assert_eq!(scc_triplet(&a, &a, &n, 1.0).unwrap(), 0.0, "satisfied margin");
        assert_eq!(scc_triplet(&a, &a, &a, 1.0).unwrap(), 1.0, "degenerate triple");
        assert!(scc_triplet(&a, &a, &arr1(&[1.0]), 1.0).is_err());
    }

    #[test]
    fn triplet_matches_scalar_loop() {
        let mut rng = crate::rng::seeded(54);
        for _ in 0..20 {
            let a = Array1::from_shape_fn(6, |_| rng.gen_range(-2.0..2.0));
            let p = Array1::from_shape_fn(6, |_| rng.gen_range(-2.0..2.0));
            let n = Array1::from_shape_fn(6, |_| rng.gen_range(-2.0..2.0));
            let got = scc_triplet(&a, &p, &n, 1.0).unwrap();
            let mut dap = 0.0;
            let mut dan = 0.0;
            for k in 0..6 {
                dap += (a[k] - p[k]) * (a[k] - p[k]);
                dan += (a[k] - n[k]) * (a[k] - n[k]);
            }
            let want = (dap.sqrt() - dan.sqrt() + 1.0).max(0.0);
            assert!((got - want).abs() < 1e-6);
        }
    }

    // ----- dfp -----

    #[test]
    fn dfp_edges_and_oracle() {
        // Confident correct logits: loss near zero.
        let mut logits = Array2::from_elem((4, 64), -20.0);
        for (r, &t) in [5usize, 0, 63, 17].iter().enumerate() {
            logits[(r, t)] = 20.0;
        }
        let near_zero = dfp_loss(&logits, &[5, 0, 63, 17]).unwrap();
        assert!(near_zero < 1e-6, "{near_zero}");

        // Uniform logits over 64 classes: ln 64 per step.
        let uniform = Array2::zeros((7, 64));
        let got = dfp_loss(&uniform, &[0, 1, 2, 3, 4, 5, 6]).unwrap();
        assert!((got - 64f64.ln()).abs() < 1e-9);

        // Out-of-range target.
        assert!(dfp_loss(&uniform, &[0, 1, 2, 3, 4, 5, 64]).is_err());

        // Scalar-loop oracle on random logits.
        let mut rng = crate::rng::seeded(55);
        let rnd = Array2::from_shape_fn((5, 9), |_| rng.gen_range(-3.0..3.0));
        let labels = [3usize, 8, 0, 2, 2];
        let got = dfp_loss(&rnd, &labels).unwrap();
        let mut want = 0.0;
        for r in 0..5 {
            let mx = rnd.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + rnd.row(r).iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            want += lse - rnd[(r, labels[r])];
        }
        want /= 5.0;
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn multilabel_dfp_matches_direct_binary_ce() {
        let mut rng = crate::rng::seeded(56);
        let logits = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-2.0..2.0));
        let targets = arr2(&[
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [1.0, 1.0, 0.0, 0.0],
        ]);
        let got = dfp_loss_multilabel(&logits, &targets).unwrap();
        let mut want = 0.0;
        for (l, t) in logits.iter().zip(targets.iter()) {
            let p = 1.0 / (1.0 + (-l).exp());
            want -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        want /= 3.0;
        assert!((got - want).abs() < 1e-9);
    }

    // ----- minibatch weighted sampling -----

    fn scalar_mws(z: &Array2<f64>, mu: &Array2<f64>, lv: &Array2<f64>, n_data: usize) -> f64 {
        let (m, d) = z.dim();
        let logq = |i: usize, j: usize| -> f64 {
            let mut s = 0.0;
            for k in 0..d {
                let diff = z[(i, k)] - mu[(j, k)];
                s += diff * diff * (-lv[(j, k)]).exp() + lv[(j, k)] + (2.0 * std::f64::consts::PI).ln();
            }
            -0.5 * s
        };
        let mut total = 0.0;
        for i in 0..m {
            let vals: Vec<f64> = (0..m).map(|j| logq(i, j)).collect();
            let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + vals.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse;
        }
        total / m as f64 - ((n_data * m) as f64).ln()
    }

    #[test]
    fn single_sample_collapses_to_self_density() {
        let z = arr2(&[[0.3, -0.7]]);
        let mu = arr2(&[[0.1, 0.0]]);
        let lv = arr2(&[[0.2, -0.4]]);
        let got = mws_entropy_term(&z, &mu, &lv, 1).unwrap();
        let mut want = 0.0;
        for k in 0..2 {
            let diff: f64 = z[(0, k)] - mu[(0, k)];
            want += -0.5
                * (diff * diff * (-lv[(0, k)]).exp()
                    + lv[(0, k)]
                    + (2.0 * std::f64::consts::PI).ln());
        }
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    /// With every posterior equal to N(0, I) the inner sum collapses to
    /// M * phi(z_i), so the estimator's expectation is exactly
    /// -(d/2) ln(2*pi*e) - ln N: the analytic entropy of the standard
    /// normal shifted by the estimator's lower-bound gap ln N.
    #[test]
    fn identical_standard_posteriors_sit_at_the_biased_bound() {
        let (m, d, n_data) = (64usize, 4usize, 64usize);
        let entropy = 0.5 * d as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        let expect = -entropy - (n_data as f64).ln();
        let mut rng = crate::rng::seeded(57);
        let mut within = 0;
        let trials = 100;
        for _ in 0..trials {
            let z = Array2::from_shape_fn((m, d), |_| {
                rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)
            });
            let mu = Array2::zeros((m, d));
            let lv = Array2::zeros((m, d));
            let got = mws_entropy_term(&z, &mu, &lv, n_data).unwrap();
            // Sampling noise: sd of mean_i log phi(z_i) is sqrt(d/2/M) ~ 0.18.
            if (got - expect).abs() < 0.62 {
                within += 1;
            }
        }
        assert!(within >= 95, "only {within}/{trials} trials within 3.5 sigma of {expect}");
    }

    #[test]
    fn duplicated_rows_double_the_density_sum() {
        let mut rng = crate::rng::seeded(58);
        let m = 8;
        let z = randu2(m, 3, -1.0, 1.0, &mut rng);
        let mu = randu2(m, 3, -1.0, 1.0, &mut rng);
        let lv = randu2(m, 3, -0.5, 0.5, &mut rng);
        let dup = |a: &Array2<f64>| -> Array2<f64> {
            ndarray::concatenate(ndarray::Axis(0), &[a.view(), a.view()]).unwrap()
        };
        let mut g: Graph<f64> = Graph::new();
        let half = constant_batch(&mut g, &z, &mu, &lv);
        let full = constant_batch(&mut g, &dup(&z), &dup(&mu), &dup(&lv));
        let mat_h = g.pairwise_gauss_logpdf(half.z, half.mu, half.lv);
        let lse_h = g.logsumexp_rows(mat_h);
        let mat_f = g.pairwise_gauss_logpdf(full.z, full.mu, full.lv);
        let lse_f = g.logsumexp_rows(mat_f);
        let lh = g.value(lse_h).clone();
        let lf = g.value(lse_f).clone();
        for i in 0..m {
            let a = lh[IxDyn(&[i])];
            let b = lf[IxDyn(&[i])];
            let c = lf[IxDyn(&[i + m])];
            assert!((b - a - std::f64::consts::LN_2).abs() < 1e-9, "{b} vs {a}+ln2");
            assert!((c - a - std::f64::consts::LN_2).abs() < 1e-9);
        }
    }

    #[test]
    fn mws_matches_scalar_loop() {
        let mut rng = crate::rng::seeded(59);
        for _ in 0..10 {
            let m = rng.gen_range(2..12);
            let d = rng.gen_range(1..6);
            let z = randu2(m, d, -1.5, 1.5, &mut rng);
            let mu = randu2(m, d, -1.5, 1.5, &mut rng);
            let lv = randu2(m, d, -1.0, 1.0, &mut rng);
            let n_data = m + rng.gen_range(0..100);
            let got = mws_entropy_term(&z, &mu, &lv, n_data).unwrap();
            let want = scalar_mws(&z, &mu, &lv, n_data);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Batch-order invariance of the estimator.
        #[test]
        fn mws_is_permutation_invariant(seed in 0u64..5_000) {
            let mut rng = crate::rng::seeded(seed);
            let m = 6;
            let z = randu2(m, 3, -1.0, 1.0, &mut rng);
            let mu = randu2(m, 3, -1.0, 1.0, &mut rng);
            let lv = randu2(m, 3, -0.5, 0.5, &mut rng);
            let base = mws_entropy_term(&z, &mu, &lv, 40).unwrap();
            let mut perm: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let apply = |a: &Array2<f64>| -> Array2<f64> {
                let mut out = a.clone();
                for (dst, &src) in perm.iter().enumerate() {
                    out.row_mut(dst).assign(&a.row(src));
                }
                out
            };
            let permuted =
                mws_entropy_term(&apply(&z), &apply(&mu), &apply(&lv), 40).unwrap();
            prop_assert!((base - permuted).abs() < 1e-9);
        }
    }

    // ----- mutual information -----

    fn scalar_mi(
        zf: (&Array2<f64>, &Array2<f64>, &Array2<f64>),
        steps: &[(Array2<f64>, Array2<f64>, Array2<f64>)],
        n_data: usize,
    ) -> f64 {
        let (m, _) = zf.0.dim();
        let logq = |z: &Array2<f64>, mu: &Array2<f64>, lv: &Array2<f64>, i: usize, j: usize| {
            let mut s = 0.0;
            for k in 0..z.ncols() {
                let diff = z[(i, k)] - mu[(j, k)];
                s += diff * diff * (-lv[(j, k)]).exp()
                    + lv[(j, k)]
                    + (2.0 * std::f64::consts::PI).ln();
            }
            -0.5 * s
        };
        let est = |mat: &dyn Fn(usize, usize) -> f64| -> f64 {
            let mut total = 0.0;
            for i in 0..m {
                let vals: Vec<f64> = (0..m).map(|j| mat(i, j)).collect();
                let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                total += mx + vals.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            }
            total / m as f64 - ((n_data * m) as f64).ln()
        };
        let ef = est(&|i, j| logq(zf.0, zf.1, zf.2, i, j));
        let mut mi = 0.0;
        for (z, mu, lv) in steps {
            let et = est(&|i, j| logq(z, mu, lv, i, j));
            let ej = est(&|i, j| logq(zf.0, zf.1, zf.2, i, j) + logq(z, mu, lv, i, j));
            mi += (-ef) + (-et) - (-ej);
        }
        mi
    }

    #[test]
    fn mi_matches_scalar_loop() {
        let mut rng = crate::rng::seeded(60);
        let m = 7;
        let zf = (
            randu2(m, 3, -1.0, 1.0, &mut rng),
            randu2(m, 3, -1.0, 1.0, &mut rng),
            randu2(m, 3, -0.5, 0.5, &mut rng),
        );
        let steps: Vec<_> = (0..4)
            .map(|_| {
                (
                    randu2(m, 2, -1.0, 1.0, &mut rng),
                    randu2(m, 2, -1.0, 1.0, &mut rng),
                    randu2(m, 2, -0.5, 0.5, &mut rng),
                )
            })
            .collect();
        let got = mi_loss((&zf.0, &zf.1, &zf.2), &steps, 50).unwrap();
        let want = scalar_mi((&zf.0, &zf.1, &zf.2), &steps, 50);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn mi_single_sequence_dataset_collapses_to_zero() {
        let z = arr2(&[[0.4, -0.2]]);
        let mu = arr2(&[[0.1, 0.1]]);
        let lv = arr2(&[[0.0, 0.3]]);
        let got = mi_loss((&z, &mu, &lv), &[(z.clone(), mu.clone(), lv.clone())], 1).unwrap();
        assert!(got.abs() < 1e-9, "factorized density at M=N=1 has zero MI estimate, got {got}");
    }

    #[test]
    fn dependent_latents_score_higher_mi_than_independent() {
        let (m, d, n_data) = (16usize, 4usize, 64usize);
        let mut rng = crate::rng::seeded(61);
        let mut wins = 0;
        let trials = 100;
        for _ in 0..trials {
            let mu = Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.0..1.0));
            let lv = Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.5..-0.5));
            let z = {
                let mut z = mu.clone();
                for ((i, k), v) in z.indexed_iter_mut() {
                    let e: f64 =
                        rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                    *v += (lv[(i, k)] / 2.0f64).exp() * e;
                }
                z
            };
            // Maximally dependent: the dynamic group is the static group.
            let dep = mi_loss((&z, &mu, &lv), &[(z.clone(), mu.clone(), lv.clone())], n_data)
                .unwrap();
            // Independent: a fresh group with its own parameters and noise.
            let mu2 = Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.0..1.0));
            let lv2 = Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.5..-0.5));
            let z2 = {
                let mut z2 = mu2.clone();
                for ((i, k), v) in z2.indexed_iter_mut() {
                    let e: f64 =
                        rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                    *v += (lv2[(i, k)] / 2.0f64).exp() * e;
                }
                z2
            };
            let indep = mi_loss((&z, &mu, &lv), &[(z2, mu2, lv2)], n_data).unwrap();
            if dep > indep {
                wins += 1;
            }
        }
        assert!(wins >= 95, "dependent > independent in only {wins}/{trials} trials");
    }

    // ----- total -----

    #[test]
    fn zero_lambdas_reduce_to_the_elbo() {
        let b = total_loss(10.0, 2.0, 3.0, 0.7, 0.9, 0.1, Lambdas::zero());
        assert_eq!(b.total, 15.0);
        assert_eq!(b.composed_total(), b.total);
    }

    #[test]
    fn default_lambdas_are_echoed_and_scale_linearly() {
        let b = total_loss(1.0, 1.0, 1.0, 0.5, 0.25, 0.125, Lambdas::default());
        assert_eq!((b.lambda_scc, b.lambda_dfp, b.lambda_mi), (1000.0, 100.0, 1.0));
        assert!((b.total - (3.0 + 500.0 + 25.0 + 0.125)).abs() < 1e-12);

        let doubled = total_loss(
            1.0,
            1.0,
            1.0,
            0.5,
            0.25,
            0.125,
            Lambdas { scc: 2000.0, ..Lambdas::default() },
        );
        assert!((doubled.total - b.total - 500.0).abs() < 1e-12, "scc contribution doubles");
    }

    #[test]
    fn non_finite_terms_are_named() {
        let mut b = total_loss(1.0, 1.0, 1.0, 0.0, 0.0, 0.0, Lambdas::default());
        assert_eq!(b.first_non_finite(), None);
        b.kl_dyn = f64::NAN;
        assert_eq!(b.first_non_finite(), Some("kl_dyn"));
    }
}
