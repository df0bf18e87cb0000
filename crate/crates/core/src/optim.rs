//! Adam optimizer with bias correction.

use crate::graph::Element;
use crate::nn::{ParamId, ParamStore};
use ndarray::ArrayD;

pub struct Adam<E: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    ids: Vec<ParamId>,
    m: Vec<ArrayD<E>>,
    v: Vec<ArrayD<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(store: &ParamStore<E>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let ids = store.trainable_ids();
        let m = ids.iter().map(|&id| ArrayD::zeros(store.value(id).raw_dim())).collect();
        let v = ids.iter().map(|&id| ArrayD::zeros(store.value(id).raw_dim())).collect();
        Adam { lr, beta1, beta2, eps: 1e-8, step: 0, ids, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` must be aligned with the store's
    /// trainable parameters (as produced by `Bound::grads`); a `None`
    /// gradient is treated as zero.
    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &[(ParamId, Option<ArrayD<E>>)]) {
        assert_eq!(grads.len(), self.ids.len(), "gradient list misaligned");
        self.step += 1;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one = E::one();
        let bc1 = E::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = E::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = E::from_f64(self.lr);
        let eps = E::from_f64(self.eps);
        for (slot, (id, grad)) in grads.iter().enumerate() {
            debug_assert_eq!(*id, self.ids[slot]);
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            match grad {
                Some(gr) => {
                    ndarray::Zip::from(&mut *m).and(gr).for_each(|mm, &g| {
                        *mm = b1 * *mm + (one - b1) * g;
                    });
                    ndarray::Zip::from(&mut *v).and(gr).for_each(|vv, &g| {
                        *vv = b2 * *vv + (one - b2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|mm| b1 * mm);
                    v.mapv_inplace(|vv| b2 * vv);
                }
            }
            let p = store.value_mut(*id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pp, &mm, &vv| {
                let mhat = mm / bc1;
                let vhat = vv / bc2;
                *pp = *pp - lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }

    /// Serializable pieces of the optimizer state, keyed by parameter name.
    pub fn state_arrays<'a>(
        &'a self,
        store: &'a ParamStore<E>,
    ) -> impl Iterator<Item = (String, &'a ArrayD<E>, &'a ArrayD<E>)> + 'a {
        self.ids
            .iter()
            .enumerate()
            .map(move |(i, &id)| (store.name(id).to_string(), &self.m[i], &self.v[i]))
    }

    pub fn restore_state(
        &mut self,
        store: &ParamStore<E>,
        step: u64,
        mut lookup: impl FnMut(&str) -> Option<(ArrayD<E>, ArrayD<E>)>,
    ) -> crate::Result<()> {
        self.step = step;
        for (i, &id) in self.ids.iter().enumerate() {
            let name = store.name(id);
            let (m, v) = lookup(name).ok_or_else(|| {
                crate::Error::Format(format!("missing optimizer state for {name}"))
            })?;
            if m.shape() != self.m[i].shape() || v.shape() != self.v[i].shape() {
                return Err(crate::Error::Format(format!(
                    "optimizer state shape mismatch for {name}"
                )));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, IxDyn};

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.add("x", arr1(&[5.0, -3.0]).into_dyn(), true);
        let mut opt = Adam::new(&store, 0.1, 0.9, 0.999);
        for _ in 0..500 {
            let g = store.value(id).mapv(|x| 2.0 * x);
            opt.step(&mut store, &[(id, Some(g))]);
        }
        let x = store.value(id);
        assert!(x[IxDyn(&[0])].abs() < 1e-3 && x[IxDyn(&[1])].abs() < 1e-3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr * sign(g).
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.add("x", arr1(&[1.0]).into_dyn(), true);
        let mut opt = Adam::new(&store, 0.05, 0.9, 0.999);
        opt.step(&mut store, &[(id, Some(arr1(&[3.7]).into_dyn()))]);
        let x = store.value(id)[IxDyn(&[0])];
        assert!((x - (1.0 - 0.05)).abs() < 1e-6, "{x}");
    }
}
