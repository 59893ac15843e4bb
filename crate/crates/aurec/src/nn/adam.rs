//! Adam optimizer over a [`ParamStore`], stepped one parameter group at a
//! time so the three-phase training update can touch disjoint groups.

use ndarray::ArrayD;

use super::params::{ParamId, ParamStore};
use super::scalar::{s, Scalar};
use super::tape::{Gradients, Tape};

pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot<S: Scalar> {
    m: ArrayD<S>,
    v: ArrayD<S>,
    t: u64,
}

/// Exported optimizer state: `(m, v, t)` per parameter slot, `None` where a
/// parameter has never been stepped.
pub type AdamState<S> = Vec<Option<(ArrayD<S>, ArrayD<S>, u64)>>;

/// One moment pair per parameter, allocated lazily. Step counts are kept per
/// parameter because the groups advance at different rates.
pub struct Adam<S: Scalar> {
    pub cfg: AdamConfig,
    slots: Vec<Option<Slot<S>>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Adam {
            cfg,
            slots: (0..n_params).map(|_| None).collect(),
        }
    }

    /// Apply one Adam update to every parameter in `group` that received a
    /// gradient on `tape`. Returns how many parameters moved.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        tape: &Tape<S>,
        grads: &Gradients<S>,
        group: &[ParamId],
    ) -> usize {
        let b1: S = s(self.cfg.beta1);
        let b2: S = s(self.cfg.beta2);
        let eps: S = s(self.cfg.eps);
        let one = S::one();
        let mut moved = 0;
        for &id in group {
            let Some(g) = grads.wrt_param(tape, id) else {
                continue;
            };
            let slot = self.slots[id.index()].get_or_insert_with(|| Slot {
                m: ArrayD::zeros(g.raw_dim()),
                v: ArrayD::zeros(g.raw_dim()),
                t: 0,
            });
            slot.t += 1;
            let t = slot.t as i32;
            let bc1 = one - b1.powi(t);
            let bc2 = one - b2.powi(t);
            let lr_t = s::<S>(self.cfg.lr) * bc2.sqrt() / bc1;
            let value = store.value_mut(id);
            ndarray::Zip::from(value)
                .and(&mut slot.m)
                .and(&mut slot.v)
                .and(g)
                .for_each(|p, m, v, &gv| {
                    *m = b1 * *m + (one - b1) * gv;
                    *v = b2 * *v + (one - b2) * gv * gv;
                    *p -= lr_t * *m / (v.sqrt() + eps);
                });
            moved += 1;
        }
        moved
    }

    /// Serialize optimizer state next to the parameters: (m, v, t) per slot.
    pub fn export_state(&self) -> AdamState<S> {
        self.slots
            .iter()
            .map(|s| s.as_ref().map(|s| (s.m.clone(), s.v.clone(), s.t)))
            .collect()
    }

    pub fn import_state(&mut self, state: AdamState<S>) {
        assert_eq!(state.len(), self.slots.len(), "optimizer state length");
        self.slots = state
            .into_iter()
            .map(|s| s.map(|(m, v, t)| Slot { m, v, t }))
            .collect();
    }
}
