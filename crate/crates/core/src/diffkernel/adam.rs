use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use super::tensor::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment state for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Number of updates applied to this tensor (bias-correction clock).
    pub t: u64,
}

/// Adam without weight decay. Frozen parameters are skipped entirely, moments
/// included, so unfreezing later resumes from the same state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub state: Vec<Moments>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            state: store
                .ids()
                .map(|id| Moments {
                    m: vec![0.0; store.tensor(id).len()],
                    v: vec![0.0; store.tensor(id).len()],
                    t: 0,
                })
                .collect(),
        }
    }

    pub fn moments(&self, id: ParamId) -> &Moments {
        &self.state[id.0]
    }

    pub fn moments_mut(&mut self, id: ParamId) -> &mut Moments {
        &mut self.state[id.0]
    }

    pub fn step<T: Real>(&mut self, store: &mut ParamStore, grads: &Gradients<T>, lr: f64) {
        self.step_with(store, grads, |_| lr);
    }

    /// Like [`Adam::step`] with a learning rate chosen per parameter.
    pub fn step_with<T: Real>(&mut self, store: &mut ParamStore, grads: &Gradients<T>, lr_of: impl Fn(ParamId) -> f64) {
        for (id, g) in grads.iter() {
            if !store.is_trainable(*id) {
                continue;
            }
            let lr = lr_of(*id);
            let st = &mut self.state[id.0];
            st.t += 1;
            let bc1 = 1.0 - BETA1.powi(st.t as i32);
            let bc2 = 1.0 - BETA2.powi(st.t as i32);
            let p = store.tensor_mut(*id).data_mut();
            for (k, gk) in g.data().iter().enumerate() {
                let gk = gk.to_f64_lossy();
                let m = BETA1 * st.m[k] as f64 + (1.0 - BETA1) * gk;
                let v = BETA2 * st.v[k] as f64 + (1.0 - BETA2) * gk * gk;
                st.m[k] = m as f32;
                st.v[k] = v as f32;
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + EPSILON);
                p[k] = (p[k] as f64 - update) as f32;
            }
        }
    }
}
