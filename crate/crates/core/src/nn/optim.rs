use super::{ParamId, ParamStore, Tensor};

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub(crate) step: u64,
    pub(crate) m: Vec<Tensor>,
    pub(crate) v: Vec<Tensor>,
}

impl AdamW {
    pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter at learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step_with(store, |_, _| lr);
    }

    /// One update with a per-parameter learning rate (parameter groups).
    pub fn step_with(&mut self, store: &mut ParamStore, lr_of: impl Fn(ParamId, &str) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let lr = lr_of(id, &store.get(id).name);
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for k in 0..values.len() {
                let gk = grads[k];
                let mk = &mut m.data_mut()[k];
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                let m_hat = *mk / bc1;
                let v_hat = *vk / bc2;
                values[k] -= lr * self.weight_decay * values[k];
                values[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
