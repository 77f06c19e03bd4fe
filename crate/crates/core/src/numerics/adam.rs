use super::{ParamGrads, ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Frozen slots are never touched.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.slots().iter().map(|s| vec![T::zero(); s.data.len()]).collect();
        Self { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let lr = T::lit(self.cfg.lr);
        let eps = T::lit(self.cfg.eps);
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        for i in 0..store.len() {
            let slot = store.slot_mut(i);
            if slot.frozen {
                continue;
            }
            let Some(g) = grads.get(i) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &gi), mi), vi) in slot.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Plain gradient step `θ ← θ - lr·g` on unfrozen slots.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) {
    let lr = T::lit(lr);
    for i in 0..store.len() {
        let slot = store.slot_mut(i);
        if slot.frozen {
            continue;
        }
        if let Some(g) = grads.get(i) {
            for (p, &gi) in slot.data.iter_mut().zip(g) {
                *p = *p - lr * gi;
            }
        }
    }
}
