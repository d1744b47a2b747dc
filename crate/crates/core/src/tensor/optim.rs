//! Adam with bias correction, plus global-norm gradient clipping.

use ndarray::ArrayD;

use super::{ParamId, ParamStore, Real};

/// Gradient accumulator aligned with a [`ParamStore`]. Parameters that
/// never receive a gradient stay `None`, which the optimizer treats as
/// zero (no update).
#[derive(Debug)]
pub struct GradBuffer<T: Real> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> GradBuffer<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &ArrayD<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += grad,
            slot => *slot = Some(grad.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ArrayD<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut ArrayD<T>> {
        self.grads.iter_mut().filter_map(|g| g.as_mut())
    }
}

/// Scale all gradients so their joint Euclidean norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(buf: &mut GradBuffer<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, g) in buf.iter() {
        sq += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for g in buf.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment state; `step` counts applied updates.
pub struct AdamState<T: Real> {
    cfg: AdamConfig,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| ArrayD::zeros(p.value.raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self { cfg, m, v, step: 0 }
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Only parameters with a gradient move.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradBuffer<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let c1 = T::from_f64(1.0 - self.cfg.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.cfg.beta2.powi(t));
        let lr = T::from_f64(lr);

        for (id, g) in grads.iter() {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| {
                *mi = b1 * *mi + (T::one() - b1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| {
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            });
            let value = store.value_mut(id);
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mi, &vi| {
                    let mhat = mi / c1;
                    let vhat = vi / c2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, IxDyn};

    fn scalar_store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store
            .register("p", ArrayD::from_elem(IxDyn(&[1]), v))
            .unwrap();
        (store, id)
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // Hand-computed: m1 = 0.1 g, v1 = 0.001 g^2, corrected back to g
        // and g^2, so the update is lr * g / (|g| + eps) ~ lr * sign(g).
        let (mut store, id) = scalar_store(1.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut grads = GradBuffer::new(&store);
        grads.accumulate(id, &ArrayD::from_elem(IxDyn(&[1]), 0.5));
        adam.step(&mut store, &grads, 0.01);
        let moved = 1.0 - store.get(id).value[[0]];
        assert!((moved - 0.01).abs() < 1e-6, "moved {moved}");

        // Second constant-gradient step: still about -lr after bias
        // correction (hand-checked: mhat = g, vhat = g^2 exactly for a
        // constant gradient).
        let mut grads = GradBuffer::new(&store);
        grads.accumulate(id, &ArrayD::from_elem(IxDyn(&[1]), 0.5));
        adam.step(&mut store, &grads, 0.01);
        let moved2 = (1.0 - 0.01) - store.get(id).value[[0]];
        assert!((moved2 - 0.01).abs() < 1e-6, "moved {moved2}");
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let (mut store, id) = scalar_store(2.5);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let grads = GradBuffer::new(&store);
        adam.step(&mut store, &grads, 0.1);
        assert_eq!(store.get(id).value[[0]], 2.5);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let (mut store, id) = scalar_store(1.0);
            let mut adam = AdamState::new(&store, AdamConfig::default());
            for k in 0..20 {
                let mut grads = GradBuffer::new(&store);
                let g = 0.3 + 0.01 * k as f64;
                grads.accumulate(id, &ArrayD::from_elem(IxDyn(&[1]), g));
                adam.step(&mut store, &grads, 0.005);
            }
            store.get(id).value[[0]]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn global_norm_clip_scales_gradients() {
        let mut store = ParamStore::<f64>::new();
        let a = store.register("a", arr1(&[3.0, 0.0]).into_dyn()).unwrap();
        let b = store.register("b", arr1(&[0.0, 4.0]).into_dyn()).unwrap();
        let mut grads = GradBuffer::new(&store);
        grads.accumulate(a, &arr1(&[3.0, 0.0]).into_dyn());
        grads.accumulate(b, &arr1(&[0.0, 4.0]).into_dyn());
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let ga = grads.get(a).unwrap();
        assert!((ga[[0]] - 0.6).abs() < 1e-12);
    }
}
