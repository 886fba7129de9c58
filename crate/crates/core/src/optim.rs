//! AdamW with decoupled weight decay and a linear warmup/decay schedule.

use crate::numkit::{ParamGrads, ParamStore, Real};

/// Piecewise-linear learning rate: `0 → peak` over `warmup` steps, then
/// `peak → 0` at step `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    /// Warmup covers `ceil(frac · total)` steps.
    pub fn new(peak: f64, warmup_frac: f64, total: usize) -> Self {
        let warmup = ((warmup_frac * total as f64).ceil() as usize).min(total);
        LinearSchedule { peak, warmup, total }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.peak * step as f64 / self.warmup as f64
        } else if step >= self.total {
            0.0
        } else {
            self.peak * (self.total - step) as f64 / (self.total - self.warmup) as f64
        }
    }
}

/// AdamW state. Moments are kept in f64 whatever the parameter precision.
/// Vectors (biases, layer-norm parameters) are exempt from weight decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    pub fn new<T: Real>(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect(),
            v: store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect(),
            decay: store.iter().map(|(_, _, t)| t.shape().len() >= 2).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let g = grads.get(id).map(|g| g.data());
            let wd = if self.decay[k] { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, p) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j].as_f64());
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut x = p.as_f64();
                x *= 1.0 - lr * wd;
                x -= lr * mhat / (vhat.sqrt() + self.eps);
                *p = T::from_f64(x);
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Real>(grads: &ParamGrads<T>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Tensor;

    #[test]
    fn schedule_endpoints() {
        let s = LinearSchedule::new(1e-3, 0.01, 1000);
        assert_eq!(s.warmup, 10);
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(10), 1e-3);
        assert!((s.lr(5) - 5e-4).abs() < 1e-18);
        assert!(s.lr(999) <= 1e-3 / 990.0 + 1e-18);
        assert_eq!(s.lr(1000), 0.0);
    }

    #[test]
    fn one_step_on_scalar_quadratic() {
        // f(x) = x², x = 3, g = 6. After one step with bias correction,
        // m̂ = 6, v̂ = 36, so x ← 3(1 − lr·wd) − lr·6/(6 + eps).
        let mut store: ParamStore = ParamStore::new();
        let id = store.add("x", Tensor::from_f64(vec![1, 1], &[3.0]).unwrap());
        let mut grads = ParamGrads::new(1);
        grads.accumulate(id, &Tensor::from_f64(vec![1, 1], &[6.0]).unwrap(), 1.0);
        let mut opt = AdamW::new(&store, 0.9, 0.999, 1e-8, 0.01);
        opt.step(&mut store, &grads, 0.1);
        let want = 3.0 * (1.0 - 0.1 * 0.01) - 0.1 * 6.0 / (6.0 + 1e-8);
        assert!((store.get(id).item() - want).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut store: ParamStore = ParamStore::new();
        let id = store.add("w", Tensor::from_f64(vec![2, 2], &[1.0, -2.0, 0.5, 4.0]).unwrap());
        let before = store.get(id).clone();
        let mut grads = ParamGrads::new(1);
        grads.accumulate(id, &Tensor::full(vec![2, 2], 1.0), 1.0);
        let mut opt = AdamW::new(&store, 0.9, 0.999, 1e-8, 0.01);
        for _ in 0..3 {
            opt.step(&mut store, &grads, 0.0);
        }
        assert_eq!(store.get(id), &before);
    }
}
