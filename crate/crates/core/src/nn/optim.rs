use super::params::{ParamId, ParamStore};
use super::tape::{Grads, Mat};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Mat> = store
            .ids()
            .map(|id| Mat::zeros(store.value(id).dim()))
            .collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `store` that has a gradient.
    /// Parameters without one still decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.value_mut(id);
            if self.weight_decay > 0.0 {
                let k = 1.0 - lr * self.weight_decay;
                p.mapv_inplace(|x| x * k);
            }
            let Some(g) = grads.get(id) else { continue };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            self.m[i].zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            self.v[i].zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            ndarray::Zip::from(p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Mat::from_elem((1, 2), 3.0));
        let mut opt = AdamW::new(&store, 0.0);
        for _ in 0..2000 {
            let mut t = Tape::new();
            let v = t.param(&store, x);
            let sq = t.mul(v, v);
            let ones = t.constant(Mat::ones((2, 1)));
            let loss = t.matmul(sq, ones);
            let g = t.backward(loss, store.len());
            opt.step(&mut store, &g, 0.01);
        }
        assert!(store.value(x).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let x = store.add("x", Mat::from_elem((1, 1), 1.0));
        let mut opt = AdamW::new(&store, 0.0);
        let mut grads = Grads::empty(1);
        let mut other = Grads::empty(1);
        let mut t = Tape::new();
        let v = t.param(&store, x);
        let l = t.scale(v, 4.0);
        other.accumulate(&t.backward(l, 1), 1.0);
        grads.accumulate(&other, 1.0);
        opt.step(&mut store, &grads, 0.1);
        assert!((store.value(x)[[0, 0]] - 0.9).abs() < 1e-6);
    }
}
