use crate::tensor::{ParamStore, Real};

/// Adam with bias correction, one moment pair per stored parameter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies the accumulated gradients and clears them. Parameters without
    /// a gradient keep their moments and values.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let c1 = T::lit(1.0 / (1.0 - self.beta1.powi(t)));
        let c2 = T::lit(1.0 / (1.0 - self.beta2.powi(t)));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (i, (_, tensor)) in store.iter_mut().enumerate() {
            let Some(g) = tensor.grad.take() else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let mh = m[j] * c1;
                let vh = v[j] * c2;
                *p = *p - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let mut adam = Adam::new(&store, 0.1);
        store.get_mut(id).accumulate_grad(&[2.0, -0.5, 1e-3]);
        adam.step(&mut store);
        let got = store.get(id).data();
        for (g, e) in got.iter().zip([0.9, -1.9, 0.4]) {
            assert!((g - e).abs() < 1e-4, "{got:?}");
        }
        assert!(store.get(id).grad.is_none());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("x", Tensor::new(&[2], vec![3.0, -4.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&store, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = store.get(id).data().iter().map(|x| 2.0 * (x - 1.0)).collect();
            store.get_mut(id).accumulate_grad(&g);
            adam.step(&mut store);
        }
        assert!(store.get(id).data().iter().all(|x| (x - 1.0).abs() < 1e-3));
    }
}
