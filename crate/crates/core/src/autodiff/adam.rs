use super::params::{GradEntry, Gradients, ParamStore};
use super::tensor::Tensor;
use crate::error::{NmaError, Result};

/// Bias-corrected Adam over every tensor in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to entries that received a gradient
    /// this step (touched rows for sparse embedding gradients).
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters absent from `grads` see a zero gradient
    /// (their moments still decay). Rejects NaN/Inf gradients before touching
    /// any parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if let Some(bad) = grads.first_non_finite() {
            return Err(NmaError::NanGradient(store.name(bad).to_string()));
        }
        while self.first.len() < store.len() {
            let t = store.get(super::ParamId(self.first.len()));
            self.first.push(Tensor::zeros(t.rows(), t.cols()));
            self.second.push(Tensor::zeros(t.rows(), t.cols()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);

        for id in store.ids().collect::<Vec<_>>() {
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let p = store.get_mut(id).data_mut();
            let update = |i: usize, g: f64, decay: f64, m: &mut [f64], v: &mut [f64], p: &mut [f64]| {
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * (mh / (vh.sqrt() + eps) + decay * p[i]);
            };
            match grads.get(id) {
                Some(GradEntry::Dense(g)) => {
                    for (i, &gi) in g.data().iter().enumerate() {
                        update(i, gi, wd, m, v, p);
                    }
                }
                Some(entry @ GradEntry::Rows { shape, rows }) => {
                    let cols = shape[1];
                    for i in 0..p.len() {
                        let decay = if rows.contains_key(&(i / cols)) { wd } else { 0.0 };
                        update(i, entry.at_flat(i), decay, m, v, p);
                    }
                }
                None => {
                    for i in 0..p.len() {
                        if m[i] != 0.0 || v[i] != 0.0 {
                            update(i, 0.0, 0.0, m, v, p);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(value));
        s
    }

    fn grad(store: &ParamStore, g: f64) -> Gradients {
        let mut gr = Gradients::new();
        gr.add_dense(store.id("w").unwrap(), &Tensor::scalar(g));
        gr
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = single(0.7);
        let mut adam = AdamState::new(&s, 1e-3);
        let g = grad(&s, 0.0);
        for _ in 0..10 {
            adam.step(&mut s, &g).unwrap();
        }
        assert_eq!(s.get(s.id("w").unwrap()).item(), 0.7);
        assert_eq!(adam.step_count(), 10);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        // t=1: m̂ = g, v̂ = g², update = lr·g/(|g|+eps)
        for g in [3.0, -0.02] {
            let mut s = single(1.0);
            let mut adam = AdamState::new(&s, 1e-3);
            let gr = grad(&s, g);
            adam.step(&mut s, &gr).unwrap();
            let expected = 1.0 - 1e-3 * g / (g.abs() + 1e-8);
            let got = s.get(s.id("w").unwrap()).item();
            assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        }
    }

    #[test]
    fn decay_touches_only_rows_with_gradient() {
        let mut s = ParamStore::new();
        let id = s.insert("e", Tensor::column(vec![1.0, 1.0]));
        let mut adam = AdamState::new(&s, 0.1);
        adam.weight_decay = 0.5;
        let mut gr = Gradients::new();
        gr.add_row(id, [2, 1], 0, &[0.0]);
        adam.step(&mut s, &gr).unwrap();
        assert!((s.get(id).at(0, 0) - 0.95).abs() < 1e-12);
        assert_eq!(s.get(id).at(1, 0), 1.0);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        let mut s = single(0.0);
        let mut adam = AdamState::new(&s, 1e-3);
        let g = grad(&s, 0.5);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..5000 {
            adam.step(&mut s, &g).unwrap();
            let now = s.get(s.id("w").unwrap()).item();
            last_step = now - prev;
            prev = now;
        }
        assert!((last_step + 1e-3).abs() < 1e-8, "{last_step}");
    }

    #[test]
    fn nan_gradient_is_rejected_with_name() {
        let mut s = single(1.0);
        let mut adam = AdamState::new(&s, 1e-3);
        let gr = grad(&s, f64::NAN);
        let err = adam.step(&mut s, &gr).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.get(s.id("w").unwrap()).item(), 1.0);
    }
}
