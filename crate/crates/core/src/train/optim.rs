use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::model::OptimSnapshot;
use crate::tensor::{Real, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    /// Zero moments for every trainable parameter of `store`.
    pub fn new(store: &ParamStore<T>) -> Self {
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable()).map(|(id, _)| id).collect();
        let zeros = |id: &ParamId| vec![T::zero(); store.get(*id).value().numel()];
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter from its accumulated gradient.
    pub fn apply(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            let (value, grad) = store.get_mut(id).value_and_grad_mut();
            for (((p, g), m), v) in value.iter_mut().zip(grad).zip(&mut self.m[k]).zip(&mut self.v[k]) {
                let g = g.f64();
                let mn = b1 * m.f64() + (1.0 - b1) * g;
                let vn = b2 * v.f64() + (1.0 - b2) * g * g;
                *m = T::of(mn);
                *v = T::of(vn);
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *p = T::of(p.f64() - update);
            }
        }
    }

    /// Moments named `adam.m.<param>` / `adam.v.<param>`.
    pub fn snapshot(&self, store: &ParamStore<T>) -> OptimSnapshot {
        let mut moments = Vec::with_capacity(2 * self.ids.len());
        for (tag, all) in [("m", &self.m), ("v", &self.v)] {
            for (k, &id) in self.ids.iter().enumerate() {
                let p = store.get(id);
                let t = Tensor::from_vec(p.shape(), all[k].clone()).expect("moment matches parameter");
                moments.push((format!("adam.{tag}.{}", p.name()), t.cast()));
            }
        }
        OptimSnapshot { step: self.step, moments }
    }

    pub fn restore(store: &ParamStore<T>, snap: &OptimSnapshot) -> Result<Self> {
        let mut adam = Adam::new(store);
        let n = adam.ids.len();
        if snap.moments.len() != 2 * n {
            return Err(Error::ParamMismatch {
                name: "adam".into(),
                detail: format!("{} moment tensors for {n} parameters", snap.moments.len()),
            });
        }
        for (j, (name, t)) in snap.moments.iter().enumerate() {
            let (tag, k) = if j < n { ("m", j) } else { ("v", j - n) };
            let p = store.get(adam.ids[k]);
            let expected = format!("adam.{tag}.{}", p.name());
            if *name != expected || t.shape() != p.shape() {
                return Err(Error::ParamMismatch {
                    name: expected,
                    detail: format!("checkpoint holds `{name}` with shape {}", t.shape()),
                });
            }
            let data = t.data().iter().map(|v| T::of(*v as f64)).collect();
            if tag == "m" {
                adam.m[k] = data;
            } else {
                adam.v[k] = data;
            }
        }
        adam.step = snap.step;
        Ok(adam)
    }
}

/// Cosine annealing from `lr_start` to `lr_end` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(lr_start: f64, lr_end: f64, total_steps: u64) -> Self {
        LrSchedule {
            lr_start,
            lr_end,
            total_steps,
        }
    }

    /// Steps past the end stay at `lr_end`.
    pub fn lr(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return self.lr_end;
        }
        let t = step as f64 / self.total_steps as f64;
        self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn store(values: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let t = Tensor::from_vec(Shape4::new(1, 1, 1, values.len()).unwrap(), values.to_vec()).unwrap();
        let id = s.insert("w", t, true).unwrap();
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store(&[1.0, -2.0, 0.5]);
        s.get_mut(id)
            .accumulate_grad(&Tensor::from_vec(Shape4::new(1, 1, 1, 3).unwrap(), vec![3.0, -0.01, 40.0]).unwrap())
            .unwrap();
        let mut adam = Adam::new(&s);
        adam.apply(&mut s, 0.1);
        let v = s.get(id).value().data().to_vec();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-5 && (v[2] - 0.4).abs() < 1e-6);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = store(&[1.0, 2.0]);
        let before = s.get(id).value().clone();
        let mut adam = Adam::new(&s);
        adam.apply(&mut s, 0.1);
        assert_eq!(s.get(id).value(), &before);
    }

    #[test]
    fn snapshot_round_trip() {
        let (mut s, id) = store(&[1.0, 2.0]);
        s.get_mut(id).accumulate_grad(&Tensor::full(Shape4::new(1, 1, 1, 2).unwrap(), 0.5)).unwrap();
        let mut adam = Adam::new(&s);
        adam.apply(&mut s, 0.01);
        let snap = adam.snapshot(&s);
        let back = Adam::restore(&s, &snap).unwrap();
        assert_eq!(back.snapshot(&s), snap);
        let mut short = snap.clone();
        short.moments.pop();
        assert!(Adam::restore(&s, &short).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(2e-4, 1e-7, 1000);
        assert_eq!(s.lr(0), 2e-4);
        assert_eq!(s.lr(1000), 1e-7);
        assert_eq!(s.lr(5000), 1e-7);
        assert!((s.lr(500) - (2e-4 + 1e-7) / 2.0).abs() < 1e-15);
    }
}
