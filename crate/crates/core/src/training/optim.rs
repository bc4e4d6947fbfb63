use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Container, Gradients, ParameterStore, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Scales `grads` so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Adam or plain SGD over every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &ParameterStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        let second = if kind == OptimizerKind::Adam { zeros.clone() } else { Vec::new() };
        let first = if kind == OptimizerKind::Adam { zeros } else { Vec::new() };
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first,
            second,
        }
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn apply(&mut self, params: &mut ParameterStore, grads: &Gradients) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dim("gradient count does not match the parameter store"));
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient contains NaN or infinity".into()));
        }
        self.step += 1;
        let lr = self.learning_rate;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let w = params.value_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (wi, gi) in w.iter_mut().zip(g) {
                        *wi -= lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (self.beta1, self.beta2);
                    let c1 = 1.0 - b1.powi(self.step as i32);
                    let c2 = 1.0 - b2.powi(self.step as i32);
                    let (m, v) = (&mut self.first[id.0], &mut self.second[id.0]);
                    for k in 0..w.len() {
                        m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                        v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        w[k] -= lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment estimates under `adam.m:` / `adam.v:` and scalars in metadata.
    pub fn write_to(&self, c: &mut Container, params: &ParameterStore) -> Result<()> {
        c.set_meta("optimizer", serde_json::json!({
            "kind": self.kind,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
        }))?;
        if self.kind == OptimizerKind::Adam {
            for (id, p) in params.iter() {
                c.push(format!("adam.m:{}", p.name), Tensor::new(p.value.shape().to_vec(), self.first[id.0].clone())?);
                c.push(format!("adam.v:{}", p.name), Tensor::new(p.value.shape().to_vec(), self.second[id.0].clone())?);
            }
        }
        Ok(())
    }

    pub fn read_from(c: &Container, params: &ParameterStore) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            kind: OptimizerKind,
            learning_rate: f64,
            beta1: f64,
            beta2: f64,
            eps: f64,
            step: u64,
        }
        let m: Meta = c.meta("optimizer")?;
        let mut opt = Self::new(m.kind, m.learning_rate, params);
        opt.beta1 = m.beta1;
        opt.beta2 = m.beta2;
        opt.eps = m.eps;
        opt.step = m.step;
        if m.kind == OptimizerKind::Adam {
            for (id, p) in params.iter() {
                for (prefix, slot) in [("adam.m", &mut opt.first[id.0]), ("adam.v", &mut opt.second[id.0])] {
                    let t = c
                        .get(&format!("{prefix}:{}", p.name))
                        .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {prefix} for {}", p.name)))?;
                    if t.len() != slot.len() {
                        return Err(Error::Checkpoint(format!("{prefix} for {} has the wrong size", p.name)));
                    }
                    slot.copy_from_slice(t.data());
                }
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn store(values: &[f64]) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::row_vector(values.to_vec())).unwrap();
        s.insert("b", Tensor::row_vector(vec![0.5])).unwrap();
        s
    }

    fn grads(s: &ParameterStore, a: &[f64], b: f64) -> Gradients {
        let mut g = Gradients::empty(s.len());
        g.set(s.id("a").unwrap(), a.to_vec());
        g.set(s.id("b").unwrap(), vec![b]);
        g
    }

    #[test]
    fn clipping_scales_to_bound() {
        let s = store(&[0.0, 0.0]);
        let mut g = grads(&s, &[3.0, 0.0], 4.0);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        let mut small = grads(&s, &[0.3, 0.0], 0.4);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small.get(s.id("b").unwrap()).unwrap(), &[0.4]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut s = store(&[1.0, -1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, &s);
        let g = grads(&s, &[2.0, -0.5], 1e-3);
        opt.apply(&mut s, &g).unwrap();
        let a = s.get("a").unwrap().value.data();
        assert!((a[0] - 0.99).abs() < 1e-9 && (a[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_is_inert() {
        let mut s = store(&[1.0, 2.0]);
        let before = s.clone();
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut opt = Optimizer::new(kind, 0.0, &s);
            for _ in 0..5 {
                let g = grads(&s, &[1.0, -3.0], 2.0);
                opt.apply(&mut s, &g).unwrap();
            }
        }
        assert_eq!(s, before);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut s = store(&[1.0, 2.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &s);
        let g = grads(&s, &[f64::NAN, 0.0], 0.0);
        assert!(opt.apply(&mut s, &g).is_err());
    }

    #[test]
    fn state_roundtrip() {
        let mut s = store(&[1.0, 2.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, &s);
        let g = grads(&s, &[1.0, -3.0], 2.0);
        opt.apply(&mut s, &g).unwrap();
        let mut c = Container::new();
        opt.write_to(&mut c, &s).unwrap();
        let c = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(Optimizer::read_from(&c, &s).unwrap(), opt);
    }

    proptest! {
        // SGD after clipping at G: |Δw| ≤ lr·‖g‖ ≤ lr·G for every element.
        #[test]
        fn clipped_sgd_step_is_bounded(
            g in proptest::collection::vec(-50.0f64..50.0, 3),
            lr in 1e-4f64..1.0,
            bound in 0.1f64..5.0,
        ) {
            let mut s = store(&[0.1, 0.2]);
            let before = s.clone();
            let mut gr = grads(&s, &g[..2], g[2]);
            clip_global_norm(&mut gr, bound);
            let mut opt = Optimizer::new(OptimizerKind::Sgd, lr, &s);
            opt.apply(&mut s, &gr).unwrap();
            for ((_, p), (_, q)) in s.iter().zip(before.iter()) {
                for (a, b) in p.value.data().iter().zip(q.value.data()) {
                    prop_assert!((a - b).abs() <= lr * bound * (1.0 + 1e-12));
                }
            }
        }

        // Adam's first step has |Δw| = lr·|g|/(|g| + eps) < lr ≤ lr·G for G ≥ 1.
        #[test]
        fn clipped_adam_first_step_is_bounded(
            g in proptest::collection::vec(-50.0f64..50.0, 3),
            lr in 1e-4f64..1.0,
        ) {
            let mut s = store(&[0.1, 0.2]);
            let before = s.clone();
            let mut gr = grads(&s, &g[..2], g[2]);
            clip_global_norm(&mut gr, 1.0);
            let mut opt = Optimizer::new(OptimizerKind::Adam, lr, &s);
            opt.apply(&mut s, &gr).unwrap();
            for ((_, p), (_, q)) in s.iter().zip(before.iter()) {
                for (a, b) in p.value.data().iter().zip(q.value.data()) {
                    prop_assert!((a - b).abs() <= lr * (1.0 + 1e-12));
                }
            }
        }
    }
}
