//! Adam with bias correction and decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore, Trainable};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

/// Learning rate and decay for each parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    groups: BTreeMap<ParamGroup, GroupHyper>,
}

impl Hyper {
    /// Same lr for every group, no decay.
    pub fn uniform(lr: f64) -> Self {
        Self::default().with_all(GroupHyper { lr, weight_decay: 0.0 })
    }

    pub fn with_all(mut self, h: GroupHyper) -> Self {
        for tag in 0..6 {
            self.groups.insert(ParamGroup::from_tag(tag).expect("valid tag"), h);
        }
        self
    }

    pub fn with(mut self, group: ParamGroup, h: GroupHyper) -> Self {
        self.groups.insert(group, h);
        self
    }

    pub fn group(&self, group: ParamGroup) -> GroupHyper {
        self.groups[&group]
    }
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            groups: BTreeMap::new(),
        }
        .with_all(GroupHyper {
            lr: 1e-4,
            weight_decay: 0.0,
        })
    }
}

/// Moment buffers exist only for the trainable set; frozen parameters are
/// never visited.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub hyper: Hyper,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(store: &ParamStore, trainable: &Trainable, hyper: Hyper) -> Self {
        let moments = trainable
            .names(store)
            .into_iter()
            .map(|n| {
                let len = store.value(n).expect("listed by store").numel();
                (n.clone(), (vec![0.0; len], vec![0.0; len]))
            })
            .collect();
        Self {
            hyper,
            step: 0,
            moments,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn tracked(&self) -> impl Iterator<Item = &String> {
        self.moments.keys()
    }

    /// Applies one update. Tracked parameters without a gradient entry
    /// see a zero gradient; gradients for untracked names are an error.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        if let Some(name) = grads.keys().find(|n| !self.moments.contains_key(*n)) {
            return Err(Error::Param(format!("gradient for untracked parameter `{name}`")));
        }
        for (name, g) in grads {
            let shape = store.value(name)?.shape();
            if g.shape() != shape {
                return Err(Error::shape("adam_step", g.shape(), shape));
            }
        }
        self.step += 1;
        let h = &self.hyper;
        let c1 = 1.0 - h.beta1.powi(self.step as i32);
        let c2 = 1.0 - h.beta2.powi(self.step as i32);
        for (name, (m, v)) in self.moments.iter_mut() {
            let group = store.get(name)?.group;
            let GroupHyper { lr, weight_decay } = h.group(group);
            let grad = grads.get(name).map(|t| t.data());
            let w = store.value_mut(name)?.data_mut();
            for i in 0..w.len() {
                let gi = grad.map_or(0.0, |g| g[i]);
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
                let upd = (m[i] / c1) / ((v[i] / c2).sqrt() + h.eps);
                w[i] = w[i] * (1.0 - lr * weight_decay) - lr * upd;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(w: f64, group: ParamGroup) -> ParamStore {
        let mut s = ParamStore::new();
        s.init_const("w", &[1], w, group).unwrap();
        s
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor> {
        [("w".to_string(), Tensor::full(&[1], v))].into()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = one(1.0, ParamGroup::Backbone);
        let mut a = AdamState::new(&s, &Trainable::Everything, Hyper::uniform(1e-5));
        // f(w) = w²/2 has gradient w.
        a.step(&mut s, &grad(1.0)).unwrap();
        let w = s.value("w").unwrap().item();
        let expect = 1.0 - 1e-5 * 1.0 / (1.0 + 1e-8);
        assert!((w - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_and_decay() {
        let mut s = one(2.0, ParamGroup::CrossAttention);
        let mut a = AdamState::new(&s, &Trainable::Everything, Hyper::uniform(1e-3));
        a.step(&mut s, &grad(0.0)).unwrap();
        assert_eq!(s.value("w").unwrap().item(), 2.0);

        let h = Hyper::uniform(1e-3).with(
            ParamGroup::CrossAttention,
            GroupHyper {
                lr: 1e-3,
                weight_decay: 1e-4,
            },
        );
        let mut a = AdamState::new(&s, &Trainable::Everything, h);
        let mut w = 2.0;
        for _ in 0..3 {
            a.step(&mut s, &grad(0.0)).unwrap();
            w *= 1.0 - 1e-3 * 1e-4;
            assert_eq!(s.value("w").unwrap().item(), w);
        }
    }

    #[test]
    fn frozen_names_have_no_state() {
        let mut s = one(1.0, ParamGroup::Backbone);
        s.init_const("v", &[2], 1.0, ParamGroup::Backbone).unwrap();
        let t = Trainable::Only(["w".to_string()].into());
        let mut a = AdamState::new(&s, &t, Hyper::uniform(0.1));
        assert_eq!(a.tracked().count(), 1);
        let bad: BTreeMap<_, _> = [("v".to_string(), Tensor::full(&[2], 1.0))].into();
        assert!(a.step(&mut s, &bad).is_err());
        let wrong_shape: BTreeMap<_, _> = [("w".to_string(), Tensor::full(&[2], 1.0))].into();
        assert!(a.step(&mut s, &wrong_shape).is_err());
        assert_eq!(a.steps_taken(), 0);
    }
}
