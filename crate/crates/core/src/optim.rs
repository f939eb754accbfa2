//! Adam with per-group learning rates and L2 weight decay folded into the
//! gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    step: u64,
    m: Tensor,
    v: Tensor,
}

/// Serializable optimizer state keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub lrs: BTreeMap<ParamGroup, f64>,
    pub steps: BTreeMap<String, u64>,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    hyper: AdamHyper,
    lrs: BTreeMap<ParamGroup, f64>,
    slots: Vec<Option<Slot>>,
}

impl Adam {
    pub fn new(store: &ParamStore, hyper: AdamHyper, lrs: BTreeMap<ParamGroup, f64>) -> Result<Self> {
        for group in store.partition()?.keys() {
            if !lrs.contains_key(group) {
                return Err(Error::Config(format!("no learning rate for parameter group {group:?}")));
            }
        }
        Ok(Self {
            hyper,
            lrs,
            slots: vec![None; store.len()],
        })
    }

    pub fn hyper(&self) -> AdamHyper {
        self.hyper
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        self.lrs[&group]
    }

    pub fn set_lr(&mut self, group: ParamGroup, lr: f64) {
        self.lrs.insert(group, lr);
    }

    /// Updates every parameter that received a gradient; the rest, moments
    /// included, are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let AdamHyper {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hyper;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(grad) = grads.get(id) else { continue };
            let lr = self.lrs[&store.get(id).group];
            let slot = self.slots[id.index()].get_or_insert_with(|| Slot {
                step: 0,
                m: Tensor::zeros(grad.shape()),
                v: Tensor::zeros(grad.shape()),
            });
            slot.step += 1;
            let bc1 = 1.0 - beta1.powi(slot.step as i32);
            let bc2 = 1.0 - beta2.powi(slot.step as i32);
            let step_size = lr / bc1;
            let bc2_sqrt = bc2.sqrt();
            let p = store.value_mut(id).data_mut();
            let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
            for i in 0..p.len() {
                let g = grad.data()[i] + weight_decay * p[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                p[i] -= step_size * m[i] / denom;
            }
        }
    }

    pub fn state(&self, store: &ParamStore) -> AdamState {
        let mut s = AdamState {
            lrs: self.lrs.clone(),
            ..AdamState::default()
        };
        for (p, slot) in store.params().iter().zip(&self.slots) {
            if let Some(slot) = slot {
                s.steps.insert(p.name.clone(), slot.step);
                s.m.insert(p.name.clone(), slot.m.clone());
                s.v.insert(p.name.clone(), slot.v.clone());
            }
        }
        s
    }

    pub fn from_state(store: &ParamStore, hyper: AdamHyper, state: &AdamState) -> Result<Self> {
        let mut adam = Self::new(store, hyper, state.lrs.clone())?;
        let known: std::collections::BTreeSet<&str> = store.params().iter().map(|p| p.name.as_str()).collect();
        if let Some(stray) = state.steps.keys().find(|n| !known.contains(n.as_str())) {
            return Err(Error::Config(format!("optimizer state for unknown parameter {stray}")));
        }
        for (i, p) in store.params().iter().enumerate() {
            let Some(&step) = state.steps.get(&p.name) else { continue };
            let (m, v) = match (state.m.get(&p.name), state.v.get(&p.name)) {
                (Some(m), Some(v)) if m.shape() == p.value.shape() && v.shape() == p.value.shape() => (m.clone(), v.clone()),
                _ => return Err(Error::Config(format!("optimizer moments of {} missing or misshapen", p.name))),
            };
            adam.slots[i] = Some(Slot { step, m, v });
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::losses::Reduction;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add_param("a", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), ParamGroup::Mse);
        s.add_param("b", Tensor::new(vec![1], vec![0.5]).unwrap(), ParamGroup::Reid);
        s
    }

    fn lrs(mse: f64, reid: f64) -> BTreeMap<ParamGroup, f64> {
        BTreeMap::from([(ParamGroup::Mse, mse), (ParamGroup::Reid, reid)])
    }

    /// Gradients of `sum((a - 3)^2)`, which never reaches `b`.
    fn grads(s: &ParamStore) -> Gradients {
        let mut g = Graph::new(s, true);
        let a = g.param(s.find("a").unwrap());
        let t = g.input(Tensor::full(&[2], 3.0));
        let l = g.mse(a, t, Reduction::Sum).unwrap();
        g.backward(l).unwrap()
    }

    #[test]
    fn matches_reference_update() {
        let mut s = store();
        let hyper = AdamHyper::default();
        let mut opt = Adam::new(&s, hyper, lrs(0.1, 0.01)).unwrap();
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        let mut p = [1.0, -2.0];
        for t in 1..=3 {
            let gr = grads(&s);
            opt.step(&mut s, &gr);
            for i in 0..2 {
                let g = 2.0 * (p[i] - 3.0) + 5e-4 * p[i];
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                p[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }
            let got = s.value(s.find("a").unwrap()).data();
            for i in 0..2 {
                assert!((got[i] - p[i]).abs() < 1e-12, "{} vs {}", got[i], p[i]);
            }
        }
        // no gradient, no update (not even weight decay)
        assert_eq!(s.value(s.find("b").unwrap()).data(), &[0.5]);
        assert!(!opt.state(&s).steps.contains_key("b"));
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let mut s = store();
        let before = s.named();
        let mut opt = Adam::new(&s, AdamHyper::default(), lrs(0.0, 0.0)).unwrap();
        let gr = grads(&s);
        opt.step(&mut s, &gr);
        assert_eq!(s.named(), before);
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let mut a = store();
        let mut opt = Adam::new(&a, AdamHyper::default(), lrs(0.05, 0.01)).unwrap();
        let gr = grads(&a);
        opt.step(&mut a, &gr);
        let mut b = a.clone();
        let mut opt_b = Adam::from_state(&b, opt.hyper(), &opt.state(&a)).unwrap();
        assert_eq!(opt_b, opt);
        let (ga, gb) = (grads(&a), grads(&b));
        opt.step(&mut a, &ga);
        opt_b.step(&mut b, &gb);
        assert_eq!(a.named(), b.named());
    }

    #[test]
    fn missing_group_rate_is_rejected() {
        let s = store();
        let only = BTreeMap::from([(ParamGroup::Mse, 0.1)]);
        assert!(matches!(Adam::new(&s, AdamHyper::default(), only), Err(Error::Config(_))));
    }
}
