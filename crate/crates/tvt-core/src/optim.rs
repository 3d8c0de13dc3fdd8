//! Adam-style optimizer with decoupled weight decay and serializable state,
//! so an interrupted run can resume bit-identically.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::fmath;
use crate::tape::{Grads, ParamId, ParamStore};
use crate::Result;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: applied directly to the weights, not mixed into the
    /// gradient moments.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(CoreError::invalid_spec("optimizer hyperparameters out of range"))
        }
    }
}

/// First/second moment estimates for one parameter tensor, with its own
/// update count so bias correction stays exact for parameters that only
/// receive gradients on some steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSlot {
    pub steps: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer state across all parameters it has seen.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    slots: BTreeMap<ParamId, MomentSlot>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn slots(&self) -> impl Iterator<Item = (ParamId, &MomentSlot)> {
        self.slots.iter().map(|(k, v)| (*k, v))
    }

    /// Restores one parameter's moments (checkpoint loading).
    pub fn insert_slot(&mut self, id: ParamId, slot: MomentSlot) {
        self.slots.insert(id, slot);
    }

    /// Applies one update from `grads` to every parameter that received a
    /// gradient. Parameters without gradients are untouched, including their
    /// weight decay (a frozen parameter must not decay).
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &Grads,
        cfg: &AdamConfig,
    ) -> Result<()> {
        for (id, g) in grads.params() {
            self.update_one(store, id, g, cfg)?;
        }
        Ok(())
    }

    /// Same as [`apply`](Self::apply) for a hand-assembled gradient map
    /// (e.g. a weighted combination of two backward passes).
    pub fn apply_map(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<ParamId, crate::tensor::Tensor>,
        cfg: &AdamConfig,
    ) -> Result<()> {
        for (&id, g) in grads {
            self.update_one(store, id, g, cfg)?;
        }
        Ok(())
    }

    fn update_one(
        &mut self,
        store: &mut ParamStore,
        id: ParamId,
        g: &crate::tensor::Tensor,
        cfg: &AdamConfig,
    ) -> Result<()> {
        let n = store.get(id).numel();
        if g.numel() != n {
            return Err(CoreError::shape(
                "gradient and parameter sizes differ in optimizer update",
            ));
        }
        let slot = self.slots.entry(id).or_insert_with(|| MomentSlot {
            steps: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        if slot.m.len() != n {
            return Err(CoreError::shape("optimizer state size mismatch"));
        }
        slot.steps += 1;
        let bc1 = 1.0 - fmath::powi(cfg.beta1, slot.steps as i32);
        let bc2 = 1.0 - fmath::powi(cfg.beta2, slot.steps as i32);
        let w = store.get_mut(id).data_mut();
        let gd = g.data();
        for i in 0..n {
            let m = &mut slot.m[i];
            let v = &mut slot.v[i];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gd[i];
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gd[i] * gd[i];
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            w[i] -=
                cfg.lr * (mhat / (fmath::sqrt(vhat) + cfg.eps) + cfg.weight_decay * w[i]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::TrainSet;
    use crate::rng::Stream;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn grad_of(store: &ParamStore, id: ParamId, coeffs: &Tensor) -> Grads {
        // loss = sum(coeffs * w) so dloss/dw = coeffs exactly.
        let mut tape = Tape::new();
        let ts = TrainSet::from_ids(store, &[id]);
        let w = tape.param(store, id, ts.is_trainable(id));
        let c = tape.constant(coeffs.clone());
        let prod = tape.mul(w, c).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap()
    }

    #[test]
    fn constant_gradient_matches_closed_form() {
        // With a constant gradient g, bias-corrected moments are exactly
        // m̂ = g and v̂ = g², so every step moves by lr·g/(|g| + eps).
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[3], 1.0));
        let g = Tensor::new(&[3], vec![0.5, -2.0, 0.0]).unwrap();
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new();
        let steps = 7;
        for _ in 0..steps {
            let grads = grad_of(&store, id, &g);
            state.apply(&mut store, &grads, &cfg).unwrap();
        }
        for (i, &gi) in g.data().iter().enumerate() {
            let expect = 1.0 - steps as f64 * cfg.lr * gi / (gi.abs() + cfg.eps);
            let got = store.get(id).data()[i];
            assert!(
                (got - expect).abs() < 1e-9,
                "coord {i}: {got} vs {expect}"
            );
        }
        assert_eq!(state.slots().next().unwrap().1.steps, steps);
    }

    #[test]
    fn weight_decay_is_decoupled_and_skips_ungradded_params() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[2], 4.0));
        let b = store.add("b", Tensor::full(&[2], 4.0));
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        // Zero gradient on `a` only: the adaptive term vanishes and the pure
        // decay step w ← w(1 − lr·wd) remains; `b` must not move at all.
        let grads = grad_of(&store, a, &Tensor::zeros(&[2]));
        let mut state = AdamState::new();
        state.apply(&mut store, &grads, &cfg).unwrap();
        for &w in store.get(a).data() {
            assert!((w - 4.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
        }
        for &w in store.get(b).data() {
            assert_eq!(w, 4.0);
        }
        assert_eq!(state.slots().count(), 1);
    }

    #[test]
    fn resumed_state_continues_bit_identically() {
        let mut s = Stream::derive(5, &["opt"]);
        let mut init = Tensor::zeros(&[8]);
        s.fill_normal(init.data_mut());
        let mut coeff = Tensor::zeros(&[8]);
        s.fill_normal(coeff.data_mut());

        let cfg = AdamConfig {
            lr: 0.02,
            weight_decay: 0.01,
            ..AdamConfig::default()
        };
        // Uninterrupted run.
        let mut store_a = ParamStore::new();
        let id_a = store_a.add("w", init.clone());
        let mut state_a = AdamState::new();
        for _ in 0..10 {
            let grads = grad_of(&store_a, id_a, &coeff);
            state_a.apply(&mut store_a, &grads, &cfg).unwrap();
        }
        // Interrupted after 4 steps, state cloned into a fresh instance.
        let mut store_b = ParamStore::new();
        let id_b = store_b.add("w", init.clone());
        let mut state_b = AdamState::new();
        for _ in 0..4 {
            let grads = grad_of(&store_b, id_b, &coeff);
            state_b.apply(&mut store_b, &grads, &cfg).unwrap();
        }
        let mut resumed = AdamState::new();
        for (id, slot) in state_b.slots() {
            resumed.insert_slot(id, slot.clone());
        }
        for _ in 0..6 {
            let grads = grad_of(&store_b, id_b, &coeff);
            resumed.apply(&mut store_b, &grads, &cfg).unwrap();
        }
        for (x, y) in store_a.get(id_a).data().iter().zip(store_b.get(id_b).data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(state_a, resumed);
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::default().validate().is_ok());
        assert!(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        }
        .validate()
        .is_err());
        assert!(AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        }
        .validate()
        .is_err());
    }
}
