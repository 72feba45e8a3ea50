//! Adam with optional global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::ControlTokenSet;
use crate::diffcore::{Gradients, Tensor};
use crate::error::{invalid, Error, Result};
use crate::model::ModelState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

/// Mutable view over every named parameter of a run.
pub struct ParamStore<'a> {
    pub state: &'a mut ModelState,
    pub controls: Option<&'a mut ControlTokenSet>,
}

impl ParamStore<'_> {
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        if self.state.params().contains_key(name) {
            return self.state.param_mut(name);
        }
        self.controls
            .as_deref_mut()
            .and_then(|c| c.param_mut(name))
            .ok_or_else(|| Error::Unknown { what: "parameter", name: name.to_string() })
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        Ok(Self { cfg, t: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// True before the first step: no moment estimates held.
    pub fn is_fresh(&self) -> bool {
        self.t == 0 && self.m.is_empty() && self.v.is_empty()
    }

    /// Applies one update to every parameter named in `grads`.
    pub fn step(&mut self, grads: &Gradients, params: &mut ParamStore) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let scale = match self.cfg.clip_norm {
            Some(c) => {
                let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|x| x * x).sum::<f64>().sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape { op: "adam", detail: format!("{name}: {:?} vs {:?}", p.shape(), g.shape()) });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * scale;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{stream, SeededRng};
    use crate::model::ModelConfig;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = ModelState::init(ModelConfig::micro(), &mut SeededRng::new(0, stream::INIT)).unwrap();
        let before = s.param("ln_f.b").unwrap().clone();
        let mut g = Gradients::default();
        let grad: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 3.0 } else { -0.5 }).collect();
        g.insert("ln_f.b".into(), Tensor::vector(grad.clone()));
        let mut adam = Adam::new(AdamConfig::with_lr(0.01)).unwrap();
        assert!(adam.is_fresh());
        adam.step(&g, &mut ParamStore { state: &mut s, controls: None }).unwrap();
        let after = s.param("ln_f.b").unwrap();
        for i in 0..64 {
            let moved = after.data()[i] - before.data()[i];
            // m̂ = g, v̂ = g², step = lr·g/(|g|+eps)
            let want = -0.01 * grad[i] / (grad[i].abs() + 1e-8);
            assert!((moved - want).abs() < 1e-15);
        }
        assert!(!adam.is_fresh());
    }

    #[test]
    fn clipping_rescales_before_moments() {
        // Clipped 100s become 1/8 each, so a following unclipped 1/8 step
        // sees constant moments and moves by exactly lr again.
        let run = |clip: Option<f64>| {
            let mut s = ModelState::init(ModelConfig::micro(), &mut SeededRng::new(0, stream::INIT)).unwrap();
            let mut cfg = AdamConfig::with_lr(0.1);
            cfg.clip_norm = clip;
            let mut adam = Adam::new(cfg).unwrap();
            for v in [100.0, 0.125] {
                let mut g = Gradients::default();
                g.insert("ln_f.b".into(), Tensor::full(&[64], v));
                let before = s.param("ln_f.b").unwrap().data()[0];
                adam.step(&g, &mut ParamStore { state: &mut s, controls: None }).unwrap();
                if v < 1.0 {
                    return s.param("ln_f.b").unwrap().data()[0] - before;
                }
            }
            unreachable!()
        };
        assert!((run(Some(1.0)) + 0.1).abs() < 1e-7);
        assert!((run(None) + 0.1).abs() > 1e-3);
    }

    #[test]
    fn bad_lr_and_unknown_names_rejected() {
        assert!(Adam::new(AdamConfig::with_lr(0.0)).is_err());
        let mut s = ModelState::init(ModelConfig::micro(), &mut SeededRng::new(0, stream::INIT)).unwrap();
        let mut g = Gradients::default();
        g.insert("nope".into(), Tensor::scalar(1.0));
        let mut adam = Adam::new(AdamConfig::with_lr(0.1)).unwrap();
        assert!(adam.step(&g, &mut ParamStore { state: &mut s, controls: None }).is_err());
    }
}
