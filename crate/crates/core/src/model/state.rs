use std::collections::BTreeMap;

use super::config::ModelConfig;
use crate::diffcore::{SeededRng, Tensor};
use crate::error::{Error, Result};

pub(crate) fn layer_param(layer: usize, name: &str) -> String {
    format!("h{layer}.{name}")
}

/// Base transformer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    /// How many LoRA deltas have been folded into the weights.
    pub merge_count: u32,
}

impl ModelState {
    /// GPT-2 style initialization: weights `N(0, 0.02²)`, residual output
    /// projections scaled by `1/√(2·n_layers)`, unit gains, zero biases.
    pub fn init(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let (v, c, d, m) = (config.vocab_size, config.context_length, config.hidden_dim, config.mlp_dim);
        let resid_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let mut params = BTreeMap::new();
        let mut normal = |shape: &[usize], std: f64| {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng.normal()).collect()).expect("shape")
        };
        params.insert("tok_emb".to_string(), normal(&[v, d], 0.02));
        params.insert("pos_emb".to_string(), normal(&[c, d], 0.01));
        for l in 0..config.n_layers {
            params.insert(layer_param(l, "attn.wq"), normal(&[d, d], 0.02));
            params.insert(layer_param(l, "attn.wk"), normal(&[d, d], 0.02));
            params.insert(layer_param(l, "attn.wv"), normal(&[d, d], 0.02));
            params.insert(layer_param(l, "attn.wo"), normal(&[d, d], resid_std));
            params.insert(layer_param(l, "mlp.w1"), normal(&[m, d], 0.02));
            params.insert(layer_param(l, "mlp.w2"), normal(&[d, m], resid_std));
        }
        for l in 0..config.n_layers {
            params.insert(layer_param(l, "ln1.g"), Tensor::full(&[d], 1.0));
            params.insert(layer_param(l, "ln1.b"), Tensor::zeros(&[d]));
            params.insert(layer_param(l, "ln2.g"), Tensor::full(&[d], 1.0));
            params.insert(layer_param(l, "ln2.b"), Tensor::zeros(&[d]));
            params.insert(layer_param(l, "mlp.b1"), Tensor::zeros(&[m]));
            params.insert(layer_param(l, "mlp.b2"), Tensor::zeros(&[d]));
        }
        params.insert("ln_f.g".to_string(), Tensor::full(&[d], 1.0));
        params.insert("ln_f.b".to_string(), Tensor::zeros(&[d]));
        Ok(Self { config, params, merge_count: 0 })
    }

    /// Rebuilds a state from named tensors, checking every expected shape.
    pub fn from_params(config: ModelConfig, params: BTreeMap<String, Tensor>, merge_count: u32) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Format(format!("expected {} parameters, found {}", expected.len(), params.len())));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
                }
                None => return Err(Error::Format(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, params, merge_count })
    }

    pub fn expected_shapes(config: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
        let (v, c, d, m) = (config.vocab_size, config.context_length, config.hidden_dim, config.mlp_dim);
        let mut s = BTreeMap::new();
        s.insert("tok_emb".to_string(), vec![v, d]);
        s.insert("pos_emb".to_string(), vec![c, d]);
        for l in 0..config.n_layers {
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                s.insert(layer_param(l, w), vec![d, d]);
            }
            s.insert(layer_param(l, "mlp.w1"), vec![m, d]);
            s.insert(layer_param(l, "mlp.w2"), vec![d, m]);
            for p in ["ln1.g", "ln1.b", "ln2.g", "ln2.b", "mlp.b2"] {
                s.insert(layer_param(l, p), vec![d]);
            }
            s.insert(layer_param(l, "mlp.b1"), vec![m]);
        }
        s.insert("ln_f.g".to_string(), vec![d]);
        s.insert("ln_f.b".to_string(), vec![d]);
        s
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::Unknown { what: "parameter", name: name.to_string() })
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::Unknown { what: "parameter", name: name.to_string() })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn token_embeddings(&self) -> &Tensor {
        &self.params["tok_emb"]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::stream;

    #[test]
    fn shapes_match_config() {
        let cfg = ModelConfig::micro();
        let s = ModelState::init(cfg.clone(), &mut SeededRng::new(0, stream::INIT)).unwrap();
        for (name, shape) in ModelState::expected_shapes(&cfg) {
            assert_eq!(s.param(&name).unwrap().shape(), shape.as_slice(), "{name}");
        }
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::micro();
        let a = ModelState::init(cfg.clone(), &mut SeededRng::new(3, stream::INIT)).unwrap();
        let b = ModelState::init(cfg.clone(), &mut SeededRng::new(3, stream::INIT)).unwrap();
        let c = ModelState::init(cfg, &mut SeededRng::new(4, stream::INIT)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bad_head_split_rejected() {
        let cfg = ModelConfig { n_heads: 5, ..ModelConfig::micro() };
        assert!(ModelState::init(cfg, &mut SeededRng::new(0, 0)).is_err());
    }
}
