//! The unconditioned base model that every variant starts from.

use serde::{Deserialize, Serialize};

use super::plan::{Objective, StagePlan};
use super::run::sha256_hex;
use super::train::{optimize, StageInput, StageSummary};
use crate::checkpoint::Checkpoint;
use crate::data::{gen_synthetic, PreferenceExample, SyntheticTask};
use crate::diffcore::{stream, SeededRng};
use crate::error::Result;
use crate::model::{ModelConfig, ModelState, Tokenizer};
use crate::objectives::DpoConfig;

/// Optimization settings for the unconditioned base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Longest run of random printable bytes placed before an example, so
    /// the model tolerates prefixes and shifted positions.
    pub max_context: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-3, epochs: 7, batch_size: 8, max_context: 24 }
    }
}

/// Random printable-byte contexts, one per example.
pub fn noise_contexts(n: usize, max_len: usize, seed: u64, tok: &Tokenizer) -> Vec<Vec<usize>> {
    let mut rng = SeededRng::new(seed, (stream::DATA << 32) | 1);
    (0..n)
        .map(|_| {
            let len = rng.range_inclusive(0, max_len);
            let bytes: Vec<u8> = (0..len).map(|_| b' ' + rng.below(95) as u8).collect();
            tok.encode_bytes(&bytes)
        })
        .collect()
}

/// Fresh model trained as a plain language model on every response in
/// `corpus`, preferred or not, each behind a random context.
pub fn pretrain_base(config: &ModelConfig, corpus: &[PreferenceExample], cfg: &PretrainConfig, seed: u64) -> Result<(ModelState, StageSummary)> {
    let tok = Tokenizer::new(config.vocab_size)?;
    let mut state = ModelState::init(config.clone(), &mut SeededRng::new(seed, stream::INIT))?;
    let plan = StagePlan {
        name: "pretrain".into(),
        objective: Objective::Lm,
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        clip_norm: Some(1.0),
    };
    let context = noise_contexts(corpus.len(), cfg.max_context, seed, &tok);
    let input = StageInput { data: corpus, levels: None, reference: None, context: Some(&context), dpo: DpoConfig::default(), tok: &tok };
    let (summary, _) = optimize(&mut state, None, &plan, 0, &input, seed)?;
    Ok((state, summary))
}

/// A synthetic-corpus base: task, corpus size and seed, and optimizer
/// settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseSpec {
    pub model: ModelConfig,
    pub task: SyntheticTask,
    pub examples: usize,
    pub seed: u64,
    pub pretrain: PretrainConfig,
}

impl BaseSpec {
    pub fn new(task: SyntheticTask) -> Self {
        Self { model: ModelConfig::micro(), task, examples: 16_000, seed: 0, pretrain: PretrainConfig::default() }
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("base spec serializes").as_bytes())
    }

    /// Trains the base on both splits of a fresh synthetic corpus.
    pub fn build(&self) -> Result<(ModelState, StageSummary)> {
        let ds = gen_synthetic(self.task, self.examples, self.seed)?;
        let corpus: Vec<PreferenceExample> = ds.train.into_iter().chain(ds.validation).collect();
        pretrain_base(&self.model, &corpus, &self.pretrain, self.seed)
    }

    /// Loads `path` if it holds a base, else builds one and saves it there.
    pub fn load_or_build(&self, path: &std::path::Path) -> Result<ModelState> {
        if path.exists() {
            return Ok(Checkpoint::load(path)?.state);
        }
        let (state, _) = self.build()?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Checkpoint { state: state.clone(), controls: None }.save(path)?;
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contexts_are_printable_and_bounded() {
        let tok = Tokenizer::new(260).unwrap();
        let c = noise_contexts(200, 32, 4, &tok);
        assert!(c.iter().all(|x| x.len() <= 32 && x.iter().all(|&t| (32..127).contains(&t))));
        assert!(c.iter().any(|x| x.is_empty()) && c.iter().any(|x| x.len() == 32));
        assert_eq!(c, noise_contexts(200, 32, 4, &tok));
    }

    #[test]
    fn tiny_base_is_deterministic_and_cached() {
        let mut spec = BaseSpec::new(SyntheticTask::Sort { min_len: 3, max_len: 4 });
        spec.examples = 20;
        spec.pretrain.epochs = 1;
        let (a, s) = spec.build().unwrap();
        let (b, _) = spec.build().unwrap();
        assert_eq!(a, b);
        assert_eq!(s.epoch_mean_loss.len(), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.bin");
        assert_eq!(spec.load_or_build(&path).unwrap(), a);
        assert_eq!(spec.load_or_build(&path).unwrap(), a);
        let mut other = spec.clone();
        other.seed = 1;
        assert_ne!(other.hash(), spec.hash());
    }
}
