//! Decoder-only transformer language model.

mod config;
mod forward;
mod sample;
mod state;
pub mod tokenizer;

pub use config::ModelConfig;
pub(crate) use forward::{response_logprobs, response_mean_nll};
pub use forward::{forward_logits, lm_loss, param_shapes, scored_from_text, Graph, ScoredSeq};
pub use sample::{decode_many, generate_texts, greedy_pick, prompt_rng, pick_token, sample, sample_many, Conditioned, NextTokenModel, DEFAULT_MAX_LEN};
pub(crate) use state::layer_param;
pub use state::ModelState;
pub use tokenizer::Tokenizer;
