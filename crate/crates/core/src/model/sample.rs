//! Temperature sampling and greedy decoding.

use super::forward::{forward_hidden, logits_for_rows, Graph};
use super::state::ModelState;
use super::tokenizer::{Tokenizer, EOS};
use crate::adapters::ControlAdapter;
use crate::diffcore::{stream, SeededRng};
use crate::error::{invalid, Result};

/// Maximum generated tokens when nothing else is configured.
pub const DEFAULT_MAX_LEN: usize = 128;

/// Argmax with ties going to the lowest id.
pub fn greedy_pick(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Draws from `softmax(logits / temperature)`; `temperature == 0` is greedy.
pub fn pick_token(logits: &[f64], temperature: f64, rng: &mut SeededRng) -> usize {
    if temperature == 0.0 {
        return greedy_pick(logits);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&l| ((l - m) / temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    let u = rng.uniform() * z;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in w.iter().enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Generates a continuation of `prompt` until EOS, `max_len` tokens, or the
/// context is full. The returned ids exclude EOS.
pub fn sample(
    state: &ModelState,
    prompt: &[usize],
    adapter: Option<&ControlAdapter>,
    temperature: f64,
    max_len: usize,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    let mut out = sample_many(state, &[prompt.to_vec()], adapter, temperature, max_len, std::slice::from_mut(rng))?;
    Ok(out.pop().expect("one prompt in, one out"))
}

/// Anything that can score the next token for a batch of sequences.
pub trait NextTokenModel {
    /// One logit row per sequence, for the position after its last token.
    fn next_logits(&self, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
    /// Longest sequence (in tokens) the model accepts.
    fn max_tokens(&self) -> usize;
}

/// A model state with a fixed control adapter.
pub struct Conditioned<'a> {
    pub state: &'a ModelState,
    pub adapter: Option<&'a ControlAdapter>,
}

impl NextTokenModel for Conditioned<'_> {
    fn next_logits(&self, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::frozen();
        let h = forward_hidden(&mut g, self.state, seqs, self.adapter)?;
        let rows: Vec<usize> = h.segments.iter().map(|s| s.start + s.len - 1).collect();
        let logits = logits_for_rows(&mut g, self.state, h.hidden, &rows)?;
        let lt = g.value(logits);
        Ok((0..rows.len()).map(|r| lt.row(r).to_vec()).collect())
    }

    fn max_tokens(&self) -> usize {
        self.state.config.context_length - self.adapter.map_or(0, ControlAdapter::prefix_len)
    }
}

/// Lock-step generation for many prompts sharing one adapter. Prompt `i`
/// draws only from `rngs[i]`, so results do not depend on batch composition.
pub fn sample_many(
    state: &ModelState,
    prompts: &[Vec<usize>],
    adapter: Option<&ControlAdapter>,
    temperature: f64,
    max_len: usize,
    rngs: &mut [SeededRng],
) -> Result<Vec<Vec<usize>>> {
    decode_many(&Conditioned { state, adapter }, prompts, temperature, max_len, rngs)
}

/// Per-prompt sampling stream: prompt `i` of a run seeded with `seed` always
/// draws from the same generator, whatever else is in the batch.
pub fn prompt_rng(seed: u64, index: usize) -> SeededRng {
    SeededRng::new(seed, (stream::SAMPLE << 32) | index as u64)
}

/// Text-in, text-out generation for a list of prompts.
pub fn generate_texts(
    state: &ModelState,
    adapter: Option<&ControlAdapter>,
    tok: &Tokenizer,
    prompts: &[String],
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let ids: Vec<Vec<usize>> = prompts.iter().map(|p| tok.prompt_ids(p)).collect();
    let mut rngs: Vec<SeededRng> = (0..prompts.len()).map(|i| prompt_rng(seed, i)).collect();
    let out = sample_many(state, &ids, adapter, temperature, max_len, &mut rngs)?;
    Ok(out.iter().map(|o| tok.decode(o)).collect())
}

/// Generation loop over any [`NextTokenModel`].
pub fn decode_many<M: NextTokenModel>(
    model: &M,
    prompts: &[Vec<usize>],
    temperature: f64,
    max_len: usize,
    rngs: &mut [SeededRng],
) -> Result<Vec<Vec<usize>>> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(invalid(format!("temperature must be a finite non-negative number, got {temperature}")));
    }
    if max_len == 0 {
        return Err(invalid("max_len must be at least 1"));
    }
    if rngs.len() != prompts.len() {
        return Err(invalid("need one rng per prompt"));
    }
    let room = model.max_tokens();
    let mut generated: Vec<Vec<usize>> = vec![Vec::new(); prompts.len()];
    let mut active: Vec<usize> = (0..prompts.len()).collect();
    while !active.is_empty() {
        let seqs: Vec<Vec<usize>> = active
            .iter()
            .map(|&i| prompts[i].iter().chain(&generated[i]).copied().collect())
            .collect();
        let logits = model.next_logits(&seqs)?;
        let mut still = Vec::with_capacity(active.len());
        for (row, &i) in logits.iter().zip(&active) {
            let tok = pick_token(row, temperature, &mut rngs[i]);
            if tok == EOS {
                continue;
            }
            generated[i].push(tok);
            if generated[i].len() < max_len && prompts[i].len() + generated[i].len() < room {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(generated)
}
