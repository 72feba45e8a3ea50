//! Training objectives: conditioned language modeling over good/bad control
//! tokens, its adapter-only variant, DPO, and score quantization for
//! pointwise data.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, ControlAdapter, ControlTokenSet};
use crate::data::PreferenceExample;
use crate::diffcore::{Gradients, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::model::{param_shapes, response_logprobs, response_mean_nll, Graph, ModelState, ScoredSeq, Tokenizer};

/// Default DPO preference temperature.
pub const DPO_BETA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Control tokens only; the base model is frozen.
    Pet,
    /// Everything trains.
    Joint,
}

/// Names of the parameters that receive gradients.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainableMask {
    names: BTreeSet<String>,
}

impl TrainableMask {
    pub fn from_names<I: IntoIterator<Item = String>>(names: I) -> Self {
        Self { names: names.into_iter().collect() }
    }

    pub fn names(&self) -> &BTreeSet<String> {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    /// Number of scalars the mask exposes.
    pub fn scalar_count(&self, state: &ModelState, set: &ControlTokenSet) -> usize {
        let shapes = param_shapes(state, set.all());
        self.names.iter().filter_map(|n| shapes.get(n)).map(|s| s.iter().product::<usize>()).sum()
    }

    /// Rejects masks that touch base parameters.
    pub fn ensure_adapter_only(&self, state: &ModelState) -> Result<()> {
        match self.names.iter().find(|n| state.params().contains_key(*n)) {
            Some(n) => Err(invalid(format!("adapter-only stage may not train base parameter {n}"))),
            None => Ok(()),
        }
    }
}

/// Trainable set for a stage. Hand-crafted prefixes have nothing to tune, so
/// they have no `Pet` stage.
pub fn build_mask(stage: Stage, state: &ModelState, set: &ControlTokenSet) -> Result<TrainableMask> {
    let adapter = set.params().into_iter().map(|(n, _)| n);
    match stage {
        Stage::Pet if set.kind() == AdapterKind::Handcrafted => {
            Err(invalid("hand-crafted control prefixes are not trainable; there is no adapter-only stage"))
        }
        Stage::Pet => Ok(TrainableMask::from_names(adapter)),
        Stage::Joint => Ok(TrainableMask::from_names(state.names().cloned().chain(adapter))),
    }
}

/// Value plus gradients for every masked name.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub grads: Gradients,
}

fn pairs<'a>(batch: &'a [PreferenceExample]) -> Result<Vec<(&'a str, &'a str, &'a str)>> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    batch
        .iter()
        .map(|ex| match ex {
            PreferenceExample::Pairwise { prompt, chosen, rejected } => Ok((prompt.as_str(), chosen.as_str(), rejected.as_str())),
            PreferenceExample::Pointwise { .. } => Err(invalid("pairwise objective given a pointwise example; quantize scores first")),
        })
        .collect()
}

fn scored(tok: &Tokenizer, prompt: &str, response: &str) -> ScoredSeq {
    ScoredSeq { prompt: tok.prompt_ids(prompt), response: tok.response_ids(response) }
}

/// Graph node for the conditioned objective:
/// `mean_i [ nll(y_l | x, bad) + nll(y_w | x, good) ]`.
fn cg_node(g: &mut Graph, state: &ModelState, set: &ControlTokenSet, batch: &[PreferenceExample], tok: &Tokenizer) -> Result<Var> {
    let triples = pairs(batch)?;
    let bad: Vec<ScoredSeq> = triples.iter().map(|(x, _, l)| scored(tok, x, l)).collect();
    let good: Vec<ScoredSeq> = triples.iter().map(|(x, w, _)| scored(tok, x, w)).collect();
    let vl = response_mean_nll(g, state, &bad, Some(&set.bad))?;
    let vw = response_mean_nll(g, state, &good, Some(&set.good))?;
    let both = g.tape.add(vl, vw)?;
    Ok(g.tape.mean(both))
}

fn evaluate<F>(state: &ModelState, adapters: &[&ControlAdapter], mask: &TrainableMask, build: F) -> Result<LossEval>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(mask.names().iter().cloned());
    let loss = build(&mut g)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss, &param_shapes(state, adapters.iter().copied()))?;
    Ok(LossEval { value, grads })
}

/// Conditioned language-modeling loss (value only).
pub fn loss_cg(state: &ModelState, set: &ControlTokenSet, batch: &[PreferenceExample], tok: &Tokenizer) -> Result<f64> {
    let mut g = Graph::frozen();
    let v = cg_node(&mut g, state, set, batch, tok)?;
    Ok(g.value(v).item())
}

/// Conditioned loss with gradients for `mask`.
pub fn loss_cg_grad(
    state: &ModelState,
    set: &ControlTokenSet,
    batch: &[PreferenceExample],
    tok: &Tokenizer,
    mask: &TrainableMask,
) -> Result<LossEval> {
    let adapters: Vec<&ControlAdapter> = set.all().collect();
    evaluate(state, &adapters, mask, |g| cg_node(g, state, set, batch, tok))
}

/// Same value as [`loss_cg`]; gradients restricted to control-token
/// parameters, with explicit zero entries for every base parameter. A mask
/// containing base parameters is rejected.
pub fn loss_pet(
    state: &ModelState,
    set: &ControlTokenSet,
    batch: &[PreferenceExample],
    tok: &Tokenizer,
    mask: &TrainableMask,
) -> Result<LossEval> {
    mask.ensure_adapter_only(state)?;
    let mut out = loss_cg_grad(state, set, batch, tok, mask)?;
    for (name, t) in state.params() {
        out.grads.insert(name.clone(), Tensor::zeros(t.shape()));
    }
    Ok(out)
}

/// Mean NLL of the preferred responses with no control token; the
/// supervised warm start for the DPO reference.
pub fn loss_sft_grad(state: &ModelState, batch: &[PreferenceExample], tok: &Tokenizer, mask: &TrainableMask) -> Result<LossEval> {
    let triples = pairs(batch)?;
    let good: Vec<ScoredSeq> = triples.iter().map(|(x, w, _)| scored(tok, x, w)).collect();
    evaluate(state, &[], mask, |g| {
        let v = response_mean_nll(g, state, &good, None)?;
        Ok(g.tape.mean(v))
    })
}

/// Unconditioned mean NLL over arbitrary prompt/response pairs.
pub fn loss_lm_grad(state: &ModelState, items: &[ScoredSeq], mask: &TrainableMask) -> Result<LossEval> {
    if items.is_empty() {
        return Err(invalid("empty batch"));
    }
    evaluate(state, &[], mask, |g| {
        let v = response_mean_nll(g, state, items, None)?;
        Ok(g.tape.mean(v))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
}

impl DpoConfig {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid(format!("DPO beta must be positive, got {beta}")));
        }
        Ok(Self { beta })
    }
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: DPO_BETA }
    }
}

/// Summed response log-likelihoods under a frozen state.
fn frozen_logprobs(state: &ModelState, items: &[ScoredSeq]) -> Result<Tensor> {
    let mut g = Graph::frozen();
    let (v, _) = response_logprobs(&mut g, state, items, None)?;
    Ok(g.value(v).clone())
}

fn dpo_node(
    g: &mut Graph,
    state: &ModelState,
    reference: &ModelState,
    cfg: &DpoConfig,
    batch: &[PreferenceExample],
    tok: &Tokenizer,
) -> Result<Var> {
    let triples = pairs(batch)?;
    let win: Vec<ScoredSeq> = triples.iter().map(|(x, w, _)| scored(tok, x, w)).collect();
    let lose: Vec<ScoredSeq> = triples.iter().map(|(x, _, l)| scored(tok, x, l)).collect();
    let rw = frozen_logprobs(reference, &win)?;
    let rl = frozen_logprobs(reference, &lose)?;
    let (pw, _) = response_logprobs(g, state, &win, None)?;
    let (pl, _) = response_logprobs(g, state, &lose, None)?;
    // -(z) with z = β[(pw − rw) − (pl − rl)] = β[(pw − pl) − (rw − rl)]
    let ref_margin = Tensor::vector(rw.data().iter().zip(rl.data()).map(|(a, b)| a - b).collect());
    let ref_margin = g.tape.constant(ref_margin);
    let margin = g.tape.sub(pw, pl)?;
    let z = g.tape.sub(margin, ref_margin)?;
    let neg = g.tape.scale(z, -cfg.beta);
    let per = g.tape.softplus(neg);
    Ok(g.tape.mean(per))
}

/// `mean −log σ(β[(log π(y_w|x) − log π_ref(y_w|x)) − (log π(y_l|x) − log π_ref(y_l|x))])`
/// with summed token log-likelihoods.
pub fn loss_dpo(
    state: &ModelState,
    reference: Option<&ModelState>,
    cfg: &DpoConfig,
    batch: &[PreferenceExample],
    tok: &Tokenizer,
) -> Result<f64> {
    let reference = reference.ok_or_else(|| invalid("DPO needs a reference state"))?;
    let mut g = Graph::frozen();
    let v = dpo_node(&mut g, state, reference, cfg, batch, tok)?;
    Ok(g.value(v).item())
}

pub fn loss_dpo_grad(
    state: &ModelState,
    reference: Option<&ModelState>,
    cfg: &DpoConfig,
    batch: &[PreferenceExample],
    tok: &Tokenizer,
    mask: &TrainableMask,
) -> Result<LossEval> {
    let reference = reference.ok_or_else(|| invalid("DPO needs a reference state"))?;
    evaluate(state, &[], mask, |g| dpo_node(g, state, reference, cfg, batch, tok))
}

/// Level assignment for pointwise records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quantized {
    /// Level per input example, in input order.
    pub levels: Vec<usize>,
    /// Examples per level; zeros are empty bins.
    pub bin_sizes: Vec<usize>,
}

impl Quantized {
    pub fn empty_bins(&self) -> usize {
        self.bin_sizes.iter().filter(|&&c| c == 0).count()
    }
}

/// Quantile bins over the batch: with `c` the number of scores strictly
/// below `s`, `s` goes to level `⌊c·K/n⌋`. Equal scores share a level, which
/// is the lowest one their rank block touches.
pub fn quantize_scores(batch: &[PreferenceExample], k: usize) -> Result<Quantized> {
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let scores: Vec<f64> = batch
        .iter()
        .map(|ex| match ex {
            PreferenceExample::Pointwise { score, .. } if score.is_finite() => Ok(*score),
            PreferenceExample::Pointwise { .. } => Err(invalid("non-finite score")),
            PreferenceExample::Pairwise { .. } => Err(invalid("quantization needs pointwise examples")),
        })
        .collect::<Result<_>>()?;
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let n = scores.len();
    let levels: Vec<usize> = scores
        .iter()
        .map(|s| {
            let below = sorted.partition_point(|v| v < s);
            below * k / n
        })
        .collect();
    let mut bin_sizes = vec![0; k];
    for &l in &levels {
        bin_sizes[l] += 1;
    }
    Ok(Quantized { levels, bin_sizes })
}

fn levels_node(
    g: &mut Graph,
    state: &ModelState,
    set: &ControlTokenSet,
    batch: &[PreferenceExample],
    levels: &[usize],
    tok: &Tokenizer,
) -> Result<Var> {
    if batch.is_empty() || batch.len() != levels.len() {
        return Err(invalid("need one level per example in a nonempty batch"));
    }
    let mut groups: BTreeMap<usize, Vec<ScoredSeq>> = BTreeMap::new();
    for (ex, &l) in batch.iter().zip(levels) {
        let PreferenceExample::Pointwise { prompt, response, .. } = ex else {
            return Err(invalid("level objective needs pointwise examples"));
        };
        groups.entry(l).or_default().push(scored(tok, prompt, response));
    }
    let mut total: Option<Var> = None;
    for (l, items) in &groups {
        let adapter = set.levels.get(*l).ok_or_else(|| Error::Unknown { what: "control level", name: l.to_string() })?;
        let v = response_mean_nll(g, state, items, Some(adapter))?;
        let s = g.tape.sum(v);
        total = Some(match total {
            None => s,
            Some(t) => g.tape.add(t, s)?,
        });
    }
    let total = total.expect("nonempty batch");
    Ok(g.tape.scale(total, 1.0 / batch.len() as f64))
}

/// Pointwise counterpart of the conditioned loss: each response is scored
/// under the control token of its quantized level.
pub fn loss_levels_grad(
    state: &ModelState,
    set: &ControlTokenSet,
    batch: &[PreferenceExample],
    levels: &[usize],
    tok: &Tokenizer,
    mask: &TrainableMask,
) -> Result<LossEval> {
    let adapters: Vec<&ControlAdapter> = set.all().collect();
    evaluate(state, &adapters, mask, |g| levels_node(g, state, set, batch, levels, tok))
}
