//! The per-stage optimization loop.

use serde::{Deserialize, Serialize};

use super::optimizer::{Adam, AdamConfig, ParamStore};
use super::plan::{Objective, StagePlan};
use crate::adapters::ControlTokenSet;
use crate::data::PreferenceExample;
use crate::diffcore::{stream, Gradients, SeededRng};
use crate::error::{invalid, Error, Result};
use crate::model::{ModelState, ScoredSeq, Tokenizer};
use crate::objectives::{
    build_mask, loss_cg_grad, loss_dpo_grad, loss_levels_grad, loss_lm_grad, loss_pet, loss_sft_grad, DpoConfig, LossEval, Stage,
    TrainableMask,
};

/// One optimizer step's loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub stage: String,
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

/// Everything a stage reads besides the parameters it updates.
pub struct StageInput<'a> {
    pub data: &'a [PreferenceExample],
    /// Control level per example, for pointwise data.
    pub levels: Option<&'a [usize]>,
    pub reference: Option<&'a ModelState>,
    /// Ids placed before each example's BOS, language-modeling stages only.
    pub context: Option<&'a [Vec<usize>]>,
    pub dpo: DpoConfig,
    pub tok: &'a Tokenizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub objective: Objective,
    /// Optimizer held no moments when the stage began.
    pub optimizer_fresh_at_start: bool,
    pub steps: u64,
    pub epoch_mean_loss: Vec<f64>,
}

/// Shuffle stream for stage `index` of a run.
pub fn shuffle_rng(seed: u64, stage_index: usize) -> SeededRng {
    SeededRng::new(seed, (stream::SHUFFLE << 32) | stage_index as u64)
}

fn mask_for(objective: Objective, state: &ModelState, controls: Option<&ControlTokenSet>) -> Result<TrainableMask> {
    match (objective.uses_controls(), controls) {
        (true, Some(c)) => build_mask(objective.stage(), state, c),
        (true, None) => Err(invalid("stage needs control tokens")),
        (false, _) => Ok(TrainableMask::from_names(state.names().cloned())),
    }
}

fn lm_items(batch: &[PreferenceExample], context: Option<&[Vec<usize>]>, tok: &Tokenizer) -> Vec<ScoredSeq> {
    batch
        .iter()
        .enumerate()
        .flat_map(|(i, ex)| {
            let head = context.map_or(&[][..], |c| &c[i][..]);
            let seq = |p: &str, r: &str| ScoredSeq { prompt: [head, &tok.prompt_ids(p)].concat(), response: tok.response_ids(r) };
            match ex {
            PreferenceExample::Pairwise { prompt, chosen, rejected } => vec![seq(prompt, chosen), seq(prompt, rejected)],
                PreferenceExample::Pointwise { prompt, response, .. } => vec![seq(prompt, response)],
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn batch_loss(
    objective: Objective,
    state: &ModelState,
    controls: Option<&ControlTokenSet>,
    batch: &[PreferenceExample],
    levels: Option<&[usize]>,
    context: Option<&[Vec<usize>]>,
    input: &StageInput,
    mask: &TrainableMask,
) -> Result<LossEval> {
    let tok = input.tok;
    match objective {
        Objective::Pet | Objective::Cg => {
            let c = controls.ok_or_else(|| invalid("stage needs control tokens"))?;
            match levels {
                Some(l) => {
                    if objective == Objective::Pet {
                        mask.ensure_adapter_only(state)?;
                    }
                    loss_levels_grad(state, c, batch, l, tok, mask)
                }
                None if objective == Objective::Pet => loss_pet(state, c, batch, tok, mask),
                None => loss_cg_grad(state, c, batch, tok, mask),
            }
        }
        Objective::Dpo => loss_dpo_grad(state, input.reference, &input.dpo, batch, tok, mask),
        Objective::Sft => loss_sft_grad(state, batch, tok, mask),
        Objective::Lm => loss_lm_grad(state, &lm_items(batch, context, tok), mask),
    }
}

/// Runs one stage: fresh Adam moments, per-epoch shuffles drawn from the
/// stage's own stream, updates restricted to the stage's trainable set.
pub fn optimize(
    state: &mut ModelState,
    mut controls: Option<&mut ControlTokenSet>,
    plan: &StagePlan,
    stage_index: usize,
    input: &StageInput,
    seed: u64,
) -> Result<(StageSummary, Vec<TraceRow>)> {
    plan.validate()?;
    if input.data.is_empty() {
        return Err(invalid(format!("stage {}: empty dataset", plan.name)));
    }
    if let Some(l) = input.levels {
        if l.len() != input.data.len() {
            return Err(invalid("need one control level per example"));
        }
    }
    if let Some(c) = input.context {
        if c.len() != input.data.len() || plan.objective != Objective::Lm {
            return Err(invalid("context ids need a language-modeling stage and one entry per example"));
        }
    }
    let mask = mask_for(plan.objective, state, controls.as_deref())?;
    if plan.objective.stage() == Stage::Pet {
        mask.ensure_adapter_only(state)?;
    }
    let mut adam = Adam::new(AdamConfig { clip_norm: plan.clip_norm, ..AdamConfig::with_lr(plan.learning_rate) })?;
    let fresh = adam.is_fresh();
    let mut rng = shuffle_rng(seed, stage_index);
    let mut order: Vec<usize> = (0..input.data.len()).collect();
    let mut trace = Vec::new();
    let mut epoch_mean_loss = Vec::with_capacity(plan.epochs);
    let mut global_batch = 0;
    for epoch in 0..plan.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut count = 0;
        for (b, idx) in order.chunks(plan.batch_size).enumerate() {
            let batch: Vec<PreferenceExample> = idx.iter().map(|&i| input.data[i].clone()).collect();
            let levels: Option<Vec<usize>> = input.levels.map(|l| idx.iter().map(|&i| l[i]).collect());
            let context: Option<Vec<Vec<usize>>> = input.context.map(|c| idx.iter().map(|&i| c[i].clone()).collect());
            let eval = batch_loss(plan.objective, state, controls.as_deref(), &batch, levels.as_deref(), context.as_deref(), input, &mask)?;
            if !eval.value.is_finite() || eval.grads.iter().any(|(_, g)| !g.all_finite()) {
                return Err(Error::NonFinite { stage: stage_index, batch: global_batch });
            }
            let mut grads = Gradients::default();
            for (name, g) in eval.grads.into_map() {
                if mask.contains(&name) {
                    grads.insert(name, g);
                }
            }
            adam.step(&grads, &mut ParamStore { state, controls: controls.as_deref_mut() })?;
            trace.push(TraceRow { stage: plan.name.clone(), epoch, batch: b, loss: eval.value });
            sum += eval.value;
            count += 1;
            global_batch += 1;
        }
        epoch_mean_loss.push(sum / count as f64);
    }
    let summary = StageSummary {
        name: plan.name.clone(),
        objective: plan.objective,
        optimizer_fresh_at_start: fresh,
        steps: adam.steps(),
        epoch_mean_loss,
    };
    Ok((summary, trace))
}
