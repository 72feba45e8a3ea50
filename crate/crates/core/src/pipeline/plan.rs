//! Stage and run plans.

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterKind;
use crate::error::{invalid, Error, Result};
use crate::objectives::Stage;

/// What a stage minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Conditioned loss, control tokens only.
    Pet,
    /// Conditioned loss, everything trainable.
    Cg,
    Dpo,
    /// Preferred responses, no control token (DPO reference warm start).
    Sft,
    /// Unconditioned language modeling (base pretraining).
    Lm,
}

impl Objective {
    /// Which parameters the stage trains.
    pub fn stage(self) -> Stage {
        match self {
            Objective::Pet => Stage::Pet,
            _ => Stage::Joint,
        }
    }

    /// Whether control-token parameters join the trainable set.
    pub fn uses_controls(self) -> bool {
        matches!(self, Objective::Pet | Objective::Cg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub name: String,
    pub objective: Objective,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("stage {}: learning rate must be positive", self.name)));
        }
        if self.epochs == 0 {
            return Err(invalid(format!("stage {}: epochs must be at least 1", self.name)));
        }
        if self.batch_size == 0 {
            return Err(invalid(format!("stage {}: batch size must be at least 1", self.name)));
        }
        Ok(())
    }
}

/// Training variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    /// Control tokens alone, then joint fine-tuning.
    Meet,
    FirstOnly,
    SecondOnly,
    /// Joint fine-tuning with hand-crafted prefixes.
    Coh,
    Dpo,
}

impl RunKind {
    pub const ALL: [RunKind; 5] = [RunKind::Meet, RunKind::FirstOnly, RunKind::SecondOnly, RunKind::Coh, RunKind::Dpo];

    pub fn name(self) -> &'static str {
        match self {
            RunKind::Meet => "meet",
            RunKind::FirstOnly => "first_only",
            RunKind::SecondOnly => "second_only",
            RunKind::Coh => "coh",
            RunKind::Dpo => "dpo",
        }
    }

    /// Control token used when evaluating the variant.
    pub fn eval_choice(self) -> &'static str {
        match self {
            RunKind::Dpo => "none",
            _ => "good",
        }
    }
}

impl std::fmt::Display for RunKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RunKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        RunKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown { what: "run kind", name: s.to_string() })
    }
}

/// Optimization hyperparameters shared by all variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Control-token stage.
    pub pet_lr: f64,
    pub pet_epochs: usize,
    /// Joint fine-tuning, DPO and the DPO warm start.
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub dpo_beta: f64,
    pub sft_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pet_lr: 1e-3,
            pet_epochs: 5,
            finetune_lr: 2e-5,
            finetune_epochs: 5,
            batch_size: 16,
            clip_norm: None,
            dpo_beta: crate::objectives::DPO_BETA,
            sft_epochs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub kind: RunKind,
    pub stages: Vec<StagePlan>,
    pub seed: u64,
}

impl TrainPlan {
    pub fn for_kind(kind: RunKind, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let stage = |name: &str, objective, learning_rate, epochs| StagePlan {
            name: name.to_string(),
            objective,
            learning_rate,
            epochs,
            batch_size: cfg.batch_size,
            clip_norm: cfg.clip_norm,
        };
        let pet = stage("pet", Objective::Pet, cfg.pet_lr, cfg.pet_epochs);
        let cg = stage("cg", Objective::Cg, cfg.finetune_lr, cfg.finetune_epochs);
        let stages = match kind {
            RunKind::Meet => vec![pet, cg],
            RunKind::FirstOnly => vec![pet],
            RunKind::SecondOnly | RunKind::Coh => vec![cg],
            RunKind::Dpo => vec![stage("dpo", Objective::Dpo, cfg.finetune_lr, cfg.finetune_epochs)],
        };
        let plan = Self { kind, stages, seed };
        for s in &plan.stages {
            s.validate()?;
        }
        Ok(plan)
    }

    /// Control-token kind compatibility.
    pub fn check_adapter(&self, kind: Option<AdapterKind>) -> Result<()> {
        let has_pet = self.stages.iter().any(|s| s.objective == Objective::Pet);
        match (self.kind, kind) {
            (_, Some(AdapterKind::Handcrafted)) if has_pet => {
                Err(invalid(format!("{} needs trainable control tokens; hand-crafted prefixes have none", self.kind)))
            }
            (RunKind::Coh, Some(k)) if k != AdapterKind::Handcrafted => Err(invalid("coh uses hand-crafted prefixes")),
            (RunKind::Dpo, Some(_)) => Err(invalid("dpo trains without control tokens")),
            (RunKind::Dpo, None) => Ok(()),
            (_, None) => Err(invalid(format!("{} needs control tokens", self.kind))),
            _ => Ok(()),
        }
    }
}
