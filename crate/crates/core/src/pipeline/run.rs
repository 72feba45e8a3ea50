//! Variant runs, base pretraining and evaluation dumps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::plan::{Objective, RunKind, StagePlan, TrainConfig, TrainPlan};
use super::train::{optimize, StageInput, StageSummary, TraceRow};
use crate::adapters::{init_lora, level_id, AdapterKind, ControlAdapter, ControlTokenSet, DatasetKind, default_lora_targets};
use crate::checkpoint::Checkpoint;
use crate::data::{hex, DataKind, Dataset, PreferenceExample};
use crate::diffcore::{stream, SeededRng};
use crate::error::{invalid, Result};
use crate::eval::Generation;
use crate::model::{generate_texts, ModelState, Tokenizer};
use crate::objectives::{quantize_scores, DpoConfig};

/// How control tokens are realized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AdapterSpec {
    Handcrafted { dataset: DatasetKind },
    SoftPrompt { length: usize },
    Lora { rank: usize, alpha: f64 },
}

impl AdapterSpec {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Self::Handcrafted { .. } => AdapterKind::Handcrafted,
            Self::SoftPrompt { .. } => AdapterKind::SoftPrompt,
            Self::Lora { .. } => AdapterKind::Lora,
        }
    }

    /// Fresh control tokens for `state`, plus `levels` extra ones for
    /// quantized pointwise data.
    pub fn build(&self, state: &ModelState, tok: &Tokenizer, levels: usize, seed: u64) -> Result<ControlTokenSet> {
        let mut rng = SeededRng::new(seed, stream::ADAPTER_INIT);
        match *self {
            Self::Handcrafted { dataset } => {
                let mut set = ControlTokenSet::handcrafted(dataset, tok);
                for k in 0..levels {
                    set.levels.push(ControlAdapter::handcrafted(&level_id(k), &format!("A level {k} response is"), tok));
                }
                set.validate()?;
                Ok(set)
            }
            Self::SoftPrompt { length } => ControlTokenSet::soft_prompts(state, tok, length)?.with_soft_levels(levels, state, tok, length),
            Self::Lora { rank, alpha } => {
                let mut set = ControlTokenSet::lora(state, rank, alpha, &mut rng)?;
                let targets = default_lora_targets(state);
                for k in 0..levels {
                    set.levels.push(init_lora(&level_id(k), rank, alpha, &targets, state, &mut rng)?);
                }
                set.validate()?;
                Ok(set)
            }
        }
    }
}

/// One training run request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub kind: RunKind,
    /// `None` only for DPO.
    pub adapter: Option<AdapterSpec>,
    pub train: TrainConfig,
    pub seed: u64,
    /// Control levels for pointwise data.
    pub levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: RunKind,
    pub seed: u64,
    pub adapter: Option<AdapterSpec>,
    pub stages: Vec<StagePlan>,
    pub summaries: Vec<StageSummary>,
    pub dataset_hash: String,
    pub base_hash: String,
    pub config_hash: String,
    pub checkpoint: Option<String>,
    pub checkpoint_sha256: String,
    pub loss_trace: Option<String>,
    pub wall_time_secs: f64,
}

/// A finished run. The kept checkpoint is the one after the last epoch.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub manifest: RunManifest,
    pub trace: Vec<TraceRow>,
    pub state: ModelState,
    pub controls: Option<ControlTokenSet>,
    /// Checkpoint digest at the start of each stage.
    pub stage_start_hashes: Vec<String>,
}

impl RunRecord {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { state: self.state.clone(), controls: self.controls.clone() }
    }

    /// Mean training loss per epoch, per stage.
    pub fn epoch_losses(&self) -> Vec<(String, Vec<f64>)> {
        self.manifest.summaries.iter().map(|s| (s.name.clone(), s.epoch_mean_loss.clone())).collect()
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn checkpoint_hash(state: &ModelState, controls: Option<&ControlTokenSet>) -> String {
    sha256_hex(&Checkpoint { state: state.clone(), controls: controls.cloned() }.to_bytes())
}

/// Digest of everything that determines a run's output.
pub fn config_hash(spec: &RunSpec, dataset_hash: &str, base_hash: &str) -> String {
    let body = serde_json::json!({ "spec": spec, "dataset": dataset_hash, "base": base_hash });
    sha256_hex(body.to_string().as_bytes())
}

/// Levels over the whole training split.
pub fn quantize_train_levels(train: &[PreferenceExample], k: usize) -> Result<Vec<usize>> {
    Ok(quantize_scores(train, k)?.levels)
}

fn check_data(objective: Objective, kind: DataKind, levels: usize) -> Result<()> {
    match (objective, kind) {
        (Objective::Dpo | Objective::Sft, DataKind::Pointwise) => Err(invalid(format!("{objective:?} needs pairwise data"))),
        (Objective::Pet | Objective::Cg, DataKind::Pointwise) if levels == 0 => Err(invalid("pointwise data needs at least one control level")),
        _ => Ok(()),
    }
}

/// Trains one variant starting from `base`. With `out_dir`, writes
/// `checkpoint.bin`, `loss_trace.csv` and `manifest.json` there.
pub fn run_variant(spec: &RunSpec, dataset: &Dataset, base: &ModelState, out_dir: Option<&Path>) -> Result<RunRecord> {
    let started = Instant::now();
    let tok = Tokenizer::new(base.config.vocab_size)?;
    let plan = TrainPlan::for_kind(spec.kind, &spec.train, spec.seed)?;
    plan.check_adapter(spec.adapter.map(|a| a.kind()))?;
    for s in &plan.stages {
        check_data(s.objective, dataset.kind, spec.levels)?;
    }
    let dataset_hash = dataset.content_hash();
    let base_hash = checkpoint_hash(base, None);
    let config_hash = config_hash(spec, &dataset_hash, &base_hash);
    let levels = match dataset.kind {
        DataKind::Pointwise => Some(quantize_train_levels(&dataset.train, spec.levels)?),
        DataKind::Pairwise => None,
    };
    let dpo = DpoConfig::new(spec.train.dpo_beta)?;

    let mut state = base.clone();
    let mut controls = match &spec.adapter {
        Some(a) => Some(a.build(base, &tok, if levels.is_some() { spec.levels } else { 0 }, spec.seed)?),
        None => None,
    };
    let mut trace = Vec::new();
    let mut summaries = Vec::new();
    let mut stage_start_hashes = Vec::new();

    let reference = if spec.kind == RunKind::Dpo {
        // Reference policy: the base tuned on preferred responses.
        let sft = StagePlan {
            name: "sft".into(),
            objective: Objective::Sft,
            learning_rate: spec.train.finetune_lr,
            epochs: spec.train.sft_epochs,
            batch_size: spec.train.batch_size,
            clip_norm: spec.train.clip_norm,
        };
        stage_start_hashes.push(checkpoint_hash(&state, None));
        let input = StageInput { data: &dataset.train, levels: None, reference: None, context: None, dpo, tok: &tok };
        let (summary, rows) = optimize(&mut state, None, &sft, 0, &input, spec.seed)?;
        summaries.push(summary);
        trace.extend(rows);
        Some(state.clone())
    } else {
        None
    };

    let offset = summaries.len();
    for (i, stage) in plan.stages.iter().enumerate() {
        stage_start_hashes.push(checkpoint_hash(&state, controls.as_ref()));
        let input = StageInput { data: &dataset.train, levels: levels.as_deref(), reference: reference.as_ref(), context: None, dpo, tok: &tok };
        let (summary, rows) = optimize(&mut state, controls.as_mut(), stage, offset + i, &input, spec.seed)?;
        summaries.push(summary);
        trace.extend(rows);
    }

    let mut stages = plan.stages.clone();
    if spec.kind == RunKind::Dpo {
        stages.insert(
            0,
            StagePlan {
                name: "sft".into(),
                objective: Objective::Sft,
                learning_rate: spec.train.finetune_lr,
                epochs: spec.train.sft_epochs,
                batch_size: spec.train.batch_size,
                clip_norm: spec.train.clip_norm,
            },
        );
    }
    let ckpt = Checkpoint { state, controls };
    let bytes = ckpt.to_bytes();
    let mut manifest = RunManifest {
        kind: spec.kind,
        seed: spec.seed,
        adapter: spec.adapter,
        stages,
        summaries,
        dataset_hash,
        base_hash,
        config_hash,
        checkpoint: None,
        checkpoint_sha256: sha256_hex(&bytes),
        loss_trace: None,
        wall_time_secs: 0.0,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let ckpt_path = dir.join("checkpoint.bin");
        std::fs::write(&ckpt_path, &bytes)?;
        let trace_path = dir.join("loss_trace.csv");
        write_trace(&trace_path, &trace)?;
        manifest.checkpoint = Some(path_string(&ckpt_path));
        manifest.loss_trace = Some(path_string(&trace_path));
    }
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(RunRecord { manifest, trace, state: ckpt.state, controls: ckpt.controls, stage_start_hashes })
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::from("stage,epoch,batch,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.stage, r.epoch, r.batch, r.loss));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Resolves `good`, `bad`, `level<k>` or `none`.
pub fn resolve_choice<'a>(controls: Option<&'a ControlTokenSet>, choice: &str) -> Result<Option<&'a ControlAdapter>> {
    match (choice, controls) {
        ("none", _) => Ok(None),
        (c, Some(set)) => set.by_role(c).map(Some),
        (c, None) => Err(invalid(format!("adapter choice {c} needs control tokens"))),
    }
}

/// One generation per prompt under the chosen control token.
pub fn generate_eval_dump(
    ckpt: &Checkpoint,
    prompts: &[String],
    choice: &str,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Generation>> {
    let adapter = resolve_choice(ckpt.controls.as_ref(), choice)?;
    let tok = Tokenizer::new(ckpt.state.config.vocab_size)?;
    let texts = generate_texts(&ckpt.state, adapter, &tok, prompts, temperature, max_len, seed)?;
    Ok(prompts
        .iter()
        .zip(texts)
        .map(|(p, r)| Generation { prompt: p.clone(), response: r, adapter: choice.to_string(), temperature })
        .collect())
}

/// Validation prompts of a dataset, in order.
pub fn validation_prompts(ds: &Dataset) -> Vec<String> {
    ds.validation.iter().map(|e| e.prompt().to_string()).collect()
}

/// Default output location for run artifacts.
pub fn run_dir(root: &Path, kind: RunKind, seed: u64) -> PathBuf {
    root.join(format!("{kind}-seed{seed}"))
}
