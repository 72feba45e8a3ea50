//! Declarative run configuration. Every field has a default and unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use ctrlgen::adapters::{AdapterKind, DatasetKind};
use ctrlgen::data::{DataKind, SyntheticTask};
use ctrlgen::model::ModelConfig;
use ctrlgen::pipeline::{AdapterSpec, BaseSpec, PretrainConfig, RunKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Output root when neither `--out` nor the config names one.
pub const OUT_ENV: &str = "CTRLGEN_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub data: DataConfig,
    pub pretrain: PretrainSection,
    pub train: TrainConfig,
    pub run: RunSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: None,
            model: ModelConfig::micro(),
            adapter: AdapterConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainSection::default(),
            train: TrainConfig::default(),
            run: RunSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    /// Soft-prompt length.
    pub length: usize,
    pub rank: usize,
    /// LoRA scale; defaults to the rank.
    pub alpha: Option<f64>,
    /// Source of hand-crafted prefixes.
    pub prefixes: DatasetKind,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { kind: AdapterKind::Lora, length: 8, rank: 4, alpha: None, prefixes: DatasetKind::Synthetic }
    }
}

impl AdapterConfig {
    pub fn spec(&self) -> AdapterSpec {
        match self.kind {
            AdapterKind::Handcrafted => AdapterSpec::Handcrafted { dataset: self.prefixes },
            AdapterKind::SoftPrompt => AdapterSpec::SoftPrompt { length: self.length },
            AdapterKind::Lora => AdapterSpec::Lora { rank: self.rank, alpha: self.alpha.unwrap_or(self.rank as f64) },
        }
    }

    /// Adapter a variant trains with: CoH always uses hand-crafted
    /// prefixes, DPO none.
    pub fn for_kind(&self, kind: RunKind) -> Option<AdapterSpec> {
        match kind {
            RunKind::Dpo => None,
            RunKind::Coh => Some(AdapterSpec::Handcrafted { dataset: self.prefixes }),
            _ => Some(self.spec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub task: String,
    pub examples: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// JSONL file to train on instead of a synthetic task.
    pub path: Option<PathBuf>,
    pub format: DataKind,
    /// Token budget for file records.
    pub max_tokens: usize,
    /// Control levels for pointwise data.
    pub levels: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: "sort".into(),
            examples: 2000,
            min_len: 3,
            max_len: 8,
            path: None,
            format: DataKind::Pairwise,
            max_tokens: 256,
            levels: 3,
        }
    }
}

impl DataConfig {
    pub fn task(&self) -> Result<SyntheticTask, CliError> {
        let (min_len, max_len) = (self.min_len, self.max_len);
        match self.task.as_str() {
            "sort" => Ok(SyntheticTask::Sort { min_len, max_len }),
            "upper" => Ok(SyntheticTask::Upper { min_len, max_len }),
            other => Err(CliError::Usage(format!("unknown task {other:?} (expected sort or upper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub examples: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_context: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        let b = BaseSpec::new(SyntheticTask::sort());
        Self {
            examples: b.examples,
            seed: b.seed,
            learning_rate: p.learning_rate,
            epochs: p.epochs,
            batch_size: p.batch_size,
            max_context: p.max_context,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub kind: RunKind,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { kind: RunKind::Meet, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub temperature: f64,
    pub max_len: usize,
    /// Sampling seed for generation.
    pub sample_seed: u64,
    pub timeout_secs: u64,
    pub concurrency: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { temperature: 0.0, max_len: 32, sample_seed: 0, timeout_secs: 60, concurrency: 4 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn base_spec(&self) -> Result<BaseSpec, CliError> {
        let p = &self.pretrain;
        Ok(BaseSpec {
            model: self.model.clone(),
            task: self.data.task()?,
            examples: p.examples,
            seed: p.seed,
            pretrain: PretrainConfig {
                learning_rate: p.learning_rate,
                epochs: p.epochs,
                batch_size: p.batch_size,
                max_context: p.max_context,
            },
        })
    }

    /// `--out`, then the config file, then the environment, then `runs`.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}
