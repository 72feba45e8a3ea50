//! Control tokens: hand-crafted text prefixes, soft prompts and LoRA weight
//! sets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{SeededRng, Tensor};
use crate::error::{invalid, Error, Result};
use crate::model::{layer_param, ModelState, Tokenizer};

/// Standard deviation of freshly drawn LoRA `A` entries.
pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Handcrafted,
    SoftPrompt,
    Lora,
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdapterKind::Handcrafted => "handcrafted",
            AdapterKind::SoftPrompt => "soft_prompt",
            AdapterKind::Lora => "lora",
        })
    }
}

/// One low-rank pair for a `d_out × d_in` target weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraEntry {
    /// `r × d_in`
    pub a: Tensor,
    /// `d_out × r`
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraWeights {
    pub rank: usize,
    pub alpha: f64,
    /// Keyed by the base parameter name the delta applies to.
    pub entries: BTreeMap<String, LoraEntry>,
}

impl LoraWeights {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(α/r)·B·A` for one target.
    pub fn delta(&self, target: &str) -> Result<Tensor> {
        let e = self
            .entries
            .get(target)
            .ok_or_else(|| Error::Unknown { what: "LoRA target", name: target.to_string() })?;
        let mut d = e.b.matmul(&e.a)?;
        let s = self.scale();
        d.data_mut().iter_mut().for_each(|v| *v *= s);
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterBody {
    Handcrafted { text: String, ids: Vec<usize> },
    /// `L × hidden_dim` rows prepended to the token embeddings.
    SoftPrompt { rows: Tensor },
    Lora(LoraWeights),
}

/// A control token. `id` namespaces its trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlAdapter {
    pub id: String,
    pub body: AdapterBody,
}

impl ControlAdapter {
    pub fn kind(&self) -> AdapterKind {
        match self.body {
            AdapterBody::Handcrafted { .. } => AdapterKind::Handcrafted,
            AdapterBody::SoftPrompt { .. } => AdapterKind::SoftPrompt,
            AdapterBody::Lora(_) => AdapterKind::Lora,
        }
    }

    pub fn handcrafted(id: &str, text: &str, tokenizer: &Tokenizer) -> Self {
        Self {
            id: id.to_string(),
            body: AdapterBody::Handcrafted { text: text.to_string(), ids: tokenizer.encode(text) },
        }
    }

    pub fn prompt_param(&self) -> String {
        format!("{}.prompt", self.id)
    }

    pub fn lora_param(&self, target: &str, which: char) -> String {
        format!("{}.lora.{target}.{which}", self.id)
    }

    /// Trainable tensors with their fully-qualified names.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        match &self.body {
            AdapterBody::Handcrafted { .. } => Vec::new(),
            AdapterBody::SoftPrompt { rows } => vec![(self.prompt_param(), rows)],
            AdapterBody::Lora(w) => w
                .entries
                .iter()
                .flat_map(|(t, e)| [(self.lora_param(t, 'a'), &e.a), (self.lora_param(t, 'b'), &e.b)])
                .collect(),
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let prompt = self.prompt_param();
        let prefix = format!("{}.lora.", self.id);
        match &mut self.body {
            AdapterBody::Handcrafted { .. } => None,
            AdapterBody::SoftPrompt { rows } => (name == prompt).then_some(rows),
            AdapterBody::Lora(w) => {
                let rest = name.strip_prefix(&prefix)?;
                let (target, which) = rest.rsplit_once('.')?;
                let e = w.entries.get_mut(target)?;
                match which {
                    "a" => Some(&mut e.a),
                    "b" => Some(&mut e.b),
                    _ => None,
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Context positions consumed ahead of the prompt.
    pub fn prefix_len(&self) -> usize {
        match &self.body {
            AdapterBody::Handcrafted { ids, .. } => ids.len(),
            AdapterBody::SoftPrompt { rows } => rows.rows(),
            AdapterBody::Lora(_) => 0,
        }
    }

    /// Kind plus size hyperparameters, e.g. `soft_prompt(L=8)`.
    pub fn describe(&self) -> String {
        match &self.body {
            AdapterBody::Handcrafted { text, .. } => format!("handcrafted({text:?})"),
            AdapterBody::SoftPrompt { rows } => format!("soft_prompt(L={})", rows.rows()),
            AdapterBody::Lora(w) => format!("lora(r={}, alpha={})", w.rank, w.alpha),
        }
    }
}

/// Soft prompt whose rows tile the embeddings of `word`'s tokens.
pub fn init_soft_prompt(id: &str, word: &str, length: usize, embeddings: &Tensor, tokenizer: &Tokenizer) -> Result<ControlAdapter> {
    if length == 0 {
        return Err(invalid("soft prompt length must be at least 1"));
    }
    let ids = tokenizer.encode(word);
    if ids.is_empty() {
        return Err(invalid("soft prompt word tokenizes to nothing"));
    }
    let d = embeddings.cols();
    let mut rows = Vec::with_capacity(length * d);
    for i in 0..length {
        rows.extend_from_slice(embeddings.row(ids[i % ids.len()]));
    }
    Ok(ControlAdapter { id: id.to_string(), body: AdapterBody::SoftPrompt { rows: Tensor::matrix(length, d, rows)? } })
}

/// Query and value projections of every layer.
pub fn default_lora_targets(state: &ModelState) -> Vec<String> {
    (0..state.config.n_layers)
        .flat_map(|l| [layer_param(l, "attn.wq"), layer_param(l, "attn.wv")])
        .collect()
}

/// Fresh LoRA set: `A ~ N(0, 0.02²)`, `B = 0`.
pub fn init_lora(id: &str, rank: usize, alpha: f64, targets: &[String], state: &ModelState, rng: &mut SeededRng) -> Result<ControlAdapter> {
    if rank == 0 {
        return Err(invalid("LoRA rank must be at least 1"));
    }
    if targets.is_empty() {
        return Err(invalid("LoRA needs at least one target"));
    }
    let mut entries = BTreeMap::new();
    for t in targets {
        let w = state.param(t)?;
        let [d_out, d_in] = w.shape() else {
            return Err(invalid(format!("LoRA target {t} is not a matrix")));
        };
        if rank > (*d_out).min(*d_in) {
            return Err(invalid(format!("LoRA rank {rank} exceeds min dimension of target {t} {:?}", w.shape())));
        }
        let a = Tensor::matrix(rank, *d_in, (0..rank * d_in).map(|_| LORA_INIT_STD * rng.normal()).collect())?;
        let b = Tensor::zeros(&[*d_out, rank]);
        entries.insert(t.clone(), LoraEntry { a, b });
    }
    Ok(ControlAdapter { id: id.to_string(), body: AdapterBody::Lora(LoraWeights { rank, alpha, entries }) })
}

/// `W·x + (α/r)·B·(A·x)` without forming the merged matrix.
pub fn lora_effective_forward(w: &Tensor, entry: &LoraEntry, scale: f64, x: &[f64]) -> Result<Vec<f64>> {
    let [d_out, d_in] = w.shape() else {
        return Err(Error::Shape { op: "lora_forward", detail: format!("W {:?}", w.shape()) });
    };
    let r = entry.a.rows();
    if x.len() != *d_in || entry.a.shape() != [r, *d_in] || entry.b.shape() != [*d_out, r] {
        return Err(Error::Shape {
            op: "lora_forward",
            detail: format!("W {:?}, A {:?}, B {:?}, x [{}]", w.shape(), entry.a.shape(), entry.b.shape(), x.len()),
        });
    }
    let dot = |row: &[f64], v: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let ax: Vec<f64> = (0..r).map(|i| dot(entry.a.row(i), x)).collect();
    Ok((0..*d_out).map(|o| dot(w.row(o), x) + scale * dot(entry.b.row(o), &ax)).collect())
}

/// New state with `W + (α/r)·B·A` folded into every target.
///
/// Merging is additive: merging the same adapter twice adds the delta twice.
/// `merge_count` on the returned state records how many merges happened.
pub fn merge_lora(state: &ModelState, adapter: &ControlAdapter) -> Result<ModelState> {
    let AdapterBody::Lora(w) = &adapter.body else {
        return Err(invalid(format!("cannot merge a {} adapter", adapter.kind())));
    };
    let mut merged = state.clone();
    for target in w.entries.keys() {
        let delta = w.delta(target)?;
        let p = merged.param_mut(target)?;
        if p.shape() != delta.shape() {
            return Err(Error::Shape { op: "merge_lora", detail: format!("{target}: {:?} vs {:?}", p.shape(), delta.shape()) });
        }
        p.axpy(1.0, &delta);
    }
    merged.merge_count += 1;
    Ok(merged)
}

/// Source of hand-crafted control prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Dialogue,
    Summary,
    Synthetic,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dialogue" => Ok(Self::Dialogue),
            "summary" => Ok(Self::Summary),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::Unknown { what: "dataset kind", name: other.to_string() }),
        }
    }
}

/// `θ_c^w` / `θ_c^l`, plus optional per-level adapters for quantized
/// pointwise scores (level `K−1` is the preferred one).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTokenSet {
    pub good: ControlAdapter,
    pub bad: ControlAdapter,
    pub levels: Vec<ControlAdapter>,
}

pub const GOOD_ID: &str = "ctrl.good";
pub const BAD_ID: &str = "ctrl.bad";

pub fn level_id(k: usize) -> String {
    format!("ctrl.level{k}")
}

impl ControlTokenSet {
    pub fn new(good: ControlAdapter, bad: ControlAdapter) -> Result<Self> {
        let set = Self { good, bad, levels: Vec::new() };
        set.validate()?;
        Ok(set)
    }

    pub fn kind(&self) -> AdapterKind {
        self.good.kind()
    }

    pub fn all(&self) -> impl Iterator<Item = &ControlAdapter> {
        [&self.good, &self.bad].into_iter().chain(self.levels.iter())
    }

    pub fn all_mut(&mut self) -> impl Iterator<Item = &mut ControlAdapter> {
        [&mut self.good, &mut self.bad].into_iter().chain(self.levels.iter_mut())
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        self.all().flat_map(ControlAdapter::params).collect()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.all_mut().find_map(|a| a.param_mut(name))
    }

    pub fn param_count(&self) -> usize {
        self.all().map(ControlAdapter::param_count).sum()
    }

    /// Adapter by role: `good`, `bad` or `level<k>`.
    pub fn by_role(&self, role: &str) -> Result<&ControlAdapter> {
        match role {
            "good" => Ok(&self.good),
            "bad" => Ok(&self.bad),
            r => r
                .strip_prefix("level")
                .and_then(|k| k.parse::<usize>().ok())
                .and_then(|k| self.levels.get(k))
                .ok_or_else(|| Error::Unknown { what: "adapter choice", name: role.to_string() }),
        }
    }

    /// Same kind and size everywhere; distinct parameter namespaces.
    pub fn validate(&self) -> Result<()> {
        let shape_sig = |a: &ControlAdapter| -> Vec<Vec<usize>> { a.params().iter().map(|(_, t)| t.shape().to_vec()).collect() };
        let mut ids = std::collections::BTreeSet::new();
        for a in self.all() {
            if a.kind() != self.good.kind() {
                return Err(invalid(format!("adapter {} is {}, expected {}", a.id, a.kind(), self.good.kind())));
            }
            if shape_sig(a) != shape_sig(&self.good) {
                return Err(invalid(format!("adapter {} differs in size from {}", a.id, self.good.id)));
            }
            if !ids.insert(a.id.clone()) {
                return Err(invalid(format!("duplicate adapter id {}", a.id)));
            }
        }
        Ok(())
    }

    /// Hand-crafted prefixes for a dataset kind.
    pub fn handcrafted(kind: DatasetKind, tokenizer: &Tokenizer) -> Self {
        let noun = match kind {
            DatasetKind::Dialogue => "conversation",
            DatasetKind::Summary => "summary",
            DatasetKind::Synthetic => "response",
        };
        Self {
            good: ControlAdapter::handcrafted(GOOD_ID, &format!("A good {noun} is"), tokenizer),
            bad: ControlAdapter::handcrafted(BAD_ID, &format!("A bad {noun} is"), tokenizer),
            levels: Vec::new(),
        }
    }

    /// Soft prompts of length `length` initialized from "good" and "bad".
    pub fn soft_prompts(state: &ModelState, tokenizer: &Tokenizer, length: usize) -> Result<Self> {
        let emb = state.token_embeddings();
        Self::new(
            init_soft_prompt(GOOD_ID, "good", length, emb, tokenizer)?,
            init_soft_prompt(BAD_ID, "bad", length, emb, tokenizer)?,
        )
    }

    /// Fresh LoRA pairs on the default targets.
    pub fn lora(state: &ModelState, rank: usize, alpha: f64, rng: &mut SeededRng) -> Result<Self> {
        let targets = default_lora_targets(state);
        let good = init_lora(GOOD_ID, rank, alpha, &targets, state, rng)?;
        let bad = init_lora(BAD_ID, rank, alpha, &targets, state, rng)?;
        Self::new(good, bad)
    }

    /// Adds `k` soft-prompt levels seeded from the words `level0..level{k-1}`.
    pub fn with_soft_levels(mut self, k: usize, state: &ModelState, tokenizer: &Tokenizer, length: usize) -> Result<Self> {
        for i in 0..k {
            self.levels.push(init_soft_prompt(&level_id(i), &format!("level{i}"), length, state.token_embeddings(), tokenizer)?);
        }
        self.validate()?;
        Ok(self)
    }
}
