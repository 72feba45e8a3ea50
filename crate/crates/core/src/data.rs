//! Preference data: synthetic tasks with a programmatic reward, and JSONL
//! ingestion of pairwise / pointwise files.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{stream, SeededRng};
use crate::error::{invalid, Error, Result};
use crate::model::Tokenizer;

/// One training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PreferenceExample {
    Pairwise { prompt: String, chosen: String, rejected: String },
    Pointwise { prompt: String, response: String, score: f64 },
}

impl PreferenceExample {
    pub fn prompt(&self) -> &str {
        match self {
            Self::Pairwise { prompt, .. } | Self::Pointwise { prompt, .. } => prompt,
        }
    }

    pub fn kind(&self) -> DataKind {
        match self {
            Self::Pairwise { .. } => DataKind::Pairwise,
            Self::Pointwise { .. } => DataKind::Pointwise,
        }
    }

    /// Tokens the longest training sequence for this record occupies,
    /// control prefix excluded.
    pub fn token_len(&self, tok: &Tokenizer) -> usize {
        let p = tok.prompt_ids(self.prompt()).len();
        let r = match self {
            Self::Pairwise { chosen, rejected, .. } => chosen.len().max(rejected.len()),
            Self::Pointwise { response, .. } => response.len(),
        };
        // prompt + response + EOS, minus the final target which is never fed
        p + r
    }

    fn validate(&self) -> std::result::Result<(), String> {
        match self {
            Self::Pairwise { prompt, chosen, rejected } => {
                if prompt.is_empty() || chosen.is_empty() || rejected.is_empty() {
                    return Err("empty field".into());
                }
                if chosen == rejected {
                    return Err("chosen equals rejected".into());
                }
            }
            Self::Pointwise { prompt, response, score } => {
                if prompt.is_empty() || response.is_empty() {
                    return Err("empty field".into());
                }
                if !score.is_finite() {
                    return Err("score is not finite".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Pairwise,
    Pointwise,
}

impl std::str::FromStr for DataKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairwise" => Ok(Self::Pairwise),
            "pointwise" => Ok(Self::Pointwise),
            other => Err(Error::Unknown { what: "data kind", name: other.to_string() }),
        }
    }
}

/// Synthetic preference tasks. Length ranges are inclusive letter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum SyntheticTask {
    /// Preferred: letters sorted ascending. Rejected: a non-sorted permutation.
    Sort { min_len: usize, max_len: usize },
    /// Preferred: uppercased copy. Rejected: at least one letter left lowercase.
    Upper { min_len: usize, max_len: usize },
}

impl SyntheticTask {
    pub fn sort() -> Self {
        Self::Sort { min_len: 3, max_len: 8 }
    }

    pub fn upper() -> Self {
        Self::Upper { min_len: 3, max_len: 8 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sort { .. } => "sort",
            Self::Upper { .. } => "upper",
        }
    }

    fn range(&self) -> (usize, usize) {
        match *self {
            Self::Sort { min_len, max_len } | Self::Upper { min_len, max_len } => (min_len, max_len),
        }
    }

    /// Programmatic reward in `[0, 1]`.
    pub fn reward(&self, prompt: &str, response: &str) -> f64 {
        match self {
            Self::Sort { .. } => sort_reward(prompt, response),
            Self::Upper { .. } => upper_reward(prompt, response),
        }
    }

    fn example(&self, rng: &mut SeededRng, prompt: &str) -> PreferenceExample {
        let chars: Vec<char> = prompt.chars().collect();
        let (chosen, rejected) = match self {
            Self::Sort { .. } => {
                let mut sorted = chars.clone();
                sorted.sort_unstable();
                let mut perm = chars;
                loop {
                    rng.shuffle(&mut perm);
                    if perm != sorted {
                        break;
                    }
                }
                (sorted.into_iter().collect(), perm.into_iter().collect())
            }
            Self::Upper { .. } => {
                let up: String = prompt.to_ascii_uppercase();
                let mut wrong: Vec<char> = up.chars().collect();
                loop {
                    let mut flipped = false;
                    for (c, orig) in wrong.iter_mut().zip(&chars) {
                        if rng.uniform() < 0.5 {
                            *c = *orig;
                            flipped = true;
                        } else {
                            *c = orig.to_ascii_uppercase();
                        }
                    }
                    if flipped {
                        break;
                    }
                }
                (up, wrong.into_iter().collect())
            }
        };
        PreferenceExample::Pairwise { prompt: prompt.to_string(), chosen, rejected }
    }
}

impl std::str::FromStr for SyntheticTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sort" => Ok(Self::sort()),
            "upper" => Ok(Self::upper()),
            other => Err(Error::Unknown { what: "task", name: other.to_string() }),
        }
    }
}

fn sorted_chars(s: &str) -> Vec<char> {
    let mut v: Vec<char> = s.chars().collect();
    v.sort_unstable();
    v
}

fn sort_reward(prompt: &str, response: &str) -> f64 {
    if sorted_chars(prompt) != sorted_chars(response) {
        return 0.0;
    }
    let r: Vec<char> = response.chars().collect();
    if r.len() < 2 {
        return 1.0;
    }
    let ok = r.windows(2).filter(|w| w[0] <= w[1]).count();
    ok as f64 / (r.len() - 1) as f64
}

fn upper_reward(prompt: &str, response: &str) -> f64 {
    let want: Vec<char> = prompt.to_ascii_uppercase().chars().collect();
    let got: Vec<char> = response.chars().collect();
    if want.len() != got.len() || want.is_empty() {
        return 0.0;
    }
    want.iter().zip(&got).filter(|(a, b)| a == b).count() as f64 / want.len() as f64
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { task: SyntheticTask, seed: u64 },
    File { path: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DataKind,
    pub provenance: Provenance,
    pub train: Vec<PreferenceExample>,
    pub validation: Vec<PreferenceExample>,
    /// Records dropped for exceeding the token budget.
    pub dropped: usize,
    /// Duplicate records removed.
    pub duplicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: DataKind,
    pub counts: SplitCounts,
    pub dropped: usize,
    pub duplicates: usize,
    pub seed: Option<u64>,
    pub task: Option<String>,
    pub source: Option<String>,
    /// SHA-256 over the canonical JSONL of both splits.
    pub content_hash: String,
}

impl Dataset {
    pub fn manifest(&self) -> DatasetManifest {
        let (seed, task, source) = match &self.provenance {
            Provenance::Synthetic { task, seed } => (Some(*seed), Some(task.name().to_string()), None),
            Provenance::File { path } => (None, None, Some(path.clone())),
        };
        DatasetManifest {
            kind: self.kind,
            counts: SplitCounts { train: self.train.len(), validation: self.validation.len() },
            dropped: self.dropped,
            duplicates: self.duplicates,
            seed,
            task,
            source,
            content_hash: self.content_hash(),
        }
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (tag, part) in [("train", &self.train), ("validation", &self.validation)] {
            h.update(tag.as_bytes());
            for ex in part {
                h.update(serde_json::to_vec(ex).expect("example serializes"));
                h.update(b"\n");
            }
        }
        hex(&h.finalize())
    }

    /// Prompts that appear in both splits (always empty for datasets built
    /// here).
    pub fn split_overlap(&self) -> Vec<String> {
        let train: HashSet<&str> = self.train.iter().map(PreferenceExample::prompt).collect();
        let mut both: BTreeSet<String> = BTreeSet::new();
        for ex in &self.validation {
            if train.contains(ex.prompt()) {
                both.insert(ex.prompt().to_string());
            }
        }
        both.into_iter().collect()
    }

    /// Writes `train.jsonl`, `validation.jsonl` and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, part) in [("train.jsonl", &self.train), ("validation.jsonl", &self.validation)] {
            let mut out = String::new();
            for ex in part {
                out.push_str(&serde_json::to_string(&FileRecord::from(ex))?);
                out.push('\n');
            }
            std::fs::write(dir.join(name), out)?;
        }
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest())?)?;
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic synthetic pairwise dataset with a 90/10 split.
pub fn gen_synthetic(task: SyntheticTask, n: usize, seed: u64) -> Result<Dataset> {
    let (lo, hi) = task.range();
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    if hi < lo || lo < 2 {
        return Err(invalid(format!("degenerate length range {lo}..={hi} (need 2 <= min <= max)")));
    }
    let mut rng = SeededRng::new(seed, stream::DATA);
    let mut seen = HashSet::with_capacity(n);
    let mut examples = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while examples.len() < n {
        attempts += 1;
        if attempts > 100 * n + 1000 {
            return Err(invalid(format!("cannot draw {n} distinct prompts from lengths {lo}..={hi}")));
        }
        let len = rng.range_inclusive(lo, hi);
        let prompt: String = (0..len).map(|_| (b'a' + rng.below(26) as u8) as char).collect();
        // A prompt needs two distinct letters to have a wrong ordering.
        if matches!(task, SyntheticTask::Sort { .. }) && prompt.chars().all(|c| Some(c) == prompt.chars().next()) {
            continue;
        }
        if !seen.insert(prompt.clone()) {
            continue;
        }
        examples.push(task.example(&mut rng, &prompt));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed, stream::SPLIT).shuffle(&mut order);
    let n_val = n / 10;
    let validation = order[..n_val].iter().map(|&i| examples[i].clone()).collect();
    let train = order[n_val..].iter().map(|&i| examples[i].clone()).collect();
    Ok(Dataset { kind: DataKind::Pairwise, provenance: Provenance::Synthetic { task, seed }, train, validation, dropped: 0, duplicates: 0 })
}

/// Pointwise view of a synthetic dataset: each response scored by the task
/// reward.
pub fn to_pointwise(ds: &Dataset, task: SyntheticTask) -> Dataset {
    let conv = |part: &[PreferenceExample]| -> Vec<PreferenceExample> {
        part.iter()
            .flat_map(|ex| match ex {
                PreferenceExample::Pairwise { prompt, chosen, rejected } => [chosen, rejected]
                    .into_iter()
                    .map(|r| PreferenceExample::Pointwise { prompt: prompt.clone(), response: r.clone(), score: task.reward(prompt, r) })
                    .collect::<Vec<_>>(),
                p @ PreferenceExample::Pointwise { .. } => vec![p.clone()],
            })
            .collect()
    };
    Dataset { kind: DataKind::Pointwise, train: conv(&ds.train), validation: conv(&ds.validation), ..ds.clone() }
}

/// On-disk line shapes.
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum FileRecord {
    Pairwise { prompt: String, chosen: String, rejected: String },
    Pointwise { prompt: String, response: String, score: f64 },
}

impl From<&PreferenceExample> for FileRecord {
    fn from(ex: &PreferenceExample) -> Self {
        match ex.clone() {
            PreferenceExample::Pairwise { prompt, chosen, rejected } => Self::Pairwise { prompt, chosen, rejected },
            PreferenceExample::Pointwise { prompt, response, score } => Self::Pointwise { prompt, response, score },
        }
    }
}

#[derive(Deserialize)]
struct PairLine {
    prompt: String,
    chosen: String,
    rejected: String,
}

#[derive(Deserialize)]
struct PointLine {
    prompt: String,
    response: String,
    score: f64,
}

/// Loads a JSONL preference file. Records longer than `max_tokens` (prompt
/// plus response, control prefix excluded) are dropped and counted; exact
/// duplicates are removed and counted. Prompts are split 90/10 by a hash of
/// the prompt text, so equal prompts always land in the same split.
pub fn load_jsonl(path: &Path, kind: DataKind, max_tokens: usize, tok: &Tokenizer) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut examples = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let (mut dropped, mut duplicates, mut lines) = (0, 0, 0);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        let schema = |e: serde_json::Error| Error::Schema { line: no, msg: e.to_string() };
        let ex = match kind {
            DataKind::Pairwise => {
                let r: PairLine = serde_json::from_str(&line).map_err(schema)?;
                PreferenceExample::Pairwise { prompt: r.prompt, chosen: r.chosen, rejected: r.rejected }
            }
            DataKind::Pointwise => {
                let r: PointLine = serde_json::from_str(&line).map_err(schema)?;
                PreferenceExample::Pointwise { prompt: r.prompt, response: r.response, score: r.score }
            }
        };
        ex.validate().map_err(|msg| Error::Schema { line: no, msg })?;
        if ex.token_len(tok) > max_tokens {
            dropped += 1;
            continue;
        }
        if !seen.insert(serde_json::to_string(&ex)?) {
            duplicates += 1;
            continue;
        }
        examples.push(ex);
    }
    if lines == 0 {
        return Err(invalid(format!("{} contains no records", path.display())));
    }
    let (validation, train) = examples.into_iter().partition(|ex| Sha256::digest(ex.prompt().as_bytes())[0] % 10 == 0);
    Ok(Dataset {
        kind,
        provenance: Provenance::File { path: path.display().to_string() },
        train,
        validation,
        dropped,
        duplicates,
    })
}
