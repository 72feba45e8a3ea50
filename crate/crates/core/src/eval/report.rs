use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::compare::{compare, RewardPair, Verdict};
use super::Rewarder;
use crate::data::hex;
use crate::error::{invalid, Error, Result};

/// One generated response; a line of an evaluation dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generation {
    pub prompt: String,
    pub response: String,
    pub adapter: String,
    pub temperature: f64,
}

pub fn write_dump(path: &Path, rows: &[Generation]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<Vec<Generation>> {
    let f = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Schema { line: i + 1, msg: e.to_string() })?);
    }
    Ok(rows)
}

/// A file that fed a report, with its content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputArtifact {
    pub path: String,
    pub sha256: String,
}

impl InputArtifact {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self { path: path.display().to_string(), sha256: hex(&Sha256::digest(std::fs::read(path)?)) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateReport {
    pub evaluator: String,
    pub candidate: String,
    pub baseline: String,
    /// Compared examples (unjudged ones excluded).
    pub n: usize,
    pub win_pct: f64,
    pub lose_pct: f64,
    pub tie_pct: f64,
    pub delta: f64,
    /// Examples the evaluator could not score.
    #[serde(default)]
    pub unjudged: usize,
    #[serde(default)]
    pub inputs: Vec<InputArtifact>,
}

pub const CSV_HEADER: &str = "evaluator,baseline,n,win_pct,lose_pct,tie_pct,delta";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl WinRateReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            csv_field(&self.evaluator),
            csv_field(&self.baseline),
            self.n,
            self.win_pct,
            self.lose_pct,
            self.tie_pct,
            self.delta
        )
    }

    pub fn to_csv(reports: &[WinRateReport]) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Percentages and Δ from per-example verdicts.
pub fn winrate_from_verdicts(verdicts: &[Verdict], evaluator: &str, candidate: &str, baseline: &str) -> Result<WinRateReport> {
    let n = verdicts.len();
    if n == 0 {
        return Err(invalid("no examples to compare"));
    }
    let count = |v: Verdict| verdicts.iter().filter(|&&x| x == v).count() as f64;
    let pct = |c: f64| 100.0 * c / n as f64;
    let (win_pct, lose_pct, tie_pct) = (pct(count(Verdict::Win)), pct(count(Verdict::Lose)), pct(count(Verdict::Tie)));
    Ok(WinRateReport {
        evaluator: evaluator.to_string(),
        candidate: candidate.to_string(),
        baseline: baseline.to_string(),
        n,
        win_pct,
        lose_pct,
        tie_pct,
        delta: win_pct - lose_pct,
        unjudged: 0,
        inputs: Vec::new(),
    })
}

/// Checks that two output lists cover the same prompts in the same order.
pub(crate) fn check_aligned(a: &[Generation], b: &[Generation]) -> Result<()> {
    if a.len() != b.len() {
        return Err(invalid(format!("output counts differ: {} vs {}", a.len(), b.len())));
    }
    if let Some((i, (x, y))) = a.iter().zip(b).enumerate().find(|(_, (x, y))| x.prompt != y.prompt) {
        return Err(invalid(format!("prompt mismatch at row {i}: {:?} vs {:?}", x.prompt, y.prompt)));
    }
    Ok(())
}

/// Reward-based comparison of candidate `a` against baseline `b`.
pub fn winrate(a: &[Generation], b: &[Generation], rewarder: &dyn Rewarder, candidate: &str, baseline: &str) -> Result<WinRateReport> {
    check_aligned(a, b)?;
    let verdicts: Vec<Verdict> = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let r1 = rewarder.reward(&x.prompt, &x.response);
            let r2 = rewarder.reward(&y.prompt, &y.response);
            compare(RewardPair { r1, r2 })
        })
        .collect();
    winrate_from_verdicts(&verdicts, &rewarder.id(), candidate, baseline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticTask;

    fn gen(p: &str, r: &str) -> Generation {
        Generation { prompt: p.into(), response: r.into(), adapter: "good".into(), temperature: 0.0 }
    }

    #[test]
    fn arithmetic() {
        use Verdict::*;
        let v = [Win, Win, Win, Win, Win, Win, Lose, Lose, Lose, Tie];
        let r = winrate_from_verdicts(&v, "e", "a", "b").unwrap();
        assert_eq!((r.win_pct, r.lose_pct, r.tie_pct, r.delta), (60.0, 30.0, 10.0, 30.0));
        let r = winrate_from_verdicts(&[Tie; 7], "e", "a", "b").unwrap();
        assert_eq!((r.win_pct, r.lose_pct, r.tie_pct, r.delta), (0.0, 0.0, 100.0, 0.0));
        assert!(winrate_from_verdicts(&[], "e", "a", "b").is_err());
    }

    #[test]
    fn self_comparison_ties() {
        let a = vec![gen("cab", "abc"), gen("zy", "zy"), gen("qq", "x")];
        let r = winrate(&a, &a, &SyntheticTask::sort(), "m", "m").unwrap();
        assert_eq!(r.tie_pct, 100.0);
        assert_eq!(r.delta, 0.0);
    }

    #[test]
    fn reward_gaps_decide() {
        let a = vec![gen("cab", "abc"), gen("dcba", "dcba")];
        let b = vec![gen("cab", "cab"), gen("dcba", "abcd")];
        let r = winrate(&a, &b, &SyntheticTask::sort(), "m", "base").unwrap();
        assert_eq!((r.win_pct, r.lose_pct), (50.0, 50.0));
        assert_eq!(r.evaluator, "oracle:sort");
    }

    #[test]
    fn mismatched_prompts_rejected() {
        let a = vec![gen("a", "a"), gen("b", "b")];
        let b = vec![gen("a", "a"), gen("c", "c")];
        let err = winrate(&a, &b, &SyntheticTask::sort(), "x", "y").unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }

    #[test]
    fn dump_round_trip_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let rows = vec![gen("p1", "r1"), gen("p,2", "r\"2")];
        write_dump(&p, &rows).unwrap();
        assert_eq!(read_dump(&p).unwrap(), rows);
        let r = winrate_from_verdicts(&[Verdict::Win], "oracle:sort", "a", "co,h").unwrap();
        let csv = WinRateReport::to_csv(&[r]);
        assert_eq!(csv, "evaluator,baseline,n,win_pct,lose_pct,tie_pct,delta\noracle:sort,\"co,h\",1,100,0,0,100\n");
    }
}
