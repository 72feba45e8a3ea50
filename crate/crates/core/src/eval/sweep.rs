use serde::{Deserialize, Serialize};

use super::report::{winrate, Generation, WinRateReport};
use super::Rewarder;
use crate::adapters::ControlAdapter;
use crate::error::{invalid, Result};
use crate::model::{generate_texts, ModelState, Tokenizer};

/// Temperatures evaluated when none are given.
pub const DEFAULT_TEMPS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub temperature: f64,
    pub delta: f64,
    pub report: WinRateReport,
}

/// Samples the baseline's prompts at each temperature (same seed for every
/// temperature) and reports Δ against the fixed baseline outputs, one row per
/// temperature in input order.
#[allow(clippy::too_many_arguments)]
pub fn temperature_sweep(
    state: &ModelState,
    adapter: Option<&ControlAdapter>,
    tok: &Tokenizer,
    temps: &[f64],
    rewarder: &dyn Rewarder,
    baseline: &[Generation],
    max_len: usize,
    seed: u64,
    candidate: &str,
    baseline_id: &str,
) -> Result<Vec<SweepRow>> {
    if temps.is_empty() {
        return Err(invalid("no temperatures to sweep"));
    }
    if let Some(t) = temps.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
        return Err(invalid(format!("temperature must be a finite non-negative number, got {t}")));
    }
    let prompts: Vec<String> = baseline.iter().map(|g| g.prompt.clone()).collect();
    let label = adapter.map_or_else(|| "none".to_string(), |a| a.id.clone());
    let mut rows = Vec::with_capacity(temps.len());
    for &t in temps {
        let texts = generate_texts(state, adapter, tok, &prompts, t, max_len, seed)?;
        let outs: Vec<Generation> = prompts
            .iter()
            .zip(texts)
            .map(|(p, r)| Generation { prompt: p.clone(), response: r, adapter: label.clone(), temperature: t })
            .collect();
        let report = winrate(&outs, baseline, rewarder, candidate, baseline_id)?;
        rows.push(SweepRow { temperature: t, delta: report.delta, report });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("temperature,delta\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", r.temperature, r.delta));
    }
    s
}
