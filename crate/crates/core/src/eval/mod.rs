//! Evaluation: reward-based win/lose/tie with a tie band, Δ reports, Rouge,
//! two-order judge aggregation, remote judging and temperature sweeps.

mod compare;
mod judge;
mod report;
mod rouge;
mod sweep;

pub use compare::{aggregate_two_orders, compare, sigmoid, RewardPair, Verdict, TIE_BAND};
pub use judge::{parse_verdict, render_template, remote_judge, JudgeOutcome, JudgeRequest, JudgeResponse, RemoteJudge, TemplateId};
pub use report::{read_dump, winrate, winrate_from_verdicts, write_dump, Generation, InputArtifact, WinRateReport};
pub use rouge::{rouge_avg, rouge_l, rouge_n, tokenize, RougeScore};
pub use sweep::{sweep_csv, temperature_sweep, SweepRow, DEFAULT_TEMPS};

use crate::data::SyntheticTask;

/// Anything that scores a response to a prompt.
pub trait Rewarder: Sync {
    fn id(&self) -> String;
    fn reward(&self, prompt: &str, response: &str) -> f64;
}

impl Rewarder for SyntheticTask {
    fn id(&self) -> String {
        format!("oracle:{}", self.name())
    }

    fn reward(&self, prompt: &str, response: &str) -> f64 {
        SyntheticTask::reward(self, prompt, response)
    }
}

/// Programmatic reward in `[0, 1]` for a synthetic task.
pub fn oracle_reward(task: SyntheticTask, prompt: &str, response: &str) -> f64 {
    task.reward(prompt, response)
}
