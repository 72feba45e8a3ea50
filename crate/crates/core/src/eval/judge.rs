use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::compare::{aggregate_two_orders, Verdict};
use super::report::{check_aligned, winrate_from_verdicts, Generation, WinRateReport};
use crate::error::{invalid, Error, Result};

/// Which judging prompt to send.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Summary,
    Dialogue,
}

impl std::str::FromStr for TemplateId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "summary" => Ok(Self::Summary),
            "dialogue" => Ok(Self::Dialogue),
            other => Err(Error::Unknown { what: "judge template", name: other.to_string() }),
        }
    }
}

const SUMMARY_TEMPLATE: &str = "Which of the following summaries does a better job of summarizing the most important points in the given forum post, without including unimportant or irrelevant details? A good summary is both precise and concise.

Post:
{question}

Summary A:
{answer_a}

Summary B:
{answer_b}

FIRST provide a one-sentence comparison of the two summaries, explaining which you prefer and why. SECOND, on a new line, state only \"A\" or \"B\" to indicate your choice. Your response should use the format:
Comparison: <one-sentence comparison and explanation>
Preferred: <\"A\" or \"B\">";

const DIALOGUE_TEMPLATE: &str = "Please act as an impartial judge and evaluate the quality of the responses provided by two AI assistants to the user question displayed below. You should choose the assistant that follows the user's instructions and answers the user's question better. Your evaluation should consider factors such as the helpfulness, relevance, accuracy, depth, creativity, and level of detail of their responses. Begin your evaluation by comparing the two responses and provide a short explanation. Avoid any positional biases and ensure that the order in which the responses were presented does not influence your decision. Do not allow the length of the responses to influence your evaluation. Do not favor certain names of the assistants. Be as objective as possible. After providing your explanation, output your final verdict by strictly following this format: \"[[A]]\" if assistant A is better, \"[[B]]\" if assistant B is better, and \"[[C]]\" for a tie.

[User Question]
{question}
[The Start of Assistant A's Answer]
{answer_a}
[The End of Assistant A's Answer]
[The Start of Assistant B's Answer]
{answer_b}
[The End of Assistant B's Answer]";

/// Fills a judging template. Substitution is single-pass, so answers that
/// contain placeholder text are inserted verbatim.
pub fn render_template(id: TemplateId, question: &str, answer_a: &str, answer_b: &str) -> String {
    let tpl = match id {
        TemplateId::Summary => SUMMARY_TEMPLATE,
        TemplateId::Dialogue => DIALOGUE_TEMPLATE,
    };
    let mut out = String::with_capacity(tpl.len() + question.len() + answer_a.len() + answer_b.len());
    let mut rest = tpl;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let (value, len) = if tail.starts_with("{question}") {
            (question, "{question}".len())
        } else if tail.starts_with("{answer_a}") {
            (answer_a, "{answer_a}".len())
        } else if tail.starts_with("{answer_b}") {
            (answer_b, "{answer_b}".len())
        } else {
            ("{", 1)
        };
        out.push_str(value);
        rest = &tail[len..];
    }
    out.push_str(rest);
    out
}

/// Request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub prompt: String,
    pub answer_a: String,
    pub answer_b: String,
    pub template_id: TemplateId,
}

/// Response body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub verdict: String,
    #[serde(default)]
    pub explanation: String,
}

/// `A` (first answer better), `B` or `C` (tie), optionally wrapped as
/// `[[A]]`; the result is from the first answer's point of view.
pub fn parse_verdict(raw: &str) -> Option<Verdict> {
    let t = raw.trim();
    let t = t.strip_prefix("[[").and_then(|s| s.strip_suffix("]]")).unwrap_or(t).trim();
    match t {
        "A" => Some(Verdict::Win),
        "B" => Some(Verdict::Lose),
        "C" => Some(Verdict::Tie),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum JudgeOutcome {
    Judged(Verdict),
    Unjudged(String),
}

/// HTTP judge client. Plain `http://` endpoints only.
#[derive(Debug, Clone)]
pub struct RemoteJudge {
    endpoint: String,
    template: TemplateId,
    concurrency: usize,
    agent: ureq::Agent,
}

impl RemoteJudge {
    pub const DEFAULT_CONCURRENCY: usize = 4;
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

    pub fn new(endpoint: &str, template: TemplateId, timeout: Duration, concurrency: usize) -> Result<Self> {
        if concurrency == 0 {
            return Err(invalid("judge concurrency must be at least 1"));
        }
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Ok(Self { endpoint: endpoint.to_string(), template, concurrency, agent })
    }

    pub fn id(&self) -> String {
        format!("judge:{}", self.endpoint)
    }

    /// One query; the verdict is from `answer_a`'s point of view.
    pub fn judge(&self, question: &str, answer_a: &str, answer_b: &str) -> JudgeOutcome {
        let req = JudgeRequest {
            prompt: render_template(self.template, question, answer_a, answer_b),
            answer_a: answer_a.to_string(),
            answer_b: answer_b.to_string(),
            template_id: self.template,
        };
        let resp = match self.agent.post(&self.endpoint).send_json(&req) {
            Ok(r) => r,
            Err(e) => return JudgeOutcome::Unjudged(e.to_string()),
        };
        match resp.into_json::<JudgeResponse>() {
            Ok(body) => match parse_verdict(&body.verdict) {
                Some(v) => JudgeOutcome::Judged(v),
                None => JudgeOutcome::Unjudged(format!("unparseable verdict {:?}", body.verdict)),
            },
            Err(e) => JudgeOutcome::Unjudged(format!("bad response body: {e}")),
        }
    }

    /// Queries both presentation orders and aggregates them from the
    /// candidate's point of view.
    pub fn judge_both_orders(&self, question: &str, candidate: &str, baseline: &str) -> JudgeOutcome {
        let ab = match self.judge(question, candidate, baseline) {
            JudgeOutcome::Judged(v) => v,
            u => return u,
        };
        let ba = match self.judge(question, baseline, candidate) {
            JudgeOutcome::Judged(v) => v.flip(),
            u => return u,
        };
        JudgeOutcome::Judged(aggregate_two_orders(ab, ba))
    }

    /// Judges aligned outputs with at most `concurrency` requests in flight.
    /// Unjudged examples are excluded and counted.
    pub fn winrate(&self, a: &[Generation], b: &[Generation], candidate: &str, baseline: &str) -> Result<WinRateReport> {
        check_aligned(a, b)?;
        let outcomes: Mutex<Vec<Option<JudgeOutcome>>> = Mutex::new(vec![None; a.len()]);
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..self.concurrency.min(a.len().max(1)) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= a.len() {
                        break;
                    }
                    let o = self.judge_both_orders(&a[i].prompt, &a[i].response, &b[i].response);
                    outcomes.lock().expect("judge results lock")[i] = Some(o);
                });
            }
        });
        let outcomes = outcomes.into_inner().expect("judge results lock");
        let mut verdicts = Vec::new();
        let mut unjudged = 0;
        for o in outcomes {
            match o.expect("every index visited") {
                JudgeOutcome::Judged(v) => verdicts.push(v),
                JudgeOutcome::Unjudged(_) => unjudged += 1,
            }
        }
        if verdicts.is_empty() {
            return Err(Error::Judge(format!("all {unjudged} examples unjudged")));
        }
        let mut r = winrate_from_verdicts(&verdicts, &self.id(), candidate, baseline)?;
        r.unjudged = unjudged;
        Ok(r)
    }
}

/// Single query with the default timeout; unjudged outcomes are errors.
pub fn remote_judge(endpoint: &str, template: TemplateId, question: &str, answer_a: &str, answer_b: &str) -> Result<Verdict> {
    let j = RemoteJudge::new(endpoint, template, RemoteJudge::DEFAULT_TIMEOUT, 1)?;
    match j.judge(question, answer_a, answer_b) {
        JudgeOutcome::Judged(v) => Ok(v),
        JudgeOutcome::Unjudged(why) => Err(Error::Judge(why)),
    }
}
