//! Aligned text tables with a colored Δ column.

use colored::Colorize;
use ctrlgen::eval::WinRateReport;

pub fn delta_cell(delta: f64, width: usize) -> String {
    let text = format!("{delta:>+width$.2}");
    if delta > 0.0 {
        text.green().to_string()
    } else if delta < 0.0 {
        text.red().to_string()
    } else {
        text
    }
}

pub fn render(reports: &[WinRateReport]) -> String {
    let w = |f: fn(&WinRateReport) -> String, head: &str| reports.iter().map(|r| f(r).len()).chain([head.len()]).max().unwrap_or(0);
    let we = w(|r| r.evaluator.clone(), "evaluator");
    let wc = w(|r| r.candidate.clone(), "candidate");
    let wb = w(|r| r.baseline.clone(), "baseline");
    let mut out = format!(
        "{:<we$}  {:<wc$}  {:<wb$}  {:>5}  {:>7}  {:>7}  {:>7}  {:>7}\n",
        "evaluator", "candidate", "baseline", "n", "win%", "lose%", "tie%", "Δ"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<we$}  {:<wc$}  {:<wb$}  {:>5}  {:>7.2}  {:>7.2}  {:>7.2}  {}\n",
            r.evaluator,
            r.candidate,
            r.baseline,
            r.n,
            r.win_pct,
            r.lose_pct,
            r.tie_pct,
            delta_cell(r.delta, 7)
        ));
        if r.unjudged > 0 {
            out.push_str(&format!("  ({} unjudged)\n", r.unjudged));
        }
    }
    for r in reports {
        for a in &r.inputs {
            out.push_str(&format!("  input {} sha256 {}\n", a.path, a.sha256));
        }
    }
    out
}
