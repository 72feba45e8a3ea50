use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_overlap(overlap: usize, cand: usize, reference: usize) -> Self {
        let precision = if cand == 0 { 0.0 } else { overlap as f64 / cand as f64 };
        let recall = if reference == 0 { 0.0 } else { overlap as f64 / reference as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1 }
    }
}

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based precision, recall and F1 over whitespace tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    RougeScore::from_overlap(lcs_len(&c, &r), c.len(), r.len())
}

fn ngrams(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram overlap scores. `None` when neither text has an n-gram of
/// this order (the score is undefined rather than zero).
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Option<RougeScore> {
    assert!(n >= 1, "n-gram order must be positive");
    let (c, r) = (tokenize(candidate), tokenize(reference));
    let (cg, rg) = (ngrams(&c, n), ngrams(&r, n));
    let (nc, nr) = (cg.values().sum::<usize>(), rg.values().sum::<usize>());
    if nc == 0 && nr == 0 {
        return None;
    }
    let overlap = cg.iter().map(|(g, &k)| k.min(*rg.get(g).unwrap_or(&0))).sum();
    Some(RougeScore::from_overlap(overlap, nc, nr))
}

/// Mean of the Rouge-1, Rouge-2 and Rouge-L F1 scores, over the orders that
/// are defined for this pair; 0 when both texts are empty.
pub fn rouge_avg(candidate: &str, reference: &str) -> f64 {
    let mut parts = Vec::with_capacity(3);
    for n in [1, 2] {
        if let Some(s) = rouge_n(candidate, reference, n) {
            parts.push(s.f1);
        }
    }
    if parts.is_empty() {
        return 0.0;
    }
    parts.push(rouge_l(candidate, reference).f1);
    parts.iter().sum::<f64>() / parts.len() as f64
}
