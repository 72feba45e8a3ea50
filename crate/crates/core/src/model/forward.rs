//! Transformer forward pass on a [`Tape`], with control-token injection.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::state::{layer_param, ModelState};
use super::tokenizer::{Tokenizer, PAD};
use crate::adapters::{AdapterBody, ControlAdapter};
use crate::diffcore::{Gradients, Segment, Tape, Tensor, Var, LN_EPS};
use crate::error::{invalid, Error, Result};

/// A tape plus the set of parameter names that should receive gradients.
///
/// Every named tensor is bound once; later binds return the cached node so
/// gradients from all uses accumulate on a single leaf.
#[derive(Debug, Default)]
pub struct Graph {
    pub tape: Tape,
    trainable: BTreeSet<String>,
    bound: HashMap<String, Var>,
}

impl Graph {
    pub fn new<I, S>(trainable: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { tape: Tape::new(), trainable: trainable.into_iter().map(Into::into).collect(), bound: HashMap::new() }
    }

    /// Graph in which nothing is trainable.
    pub fn frozen() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = if self.trainable.contains(name) { self.tape.param(name, t.clone()) } else { self.tape.constant(t.clone()) };
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Gradients for every trainable name; `shapes` supplies the shapes of
    /// trainable tensors that never reached the tape.
    pub fn backward(&self, loss: Var, shapes: &BTreeMap<String, Vec<usize>>) -> Result<Gradients> {
        let mut req: Vec<(&str, &[usize])> = Vec::with_capacity(self.trainable.len());
        for name in &self.trainable {
            let shape = shapes
                .get(name)
                .ok_or_else(|| Error::Unknown { what: "trainable parameter", name: name.clone() })?;
            req.push((name.as_str(), shape.as_slice()));
        }
        self.tape.backward(loss, &req)
    }
}

/// Output of a packed forward: final hidden states plus where each input
/// sequence lives in the rows.
pub(crate) struct Hidden {
    pub hidden: Var,
    pub segments: Vec<Segment>,
    /// Rows contributed by the adapter ahead of each sequence.
    pub prefix_len: usize,
}

fn bind_base(g: &mut Graph, state: &ModelState, name: &str) -> Result<Var> {
    Ok(g.bind(name, state.param(name)?))
}

/// `x · Wᵀ`, plus the adapter's low-rank delta when it targets `w_name`.
fn project(g: &mut Graph, state: &ModelState, x: Var, w_name: &str, adapter: Option<&ControlAdapter>) -> Result<Var> {
    let w = bind_base(g, state, w_name)?;
    let base = g.tape.matmul_t(x, w)?;
    let Some(ad) = adapter else { return Ok(base) };
    let AdapterBody::Lora(lw) = &ad.body else { return Ok(base) };
    let Some(entry) = lw.entries.get(w_name) else { return Ok(base) };
    let a = g.bind(&ad.lora_param(w_name, 'a'), &entry.a);
    let b = g.bind(&ad.lora_param(w_name, 'b'), &entry.b);
    let xa = g.tape.matmul_t(x, a)?;
    let xab = g.tape.matmul_t(xa, b)?;
    let delta = g.tape.scale(xab, lw.scale());
    g.tape.add(base, delta)
}

/// Runs all sequences (which share one adapter) through the transformer.
pub(crate) fn forward_hidden(g: &mut Graph, state: &ModelState, seqs: &[Vec<usize>], adapter: Option<&ControlAdapter>) -> Result<Hidden> {
    let cfg = &state.config;
    if seqs.is_empty() {
        return Err(Error::EmptyAxis { op: "forward" });
    }
    let (hand_ids, soft_rows): (&[usize], Option<&Tensor>) = match adapter.map(|a| &a.body) {
        Some(AdapterBody::Handcrafted { ids, .. }) => (ids, None),
        Some(AdapterBody::SoftPrompt { rows }) => (&[], Some(rows)),
        _ => (&[], None),
    };
    let soft_len = soft_rows.map_or(0, Tensor::rows);
    let prefix_len = hand_ids.len() + soft_len;

    let mut segments = Vec::with_capacity(seqs.len());
    let mut positions = Vec::new();
    let mut all_ids = Vec::new();
    let mut start = 0;
    for s in seqs {
        if s.is_empty() {
            return Err(Error::EmptyAxis { op: "forward" });
        }
        if let Some(&bad) = s.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let len = prefix_len + s.len();
        if len > cfg.context_length {
            return Err(Error::TooLong { len, context: cfg.context_length });
        }
        segments.push(Segment { start, len });
        positions.extend(0..len);
        start += len;
        all_ids.push(hand_ids.iter().chain(s.iter()).copied().collect::<Vec<_>>());
    }

    let tok_emb = bind_base(g, state, "tok_emb")?;
    let tok = match soft_rows {
        None => {
            let flat: Vec<usize> = all_ids.concat();
            g.tape.embedding(tok_emb, &flat)?
        }
        Some(rows) => {
            let ad = adapter.expect("soft prompt implies adapter");
            let prefix = g.bind(&ad.prompt_param(), rows);
            let mut parts = Vec::with_capacity(2 * seqs.len());
            for ids in &all_ids {
                parts.push(prefix);
                parts.push(g.tape.embedding(tok_emb, ids)?);
            }
            g.tape.concat(&parts)?
        }
    };
    let pos_emb = bind_base(g, state, "pos_emb")?;
    let pos = g.tape.embedding(pos_emb, &positions)?;
    let mut x = g.tape.add(tok, pos)?;

    for l in 0..cfg.n_layers {
        let ln1g = bind_base(g, state, &layer_param(l, "ln1.g"))?;
        let ln1b = bind_base(g, state, &layer_param(l, "ln1.b"))?;
        let h = g.tape.layer_norm(x, ln1g, ln1b, LN_EPS)?;
        let q = project(g, state, h, &layer_param(l, "attn.wq"), adapter)?;
        let k = project(g, state, h, &layer_param(l, "attn.wk"), adapter)?;
        let v = project(g, state, h, &layer_param(l, "attn.wv"), adapter)?;
        let att = g.tape.causal_attention(q, k, v, &segments, cfg.n_heads)?;
        let o = project(g, state, att, &layer_param(l, "attn.wo"), adapter)?;
        x = g.tape.add(x, o)?;

        let ln2g = bind_base(g, state, &layer_param(l, "ln2.g"))?;
        let ln2b = bind_base(g, state, &layer_param(l, "ln2.b"))?;
        let h2 = g.tape.layer_norm(x, ln2g, ln2b, LN_EPS)?;
        let up = project(g, state, h2, &layer_param(l, "mlp.w1"), adapter)?;
        let b1 = bind_base(g, state, &layer_param(l, "mlp.b1"))?;
        let up = g.tape.add_row(up, b1)?;
        let act = g.tape.gelu(up);
        let down = project(g, state, act, &layer_param(l, "mlp.w2"), adapter)?;
        let b2 = bind_base(g, state, &layer_param(l, "mlp.b2"))?;
        let down = g.tape.add_row(down, b2)?;
        x = g.tape.add(x, down)?;
    }
    let lnfg = bind_base(g, state, "ln_f.g")?;
    let lnfb = bind_base(g, state, "ln_f.b")?;
    let hidden = g.tape.layer_norm(x, lnfg, lnfb, LN_EPS)?;
    Ok(Hidden { hidden, segments, prefix_len })
}

/// Logits (tied output embedding) for the selected hidden rows.
pub(crate) fn logits_for_rows(g: &mut Graph, state: &ModelState, hidden: Var, rows: &[usize]) -> Result<Var> {
    let sel = g.tape.select_rows(hidden, rows)?;
    let tok_emb = bind_base(g, state, "tok_emb")?;
    g.tape.matmul_t(sel, tok_emb)
}

/// Logits for every position of `tokens`, adapter prefix included:
/// `(prefix_len + tokens.len()) × vocab_size`.
pub fn forward_logits(state: &ModelState, tokens: &[usize], adapter: Option<&ControlAdapter>) -> Result<Tensor> {
    let mut g = Graph::frozen();
    let h = forward_hidden(&mut g, state, &[tokens.to_vec()], adapter)?;
    let rows: Vec<usize> = (0..h.segments[0].len).collect();
    let logits = logits_for_rows(&mut g, state, h.hidden, &rows)?;
    Ok(g.value(logits).clone())
}

/// One scored example: condition on `prompt`, score `response`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoredSeq {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
}

/// Per-sequence summed log-likelihood of the response tokens, as a vector
/// node with one entry per item. Also returns the response lengths.
pub(crate) fn response_logprobs(
    g: &mut Graph,
    state: &ModelState,
    items: &[ScoredSeq],
    adapter: Option<&ControlAdapter>,
) -> Result<(Var, Vec<usize>)> {
    let mut seqs = Vec::with_capacity(items.len());
    for it in items {
        if it.prompt.is_empty() || it.response.is_empty() {
            return Err(invalid("prompt and response must be nonempty"));
        }
        if it.response.contains(&PAD) {
            return Err(invalid("response contains PAD"));
        }
        let mut s = it.prompt.clone();
        s.extend_from_slice(&it.response[..it.response.len() - 1]);
        seqs.push(s);
    }
    let h = forward_hidden(g, state, &seqs, adapter)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut out_segments = Vec::with_capacity(items.len());
    for (it, seg) in items.iter().zip(&h.segments) {
        // Row predicting response[t] is the one holding the token before it.
        let first = seg.start + h.prefix_len + it.prompt.len() - 1;
        out_segments.push(Segment { start: rows.len(), len: it.response.len() });
        rows.extend(first..first + it.response.len());
        targets.extend_from_slice(&it.response);
    }
    let logits = logits_for_rows(g, state, h.hidden, &rows)?;
    let lsm = g.tape.log_softmax(logits)?;
    let picks = g.tape.gather(lsm, &targets)?;
    let sums = g.tape.segment_sum(picks, &out_segments)?;
    Ok((sums, items.iter().map(|i| i.response.len()).collect()))
}

/// Per-item mean negative log-likelihood vector.
pub(crate) fn response_mean_nll(
    g: &mut Graph,
    state: &ModelState,
    items: &[ScoredSeq],
    adapter: Option<&ControlAdapter>,
) -> Result<Var> {
    let (sums, lens) = response_logprobs(g, state, items, adapter)?;
    let w = g.tape.constant(Tensor::vector(lens.iter().map(|&n| -1.0 / n as f64).collect()));
    g.tape.mul(sums, w)
}

/// Mean NLL of `y` given `x` under `adapter`. Prompt (and adapter prefix)
/// positions contribute nothing.
pub fn lm_loss(state: &ModelState, x: &[usize], y: &[usize], adapter: Option<&ControlAdapter>) -> Result<f64> {
    let mut g = Graph::frozen();
    let item = ScoredSeq { prompt: x.to_vec(), response: y.to_vec() };
    let v = response_mean_nll(&mut g, state, &[item], adapter)?;
    Ok(g.value(v).item())
}

/// Shapes of all base and adapter parameters, by name.
pub fn param_shapes<'a>(state: &ModelState, adapters: impl IntoIterator<Item = &'a ControlAdapter>) -> BTreeMap<String, Vec<usize>> {
    let mut m: BTreeMap<String, Vec<usize>> = state.params().iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect();
    for a in adapters {
        for (n, t) in a.params() {
            m.insert(n, t.shape().to_vec());
        }
    }
    m
}

/// Convenience for tests and tooling: a prompt/response pair from text.
pub fn scored_from_text(tok: &Tokenizer, prompt: &str, response: &str) -> ScoredSeq {
    ScoredSeq { prompt: tok.prompt_ids(prompt), response: tok.response_ids(response) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{default_lora_targets, init_lora, ControlTokenSet};
    use crate::diffcore::{finite_diff_gradient, max_relative_error, stream, SeededRng};
    use crate::model::ModelConfig;

    fn micro(seed: u64) -> ModelState {
        ModelState::init(ModelConfig::micro(), &mut SeededRng::new(seed, stream::INIT)).unwrap()
    }

    fn tok() -> Tokenizer {
        Tokenizer::new(260).unwrap()
    }

    #[test]
    fn fresh_lora_is_neutral() {
        let s = micro(1);
        let ids = tok().prompt_ids("neutral check");
        let lora = init_lora("l", 4, 4.0, &default_lora_targets(&s), &s, &mut SeededRng::new(2, 0)).unwrap();
        let base = forward_logits(&s, &ids, None).unwrap();
        let with = forward_logits(&s, &ids, Some(&lora)).unwrap();
        assert_eq!(base.max_abs_diff(&with), 0.0);
    }

    #[test]
    fn soft_prompt_adds_rows() {
        let s = micro(1);
        let set = ControlTokenSet::soft_prompts(&s, &tok(), 5).unwrap();
        let ids = tok().prompt_ids("abc");
        let out = forward_logits(&s, &ids, Some(&set.good)).unwrap();
        assert_eq!(out.shape(), &[ids.len() + 5, 260]);
    }

    #[test]
    fn over_length_rejected_with_lengths() {
        let cfg = ModelConfig { context_length: 8, ..ModelConfig::micro() };
        let s = ModelState::init(cfg, &mut SeededRng::new(0, 0)).unwrap();
        let err = forward_logits(&s, &[1; 9], None).unwrap_err();
        assert!(matches!(err, Error::TooLong { len: 9, context: 8 }), "{err}");
    }

    #[test]
    fn causality_probe() {
        let s = micro(3);
        let mut rng = SeededRng::new(5, stream::DATA);
        for _ in 0..10 {
            let n = 12;
            let ids: Vec<usize> = (0..n).map(|_| rng.below(256)).collect();
            let t = rng.below(n - 1);
            let mut changed = ids.clone();
            changed[t + 1] = (changed[t + 1] + 1 + rng.below(200)) % 256;
            let a = forward_logits(&s, &ids, None).unwrap();
            let b = forward_logits(&s, &changed, None).unwrap();
            for p in 0..=t {
                assert_eq!(a.row(p), b.row(p), "position {p} changed after perturbing {}", t + 1);
            }
            assert_ne!(a.row(t + 1), b.row(t + 1));
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut s = micro(4);
        s.param_mut("tok_emb").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let t = tok();
        let loss = lm_loss(&s, &t.prompt_ids("x"), &t.response_ids("yz"), None).unwrap();
        assert!((loss - (260f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn lm_loss_equals_manual_sum() {
        let s = micro(6);
        let x = vec![256, 10, 20, 259];
        let y = vec![30, 40, 50];
        let full: Vec<usize> = x.iter().chain(&y).copied().collect();
        let logits = forward_logits(&s, &full, None).unwrap();
        let mut manual = 0.0;
        for (t, &target) in y.iter().enumerate() {
            let row = logits.row(x.len() - 1 + t);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            manual += row[target] - lse;
        }
        manual *= -1.0 / 3.0;
        let got = lm_loss(&s, &x, &y, None).unwrap();
        assert!((got - manual).abs() < 1e-12, "{got} vs {manual}");
    }

    #[test]
    fn pad_in_response_rejected() {
        let s = micro(0);
        assert!(lm_loss(&s, &[256, 1], &[5, PAD], None).is_err());
    }

    #[test]
    fn soft_prompt_equals_reserved_embedding_rows() {
        // Placing the prompt rows in extra embedding slots and feeding their
        // ids must give the same logits over the real vocabulary.
        let s = micro(8);
        let t = tok();
        let set = ControlTokenSet::soft_prompts(&s, &t, 3).unwrap();
        let AdapterBody::SoftPrompt { rows } = &set.good.body else { panic!("expected soft prompt") };
        let seq = t.prompt_ids("qrs");

        let cfg = ModelConfig { vocab_size: 263, ..ModelConfig::micro() };
        let mut params = s.params().clone();
        let mut table = s.param("tok_emb").unwrap().data().to_vec();
        table.extend_from_slice(rows.data());
        params.insert("tok_emb".into(), Tensor::matrix(263, 64, table).unwrap());
        let wide = ModelState::from_params(cfg, params, 0).unwrap();
        let virt: Vec<usize> = (260..263).chain(seq.iter().copied()).collect();

        let a = forward_logits(&s, &seq, Some(&set.good)).unwrap();
        let b = forward_logits(&wide, &virt, None).unwrap();
        assert_eq!(a.rows(), virt.len());
        for r in 0..a.rows() {
            for c in 0..260 {
                assert!((a.row(r)[c] - b.row(r)[c]).abs() < 1e-12);
            }
        }
    }

    /// Parameter coordinates probed by the gradient checks: every element of
    /// the small tensors, a fixed sample of the large ones.
    fn probe_coords(state: &ModelState, rng: &mut SeededRng, per_tensor: usize) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (name, t) in state.params() {
            if t.len() <= per_tensor {
                out.extend((0..t.len()).map(|i| (name.clone(), i)));
            } else {
                let picked: BTreeSet<usize> = (0..per_tensor).map(|_| rng.below(t.len())).collect();
                out.extend(picked.into_iter().map(|i| (name.clone(), i)));
            }
        }
        out
    }

    #[test]
    fn transformer_nll_gradient_matches_finite_differences() {
        let s = micro(10);
        let x = vec![256, 97, 98, 259];
        let y = vec![99, 100, 257];
        let names: Vec<String> = s.names().cloned().collect();
        let mut g = Graph::new(names);
        let item = ScoredSeq { prompt: x.clone(), response: y.clone() };
        let v = response_mean_nll(&mut g, &s, &[item], None).unwrap();
        let loss = g.tape.sum(v);
        let grads = g.backward(loss, &param_shapes(&s, [])).unwrap();

        let coords = probe_coords(&s, &mut SeededRng::new(1, 0), 6);
        let probe = Tensor::vector(coords.iter().map(|(n, i)| s.param(n).unwrap().data()[*i]).collect());
        let analytic = Tensor::vector(coords.iter().map(|(n, i)| grads.get(n).unwrap().data()[*i]).collect());
        let start = BTreeMap::from([("probe".to_string(), probe)]);
        let fd = finite_diff_gradient(
            |p| {
                let mut st = s.clone();
                for ((n, i), v) in coords.iter().zip(p["probe"].data()) {
                    st.param_mut(n).unwrap().data_mut()[*i] = *v;
                }
                lm_loss(&st, &x, &y, None)
            },
            &start,
            1e-5,
        )
        .unwrap();
        assert!(fd.flagged.is_empty());
        let err = max_relative_error(&analytic, &fd.grads["probe"], 1e-6);
        assert!(err < 1e-3, "max relative error {err}");
    }
}
