//! Recognition and translation metrics, all reported as percentages.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whitespace tokens, or one token per non-space character for CJK text.
pub fn metric_tokens(text: &str, cjk: bool) -> Vec<String> {
    if cjk {
        text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect()
    } else {
        text.split_whitespace().map(String::from).collect()
    }
}

fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("WER needs a nonempty reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64 * 100.0)
}

/// Total edits over total reference length.
pub fn corpus_wer<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    check_aligned(refs.len(), hyps.len())?;
    let words: usize = refs.iter().map(Vec::len).sum();
    if words == 0 || refs.iter().any(Vec::is_empty) {
        return Err(Error::invalid("WER needs nonempty references"));
    }
    let edits: usize = refs.iter().zip(hyps).map(|(r, h)| edit_distance(r, h)).sum();
    Ok(edits as f64 / words as f64 * 100.0)
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{a} references vs {b} hypotheses")));
    }
    if a == 0 {
        return Err(Error::invalid("empty corpus"));
    }
    Ok(())
}

fn ngram_counts<T: std::hash::Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU up to order `n`. A zero match count at some order is smoothed to
/// `1 / (total + 1)`.
pub fn bleu<T: std::hash::Hash + Eq>(refs: &[Vec<T>], hyps: &[Vec<T>], n: usize) -> Result<f64> {
    check_aligned(refs.len(), hyps.len())?;
    if !(1..=4).contains(&n) {
        return Err(Error::invalid(format!("BLEU order {n} outside 1..=4")));
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (rf, hy) in refs.iter().zip(hyps) {
            let rc = ngram_counts(rf, order);
            for (g, k) in ngram_counts(hy, order) {
                matched += k.min(*rc.get(g).unwrap_or(&0));
                total += k;
            }
        }
        let p = if matched == 0 { 1.0 / (total as f64 + 1.0) } else { matched as f64 / total as f64 };
        log_sum += p.ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp() * 100.0)
}

fn lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    for x in a {
        let mut cur = vec![0; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub fn rouge_l<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("ROUGE-L needs a nonempty reference"));
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let l = lcs(reference, hypothesis) as f64;
    if l == 0.0 {
        return Ok(0.0);
    }
    let (p, r) = (l / hypothesis.len() as f64, l / reference.len() as f64);
    Ok(2.0 * p * r / (p + r) * 100.0)
}

/// Mean per-pair ROUGE-L.
pub fn corpus_rouge_l<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    check_aligned(refs.len(), hyps.len())?;
    let mut sum = 0.0;
    for (r, h) in refs.iter().zip(hyps) {
        sum += rouge_l(r, h)?;
    }
    Ok(sum / refs.len() as f64)
}

/// Per-instance (micro) or per-class (macro over classes present in `labels`) top-1 accuracy.
pub fn top1_accuracy<T: Ord + Eq>(preds: &[T], labels: &[T], per_class: bool) -> Result<f64> {
    check_aligned(labels.len(), preds.len())?;
    if !per_class {
        let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        return Ok(hits as f64 / labels.len() as f64 * 100.0);
    }
    let mut per: BTreeMap<&T, (usize, usize)> = BTreeMap::new();
    for (p, l) in preds.iter().zip(labels) {
        let e = per.entry(l).or_insert((0, 0));
        e.0 += usize::from(p == l);
        e.1 += 1;
    }
    Ok(per.values().map(|(h, n)| *h as f64 / *n as f64).sum::<f64>() / per.len() as f64 * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub samples: usize,
    pub metrics: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(task: impl Into<String>, samples: usize) -> Self {
        EvalReport { task: task.into(), samples, metrics: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::invalid(format!("metric {name} is not finite")));
        }
        self.metrics.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// `key=value` lines with two-decimal metric values.
    pub fn to_kv(&self) -> String {
        let mut s = format!("task={}\nsamples={}\n", self.task, self.samples);
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k}={v:.2}\n"));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
