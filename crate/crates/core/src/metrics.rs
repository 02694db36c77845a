//! BLEU-4, ROUGE-2/L, accuracy and macro-F1.
//!
//! Sequence metrics work on token sequences; [`metric_tokens`] lexes raw text
//! with the same tokenizer the model uses so values do not depend on
//! whitespace conventions. All values are fractions in `[0, 1]`.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::text::Tokenizer;

/// Stand-in for a zero n-gram match count.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Token surfaces of `raw`; text that does not lex falls back to whitespace splitting.
pub fn metric_tokens(raw: &str, tokenizer: &Tokenizer) -> Vec<String> {
    match tokenizer.lex(raw) {
        Ok(l) => l.into_iter().map(|l| l.surface).collect(),
        Err(_) => raw.split_whitespace().map(str::to_string).collect(),
    }
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn clipped_overlap<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Sentence-level BLEU-4: geometric mean of clipped 1..4-gram precisions with
/// zero match counts replaced by [`BLEU_EPSILON`], times the brevity penalty.
/// Empty hypothesis or reference gives 0.
pub fn bleu4<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (matched, total) = clipped_overlap(hyp, reference, n);
        let p = if matched == 0 {
            BLEU_EPSILON / total.max(1) as f64
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln() / 4.0;
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

fn f1(overlap: f64, hyp_total: f64, ref_total: f64) -> f64 {
    if overlap == 0.0 || hyp_total == 0.0 || ref_total == 0.0 {
        return 0.0;
    }
    let p = overlap / hyp_total;
    let r = overlap / ref_total;
    2.0 * p * r / (p + r)
}

/// Bigram-overlap F1.
pub fn rouge2<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> f64 {
    let (matched, hyp_total) = clipped_overlap(hyp, reference, 2);
    f1(matched as f64, hyp_total as f64, reference.len().saturating_sub(1) as f64)
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
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

/// Longest-common-subsequence F1.
pub fn rouge_l<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    f1(lcs_len(hyp, reference) as f64, hyp.len() as f64, reference.len() as f64)
}

/// Fraction of aligned positions that agree, over the longer length.
pub fn token_accuracy<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    let longest = hyp.len().max(reference.len());
    if longest == 0 {
        return 1.0;
    }
    hyp.iter().zip(reference).filter(|(a, b)| a == b).count() as f64 / longest as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub per_label: BTreeMap<String, f64>,
    /// Labels of the subset that never occur in the gold data.
    pub absent_labels: Vec<String>,
}

/// Exact-match accuracy and unweighted mean per-label F1 over `labels`.
pub fn classification_metrics(predictions: &[String], gold: &[String], labels: &[String]) -> Result<ClassificationReport> {
    if predictions.len() != gold.len() {
        return Err(CoreError::LengthMismatch(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    let n = gold.len();
    let correct = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    let accuracy = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
    let mut per_label = BTreeMap::new();
    let mut absent_labels = Vec::new();
    for l in labels {
        let tp = predictions.iter().zip(gold).filter(|(p, g)| *p == l && *g == l).count() as f64;
        let fp = predictions.iter().zip(gold).filter(|(p, g)| *p == l && *g != l).count() as f64;
        let fn_ = predictions.iter().zip(gold).filter(|(p, g)| *p != l && *g == l).count() as f64;
        if !gold.contains(l) {
            absent_labels.push(l.clone());
        }
        let denom = 2.0 * tp + fp + fn_;
        per_label.insert(l.clone(), if denom == 0.0 { 0.0 } else { 2.0 * tp / denom });
    }
    let f1_macro = if labels.is_empty() {
        0.0
    } else {
        per_label.values().sum::<f64>() / labels.len() as f64
    };
    Ok(ClassificationReport {
        accuracy,
        f1_macro,
        per_label,
        absent_labels,
    })
}

pub const DEFAULT_ANSWER_MARKERS: [&str; 2] = ["答案", "ANSWER"];

/// Text after the last answer marker (ASCII case-insensitive), with leading
/// separators such as `:`, `=`, `is` and surrounding `$` and final
/// punctuation removed.
pub fn extract_answer(text: &str, markers: &[&str]) -> Option<String> {
    let upper = text.to_ascii_uppercase();
    let (pos, len) = markers
        .iter()
        .filter_map(|m| upper.rfind(&m.to_ascii_uppercase()).map(|p| (p, m.len())))
        .max_by_key(|&(p, _)| p)?;
    let mut rest = text[pos + len..].trim();
    loop {
        let before = rest;
        for prefix in [":", "：", "=", "is ", "是", "为"] {
            rest = rest.strip_prefix(prefix).unwrap_or(rest).trim_start();
        }
        if rest == before {
            break;
        }
    }
    let rest = rest.trim_end_matches(['.', '。', ' ']).trim();
    let rest = rest.trim_matches('$').trim();
    (!rest.is_empty()).then(|| rest.to_string())
}

/// Corpus-level generation scores: means of per-pair BLEU-4, ROUGE-2 and
/// ROUGE-L, plus answer accuracy when any reference carries an answer.
pub fn generation_metrics(pairs: &[(String, String)], tokenizer: &Tokenizer, markers: &[&str]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    if pairs.is_empty() {
        return out;
    }
    let (mut b, mut r2, mut rl) = (0.0, 0.0, 0.0);
    let (mut answered, mut right) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        let h = metric_tokens(hyp, tokenizer);
        let r = metric_tokens(reference, tokenizer);
        b += bleu4(&h, &r);
        r2 += rouge2(&h, &r);
        rl += rouge_l(&h, &r);
        if let Some(gold) = extract_answer(reference, markers) {
            answered += 1;
            if extract_answer(hyp, markers).as_deref() == Some(gold.as_str()) {
                right += 1;
            }
        }
    }
    let n = pairs.len() as f64;
    out.insert("bleu4".into(), b / n);
    out.insert("rouge2".into(), r2 / n);
    out.insert("rougeL".into(), rl / n);
    if answered > 0 {
        out.insert("answer_accuracy".into(), right as f64 / answered as f64);
    }
    out
}
