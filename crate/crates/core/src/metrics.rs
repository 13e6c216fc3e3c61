//! Paraphrase-aware evaluation of generated answers.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qamodel::QaModel;
use crate::taskgen::{answer_set, Dataset, ParaphraseTable, QaItem, QuestionType};

pub const EXACT_ACCURACY: &str = "exact_accuracy";
pub const PARAPHRASE_ACCURACY: &str = "paraphrase_accuracy";
pub const ROUGE_L: &str = "rouge_l";
pub const BLEU: [&str; 4] = ["bleu_1", "bleu_2", "bleu_3", "bleu_4"];

fn check_lengths(predictions: &[Vec<usize>], items: &[&QaItem]) -> Result<()> {
    if predictions.len() != items.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} items",
            predictions.len(),
            items.len()
        )));
    }
    if items.is_empty() {
        return Err(Error::InvalidArgument("no items to evaluate".into()));
    }
    Ok(())
}

/// Fraction of predictions equal to the item's sampled surface form.
pub fn exact_accuracy(predictions: &[Vec<usize>], items: &[&QaItem]) -> Result<f64> {
    check_lengths(predictions, items)?;
    let hits = predictions
        .iter()
        .zip(items)
        .filter(|(p, it)| **p == it.answer_tokens)
        .count();
    Ok(hits as f64 / items.len() as f64)
}

/// Fraction of predictions equal to any surface form of the item's class.
pub fn paraphrase_accuracy(predictions: &[Vec<usize>], items: &[&QaItem], table: &ParaphraseTable) -> Result<f64> {
    check_lengths(predictions, items)?;
    let mut hits = 0;
    for (p, it) in predictions.iter().zip(items) {
        if table.forms(it.canonical_class)?.contains(p) {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Smoothed multi-reference BLEU-n; see [`bleu_n_with`].
pub fn bleu_n(prediction: &[usize], references: &[Vec<usize>], n: usize) -> Result<f64> {
    bleu_n_with(prediction, references, n, true)
}

/// Geometric mean of clipped n-gram precisions of orders `1..=n` times the
/// brevity penalty against the reference closest in length. With
/// `smoothing`, an order with no matches uses `(0 + 1) / (total + 1)`.
pub fn bleu_n_with(prediction: &[usize], references: &[Vec<usize>], n: usize, smoothing: bool) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidArgument(format!("BLEU order must lie in 1..=4, got {n}")));
    }
    if references.is_empty() {
        return Err(Error::InvalidArgument("BLEU needs at least one reference".into()));
    }
    if prediction.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let cand = ngram_counts(prediction, k);
        let total: usize = cand.values().sum();
        let mut max_ref: HashMap<&[usize], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, k) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = cand
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if smoothing {
            1.0 / (total as f64 + 1.0)
        } else {
            return Ok(0.0);
        };
        log_sum += p.ln();
    }
    let c = prediction.len() as f64;
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| ((len as i64 - prediction.len() as i64).abs(), len))
        .expect("non-empty") as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

fn lcs(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// Longest-common-subsequence F-measure, best over references.
pub fn rouge_l(prediction: &[usize], references: &[Vec<usize>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::InvalidArgument("ROUGE-L needs at least one reference".into()));
    }
    if prediction.is_empty() {
        return Ok(0.0);
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok(references
        .iter()
        .map(|r| {
            let l = lcs(prediction, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / prediction.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: BTreeMap<String, f64>,
    pub per_type: BTreeMap<QuestionType, BTreeMap<String, f64>>,
    pub type_counts: BTreeMap<QuestionType, usize>,
    pub n_items: usize,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> f64 {
        self.overall.get(name).copied().unwrap_or(f64::NAN)
    }
}

fn item_scores(pred: &[usize], item: &QaItem, table: &ParaphraseTable) -> Result<Vec<(&'static str, f64)>> {
    let refs = answer_set(item, table)?;
    let mut out = vec![
        (
            EXACT_ACCURACY,
            f64::from(u8::from(pred == item.answer_tokens.as_slice())),
        ),
        (PARAPHRASE_ACCURACY, f64::from(u8::from(refs.iter().any(|r| r == pred)))),
    ];
    for (k, name) in BLEU.iter().enumerate() {
        out.push((name, bleu_n(pred, &refs, k + 1)?));
    }
    out.push((ROUGE_L, rouge_l(pred, &refs)?));
    Ok(out)
}

/// Every metric overall and per question type; references are the item's
/// full paraphrase set.
pub fn report(predictions: &[Vec<usize>], items: &[&QaItem], table: &ParaphraseTable) -> Result<EvalReport> {
    check_lengths(predictions, items)?;
    let mut overall: BTreeMap<String, f64> = BTreeMap::new();
    let mut per_type: BTreeMap<QuestionType, BTreeMap<String, f64>> = BTreeMap::new();
    let mut type_counts: BTreeMap<QuestionType, usize> = BTreeMap::new();
    for (pred, item) in predictions.iter().zip(items) {
        *type_counts.entry(item.question_type).or_insert(0) += 1;
        let slot = per_type.entry(item.question_type).or_default();
        for (name, v) in item_scores(pred, item, table)? {
            *overall.entry(name.to_string()).or_insert(0.0) += v;
            *slot.entry(name.to_string()).or_insert(0.0) += v;
        }
    }
    let n = items.len();
    overall.values_mut().for_each(|v| *v /= n as f64);
    for (t, m) in per_type.iter_mut() {
        let c = type_counts[t] as f64;
        m.values_mut().for_each(|v| *v /= c);
    }
    Ok(EvalReport {
        overall,
        per_type,
        type_counts,
        n_items: n,
    })
}

/// Greedy eval-mode answers for the given dataset items.
pub fn predict(model: &QaModel, dataset: &Dataset, indices: &[usize]) -> Result<Vec<Vec<usize>>> {
    indices
        .iter()
        .map(|&i| {
            let item = &dataset.items[i];
            model.answer(&item.question_tokens, dataset.features(item))
        })
        .collect()
}

pub fn evaluate(model: &QaModel, dataset: &Dataset, indices: &[usize]) -> Result<EvalReport> {
    let preds = predict(model, dataset, indices)?;
    let items: Vec<&QaItem> = indices.iter().map(|&i| &dataset.items[i]).collect();
    report(&preds, &items, &dataset.table)
}
