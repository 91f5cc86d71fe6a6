//! Corpus BLEU-1..4 and Distinct-1/2 on the shared tokenizer, scaled to
//! percentages.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::Corpus;
use crate::text::tokenize;

pub const COLUMNS: [&str; 6] = ["B-1", "B-2", "B-3", "B-4", "D-1", "D-2"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no text has {0} or more tokens")]
    NoNGrams(usize),
    #[error("n must be in 1..={max}, got {n}")]
    InvalidOrder { n: usize, max: usize },
    #[error("unmatched dialogue ids: {0:?}")]
    AlignmentError(Vec<String>),
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU with uniform weights over orders 1..=n, without smoothing.
pub fn bleu_n<T: AsRef<str>>(candidates: &[Vec<T>], references: &[Vec<T>], n: usize) -> Result<f64, MetricError> {
    if !(1..=4).contains(&n) {
        return Err(MetricError::InvalidOrder { n, max: 4 });
    }
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch { candidates: candidates.len(), references: references.len() });
    }
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, reference) in candidates.iter().zip(references) {
        c += cand.len();
        r += reference.len();
        for order in 1..=n {
            let ref_counts = ngram_counts(reference, order);
            for (gram, count) in ngram_counts(cand, order) {
                matched[order - 1] += count.min(ref_counts.get(&gram).copied().unwrap_or(0));
                total[order - 1] += count;
            }
        }
    }
    if c == 0 {
        info!("BLEU-{n}: candidates are empty, score is 0");
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 0..n {
        if matched[order] == 0 {
            info!("BLEU-{n}: no matching {}-grams, score is 0", order + 1);
            return Ok(0.0);
        }
        log_sum += (matched[order] as f64 / total[order] as f64).ln();
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(100.0 * bp * (log_sum / n as f64).exp())
}

/// Unique n-grams over total n-grams across `corpus`; n-grams stay within a text.
pub fn distinct_n<T: AsRef<str>>(corpus: &[Vec<T>], n: usize) -> Result<f64, MetricError> {
    if !(1..=2).contains(&n) {
        return Err(MetricError::InvalidOrder { n, max: 2 });
    }
    if corpus.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut unique: HashSet<Vec<&str>> = HashSet::new();
    let mut total = 0usize;
    for text in corpus {
        for w in text.windows(n) {
            unique.insert(w.iter().map(AsRef::as_ref).collect());
            total += 1;
        }
    }
    if total == 0 {
        return Err(MetricError::NoNGrams(n));
    }
    Ok(100.0 * unique.len() as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// BLEU-1..4.
    pub bleu: [f64; 4],
    /// Distinct-1, Distinct-2.
    pub distinct: [f64; 2],
    pub dialogues: usize,
    pub generated_turns: usize,
}

impl MetricReport {
    pub fn values(&self) -> [f64; 6] {
        [self.bleu[0], self.bleu[1], self.bleu[2], self.bleu[3], self.distinct[0], self.distinct[1]]
    }

    pub fn to_csv(&self) -> String {
        let values: Vec<String> = self.values().iter().map(|v| format!("{v:.2}")).collect();
        format!("{}\n{}\n", COLUMNS.join(","), values.join(","))
    }

    pub fn to_table(&self) -> String {
        let values: Vec<String> = self.values().iter().map(|v| format!("{v:.2}")).collect();
        let widths: Vec<usize> = COLUMNS.iter().zip(&values).map(|(c, v)| c.len().max(v.len())).collect();
        let row = |cells: &[String]| {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ")
        };
        let header: Vec<String> = COLUMNS.iter().map(|c| c.to_string()).collect();
        format!("{}\n{}\n", row(&header), row(&values))
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

fn owned_tokens(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(str::to_string).collect()
}

/// Pairs dialogues by id; BLEU compares each generated dialogue's turns,
/// concatenated, with the original's. Distinct runs over the generated turns
/// and is 0 when they hold no n-gram.
pub fn evaluate_corpus(generated: &Corpus, original: &Corpus) -> Result<MetricReport, MetricError> {
    let gen_ids: BTreeMap<&str, usize> = generated.dialogues().iter().enumerate().map(|(i, d)| (d.id(), i)).collect();
    let mut unmatched: Vec<String> = generated.dialogues().iter().filter(|d| original.get(d.id()).is_none()).map(|d| d.id().to_string()).collect();
    unmatched.extend(original.dialogues().iter().filter(|d| !gen_ids.contains_key(d.id())).map(|d| d.id().to_string()));
    if !unmatched.is_empty() {
        unmatched.sort();
        return Err(MetricError::AlignmentError(unmatched));
    }
    if generated.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut candidates = Vec::new();
    let mut references = Vec::new();
    for (id, &i) in &gen_ids {
        let cand = &generated.dialogues()[i];
        let reference = original.get(id).expect("aligned above");
        candidates.push(cand.turns().iter().flat_map(|u| owned_tokens(&u.text)).collect::<Vec<_>>());
        references.push(reference.turns().iter().flat_map(|u| owned_tokens(&u.text)).collect::<Vec<_>>());
    }
    let turns: Vec<Vec<String>> =
        generated.dialogues().iter().flat_map(|d| d.turns().iter().map(|u| owned_tokens(&u.text))).collect();
    let mut bleu = [0.0; 4];
    for (n, slot) in bleu.iter_mut().enumerate() {
        *slot = bleu_n(&candidates, &references, n + 1)?;
    }
    let mut distinct = [0.0; 2];
    for (n, slot) in distinct.iter_mut().enumerate() {
        *slot = match distinct_n(&turns, n + 1) {
            Ok(v) => v,
            Err(MetricError::NoNGrams(_)) => 0.0,
            Err(e) => return Err(e),
        };
    }
    Ok(MetricReport { bleu, distinct, dialogues: generated.len(), generated_turns: turns.len() })
}
