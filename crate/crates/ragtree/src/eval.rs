//! Dataset loading, answer-string metrics, and run-level aggregation.
//!
//! Answer comparison follows the usual extractive-QA convention: lowercase,
//! strip punctuation and articles, collapse whitespace, then exact match on
//! the normalized strings and bag-of-tokens F1 with the best gold taken per
//! example.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::DecompositionTree;

/// One evaluation question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    /// Ids of the documents that together support the answer; empty when
    /// the dataset does not annotate evidence.
    #[serde(default)]
    pub gold_doc_ids: Vec<String>,
}

/// Per-example result row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub predicted: String,
    /// Union of document ids retrieved anywhere in the tree, sorted.
    pub retrieved_ids: Vec<String>,
    pub retrieval_calls: u32,
    pub wall_time_ms: f64,
    pub tree: Option<DecompositionTree>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Aggregate metrics over one run. Rates are percentages; `rn` is a plain
/// mean and `re` is recall-percent per retrieval call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub em: f64,
    pub f1: f64,
    /// Mean per-example gold-document recall, in percent; absent when no
    /// example annotates evidence.
    pub recall: Option<f64>,
    /// Fraction of evidence-annotated examples whose gold documents were
    /// all retrieved, in percent.
    pub full_coverage_rate: Option<f64>,
    /// Mean retrieval calls per example.
    pub rn: f64,
    /// Recall percent divided by mean retrieval calls.
    pub re: Option<f64>,
    /// Evidence-found-but-wrong rate, in percent: among evidence-annotated
    /// examples, the fraction with full gold coverage and a wrong answer.
    pub efr: Option<f64>,
    pub mean_time_ms: f64,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset line {line}: missing or empty field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("records do not align with the dataset: {0}")]
    Alignment(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Normalizes an answer string: lowercase, strip punctuation, drop the
/// articles a/an/the, collapse whitespace.
pub fn normalize_answer(answer: &str) -> String {
    let lowered = answer.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn normalized_tokens(answer: &str) -> Vec<String> {
    normalize_answer(answer)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Exact match after normalization, against the best gold. Two empty
/// strings match.
pub fn exact_match(predicted: &str, golds: &[String]) -> bool {
    let p = normalize_answer(predicted);
    golds.iter().any(|g| normalize_answer(g) == p)
}

/// Bag-of-tokens F1 against the best gold: 1 when both sides normalize to
/// empty, 0 when exactly one side is empty.
pub fn f1(predicted: &str, golds: &[String]) -> f64 {
    golds
        .iter()
        .map(|g| f1_single(predicted, g))
        .fold(0.0, f64::max)
}

fn f1_single(predicted: &str, gold: &str) -> f64 {
    let p = normalized_tokens(predicted);
    let g = normalized_tokens(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for token in &g {
        *counts.entry(token).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for token in &p {
        if let Some(c) = counts.get_mut(token.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Fraction of an example's gold documents that were retrieved; `None` when
/// the example has no evidence annotation.
pub fn doc_recall(retrieved: &[String], gold_doc_ids: &[String]) -> Option<f64> {
    if gold_doc_ids.is_empty() {
        return None;
    }
    let found = gold_doc_ids
        .iter()
        .filter(|g| retrieved.iter().any(|r| r == *g))
        .count();
    Some(found as f64 / gold_doc_ids.len() as f64)
}

fn full_coverage(retrieved: &[String], gold_doc_ids: &[String]) -> Option<bool> {
    doc_recall(retrieved, gold_doc_ids).map(|r| r == 1.0)
}

/// Evidence-found-but-wrong rate as a fraction: among evidence-annotated
/// examples, how many retrieved every gold document yet answered
/// incorrectly. `None` when no example qualifies.
pub fn efr(records: &[EvalRecord], examples: &[QAExample]) -> Result<Option<f64>, EvalError> {
    let by_id: BTreeMap<&str, &QAExample> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut included = 0usize;
    let mut wrong_with_evidence = 0usize;
    for record in records {
        let example = by_id
            .get(record.id.as_str())
            .ok_or_else(|| EvalError::Alignment(format!("no example with id `{}`", record.id)))?;
        let Some(covered) = full_coverage(&record.retrieved_ids, &example.gold_doc_ids) else {
            continue;
        };
        included += 1;
        if covered && !exact_match(&record.predicted, &example.gold_answers) {
            wrong_with_evidence += 1;
        }
    }
    if included == 0 {
        return Ok(None);
    }
    Ok(Some(wrong_with_evidence as f64 / included as f64))
}

/// Mean of per-dataset recall-percent per retrieval call; `None` when the
/// input is empty or any call count is non-positive.
pub fn retrieval_efficiency(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.is_empty() || pairs.iter().any(|(_, rn)| *rn <= 0.0) {
        return None;
    }
    Some(pairs.iter().map(|(recall, rn)| recall / rn).sum::<f64>() / pairs.len() as f64)
}

/// Aggregates per-example records into a [`MetricsReport`]. Records must
/// align one-to-one with dataset examples by id.
pub fn aggregate(
    records: &[EvalRecord],
    examples: &[QAExample],
) -> Result<MetricsReport, EvalError> {
    if records.len() != examples.len() {
        return Err(EvalError::Alignment(format!(
            "{} records for {} examples",
            records.len(),
            examples.len()
        )));
    }
    let by_id: BTreeMap<&str, &QAExample> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    if by_id.len() != examples.len() {
        return Err(EvalError::Alignment("duplicate example ids".to_string()));
    }

    let n = records.len();
    if n == 0 {
        return Ok(MetricsReport {
            n: 0,
            em: 0.0,
            f1: 0.0,
            recall: None,
            full_coverage_rate: None,
            rn: 0.0,
            re: None,
            efr: None,
            mean_time_ms: 0.0,
        });
    }

    let mut em_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut covered = 0usize;
    let mut annotated = 0usize;
    let mut calls_sum = 0.0;
    let mut time_sum = 0.0;
    for record in records {
        let example = by_id
            .get(record.id.as_str())
            .ok_or_else(|| EvalError::Alignment(format!("no example with id `{}`", record.id)))?;
        em_sum += exact_match(&record.predicted, &example.gold_answers) as u8 as f64;
        f1_sum += f1(&record.predicted, &example.gold_answers);
        if let Some(r) = doc_recall(&record.retrieved_ids, &example.gold_doc_ids) {
            annotated += 1;
            recall_sum += r;
            if r == 1.0 {
                covered += 1;
            }
        }
        calls_sum += record.retrieval_calls as f64;
        time_sum += record.wall_time_ms;
    }

    let recall = (annotated > 0).then(|| 100.0 * recall_sum / annotated as f64);
    let rn = calls_sum / n as f64;
    let re = recall.and_then(|r| retrieval_efficiency(&[(r, rn)]));
    Ok(MetricsReport {
        n,
        em: 100.0 * em_sum / n as f64,
        f1: 100.0 * f1_sum / n as f64,
        recall,
        full_coverage_rate: (annotated > 0).then(|| 100.0 * covered as f64 / annotated as f64),
        rn,
        re,
        efr: efr(records, examples)?.map(|v| 100.0 * v),
        mean_time_ms: time_sum / n as f64,
    })
}

/// Loads a JSONL dataset of [`QAExample`] rows, skipping blank lines.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QAExample>, EvalError> {
    #[derive(Deserialize)]
    struct RawExample {
        id: Option<String>,
        question: Option<String>,
        gold_answers: Option<Vec<String>>,
        #[serde(default)]
        gold_doc_ids: Vec<String>,
    }

    let file = std::fs::File::open(path.as_ref())?;
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let missing = |field| EvalError::MissingField { line: i + 1, field };
        let id = raw.id.filter(|v| !v.is_empty()).ok_or(missing("id"))?;
        let question = raw
            .question
            .filter(|v| !v.trim().is_empty())
            .ok_or(missing("question"))?;
        let gold_answers = raw
            .gold_answers
            .filter(|v| !v.is_empty())
            .ok_or(missing("gold_answers"))?;
        examples.push(QAExample {
            id,
            question,
            gold_answers,
            gold_doc_ids: raw.gold_doc_ids,
        });
    }
    Ok(examples)
}
