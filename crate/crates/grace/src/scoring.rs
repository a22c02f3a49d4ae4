//! Answer extraction and scoring.
//!
//! All scores that feed gate decisions are exact rationals so that
//! "strictly better" never depends on float rounding; floats appear only
//! when a score is displayed. Three metrics are supported:
//!
//! - accuracy: case-insensitive, whitespace-trimmed match of the extracted
//!   answer against the gold label, aggregated as `correct / n`
//! - set F1: the response is parsed as a delimiter-separated entity list;
//!   per-sample F1 over normalized entity sets, aggregated as micro-F1
//!   over pooled true/false positive/negative counts (macro available)
//! - ROUGE-L: token-level longest-common-subsequence F1 (`2·LCS/(m+n)`,
//!   lowercased whitespace tokens), aggregated as the arithmetic mean;
//!   correctness labels for continuous scores come from
//!   [`binarize_by_quantile`]
//!
//! Answers are read from the last `\boxed{...}` span of the response, with
//! surrounding parentheses and trailing option punctuation stripped.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{F1Averaging, Sample, TaskSpec};

pub type Rational = BigRational;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("cannot aggregate an empty outcome list")]
    EmptyOutcomes,
    #[error("cannot binarize an empty value list")]
    EmptyValues,
    #[error("invalid quantile fractions: top {top} + bottom {bottom} must be in (0, 1]")]
    BadFractions { top: String, bottom: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    SetF1,
    RougeL,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Accuracy => write!(f, "accuracy"),
            Metric::SetF1 => write!(f, "set_f1"),
            Metric::RougeL => write!(f, "rouge_l"),
        }
    }
}

/// Entity-overlap counts pooled by micro-F1 aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityCounts {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
}

/// Outcome of scoring one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub raw_response: String,
    pub extracted: Option<String>,
    pub correct: bool,
    #[serde(with = "rational_serde")]
    pub metric_value: Rational,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_counts: Option<EntityCounts>,
    /// Set when the base call failed every transport retry; the sample is
    /// scored incorrect and surfaced in the report.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub transport_failed: bool,
}

/// Aggregate score of a prompt on a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    #[serde(with = "rational_serde")]
    pub value: Rational,
    pub n: usize,
    pub metric: Metric,
}

impl Score {
    /// Percent with one decimal, e.g. `50/56` displays as `89.3`.
    pub fn display_percent(&self) -> String {
        let v = self.value.to_f64().unwrap_or(f64::NAN);
        format!("{:.1}", v * 100.0)
    }
}

impl std::fmt::Display for Score {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({})", self.value, self.display_percent())
    }
}

/// Serialize rationals as `"numer/denom"` strings so logs and checkpoints
/// stay readable and exact.
pub(crate) mod rational_serde {
    use super::*;
    use serde::de::Error as _;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Rational, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&value.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Rational, D::Error> {
        let text = String::deserialize(de)?;
        parse_rational(&text).ok_or_else(|| D::Error::custom(format!("bad rational {text:?}")))
    }
}

pub fn parse_rational(text: &str) -> Option<Rational> {
    let mut parts = text.splitn(2, '/');
    let numer: BigInt = parts.next()?.trim().parse().ok()?;
    let denom: BigInt = match parts.next() {
        Some(d) => d.trim().parse().ok()?,
        None => BigInt::one(),
    };
    if denom.is_zero() {
        return None;
    }
    Some(Rational::new(numer, denom))
}

fn ratio(n: u64, d: u64) -> Rational {
    Rational::new(BigInt::from(n), BigInt::from(d))
}

/// Content of the last `\boxed{...}` span, trimmed and stripped of option
/// punctuation (`"(B)"` → `"B"`); `None` when no span is present.
pub fn extract_answer(response: &str) -> Option<String> {
    const MARKER: &str = "\\boxed{";
    let start = response.rfind(MARKER)? + MARKER.len();
    let mut depth = 1usize;
    let mut end = None;
    for (i, c) in response[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    end = Some(start + i);
                    break;
                }
            }
            _ => {}
        }
    }
    let inner = &response[start..end?];
    Some(normalize_answer_span(inner))
}

fn normalize_answer_span(span: &str) -> String {
    let mut s = span.trim();
    if s.starts_with('(') && s.ends_with(')') && !s[1..s.len() - 1].contains(['(', ')']) {
        s = s[1..s.len() - 1].trim();
    }
    let mut out = s.to_string();
    while out.ends_with(['.', ':', ';']) || (out.ends_with(')') && !out.contains('(')) {
        out.pop();
    }
    out.trim().to_string()
}

fn normalized_eq(a: &str, b: &str) -> bool {
    a.trim().to_lowercase() == b.trim().to_lowercase()
}

/// Split a delimiter-separated entity list into a normalized set
/// (lowercased, trimmed, empties dropped).
pub fn parse_entities(text: &str) -> BTreeSet<String> {
    text.split([',', ';', '\n'])
        .map(|e| e.trim().to_lowercase())
        .filter(|e| !e.is_empty())
        .collect()
}

/// F1 of two entity sets; both empty scores 1, exactly one empty scores 0.
pub fn set_f1(pred: &BTreeSet<String>, gold: &BTreeSet<String>) -> Rational {
    if pred.is_empty() && gold.is_empty() {
        return Rational::one();
    }
    if pred.is_empty() || gold.is_empty() {
        return Rational::zero();
    }
    let tp = pred.intersection(gold).count() as u64;
    // F1 = 2PR/(P+R) with P = tp/|pred|, R = tp/|gold| reduces to
    // 2*tp / (|pred| + |gold|).
    ratio(2 * tp, (pred.len() + gold.len()) as u64)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token-level LCS F1: with P = LCS/|cand| and R = LCS/|ref| this is
/// `2·LCS / (|cand| + |ref|)`; zero when either side is empty.
pub fn rouge_l(candidate: &str, reference: &str) -> Rational {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() || refr.is_empty() {
        return Rational::zero();
    }
    let lcs = lcs_len(&cand, &refr);
    if lcs == 0 {
        return Rational::zero();
    }
    ratio(2 * lcs as u64, (cand.len() + refr.len()) as u64)
}

/// Score one base-model response against its sample.
pub fn score_sample(response: &str, sample: &Sample, spec: &TaskSpec) -> SampleOutcome {
    let extracted = extract_answer(response);
    match spec.metric {
        Metric::Accuracy => {
            let correct = extracted
                .as_deref()
                .map(|e| normalized_eq(e, &sample.gold))
                .unwrap_or(false);
            SampleOutcome {
                sample_id: sample.id.clone(),
                raw_response: response.to_string(),
                extracted,
                correct,
                metric_value: if correct {
                    Rational::one()
                } else {
                    Rational::zero()
                },
                entity_counts: None,
                transport_failed: false,
            }
        }
        Metric::SetF1 => {
            let gold = parse_entities(&sample.gold);
            let (value, counts) = match extracted.as_deref() {
                // Extraction failure scores zero and pools the whole gold
                // set as misses.
                None => (
                    Rational::zero(),
                    EntityCounts {
                        true_positive: 0,
                        false_positive: 0,
                        false_negative: gold.len() as u64,
                    },
                ),
                Some(span) => {
                    let pred = parse_entities(span);
                    let tp = pred.intersection(&gold).count() as u64;
                    (
                        set_f1(&pred, &gold),
                        EntityCounts {
                            true_positive: tp,
                            false_positive: pred.len() as u64 - tp,
                            false_negative: gold.len() as u64 - tp,
                        },
                    )
                }
            };
            let correct = extracted.is_some() && value.is_one();
            SampleOutcome {
                sample_id: sample.id.clone(),
                raw_response: response.to_string(),
                extracted,
                correct,
                metric_value: value,
                entity_counts: Some(counts),
                transport_failed: false,
            }
        }
        Metric::RougeL => {
            // Summaries are rarely boxed; fall back to the whole response.
            let candidate = extracted
                .clone()
                .unwrap_or_else(|| response.trim().to_string());
            let value = rouge_l(&candidate, &sample.gold);
            SampleOutcome {
                sample_id: sample.id.clone(),
                raw_response: response.to_string(),
                extracted,
                // Correctness for continuous scores is assigned by
                // binarize_by_quantile, not here.
                correct: false,
                metric_value: value,
                entity_counts: None,
                transport_failed: false,
            }
        }
    }
}

/// Outcome recorded for a sample whose base call failed every retry.
pub fn transport_failure_outcome(sample: &Sample, spec: &TaskSpec) -> SampleOutcome {
    let entity_counts = (spec.metric == Metric::SetF1).then(|| EntityCounts {
        true_positive: 0,
        false_positive: 0,
        false_negative: parse_entities(&sample.gold).len() as u64,
    });
    SampleOutcome {
        sample_id: sample.id.clone(),
        raw_response: String::new(),
        extracted: None,
        correct: false,
        metric_value: Rational::zero(),
        entity_counts,
        transport_failed: true,
    }
}

/// Aggregate per-sample outcomes into a split score (micro-F1 for set
/// tasks).
pub fn aggregate(outcomes: &[SampleOutcome], metric: Metric) -> Result<Score, ScoreError> {
    aggregate_with(outcomes, metric, F1Averaging::Micro)
}

pub fn aggregate_with(
    outcomes: &[SampleOutcome],
    metric: Metric,
    averaging: F1Averaging,
) -> Result<Score, ScoreError> {
    if outcomes.is_empty() {
        return Err(ScoreError::EmptyOutcomes);
    }
    let n = outcomes.len();
    let value = match metric {
        Metric::Accuracy => {
            let correct = outcomes.iter().filter(|o| o.correct).count() as u64;
            ratio(correct, n as u64)
        }
        Metric::SetF1 => match averaging {
            F1Averaging::Micro => {
                let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
                for o in outcomes {
                    let c = o.entity_counts.unwrap_or(EntityCounts {
                        true_positive: 0,
                        false_positive: 0,
                        false_negative: 0,
                    });
                    tp += c.true_positive;
                    fp += c.false_positive;
                    fn_ += c.false_negative;
                }
                if 2 * tp + fp + fn_ == 0 {
                    Rational::one()
                } else {
                    ratio(2 * tp, 2 * tp + fp + fn_)
                }
            }
            F1Averaging::Macro => mean(outcomes),
        },
        Metric::RougeL => mean(outcomes),
    };
    Ok(Score { value, n, metric })
}

fn mean(outcomes: &[SampleOutcome]) -> Rational {
    let sum: Rational = outcomes
        .iter()
        .map(|o| o.metric_value.clone())
        .fold(Rational::zero(), |a, b| a + b);
    sum / Rational::from(BigInt::from(outcomes.len() as u64))
}

/// Label assigned to a sample by quantile binarization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantileLabel {
    Correct,
    Incorrect,
    Excluded,
}

/// Label the top `⌊n·top_frac⌋` values correct and the bottom
/// `⌊n·bottom_frac⌋` incorrect, excluding the rest. Ties break by
/// ascending sample id; a sample is never labeled both ways.
pub fn binarize_by_quantile(
    values: &[(String, Rational)],
    top_frac: &Rational,
    bottom_frac: &Rational,
) -> Result<BTreeMap<String, QuantileLabel>, ScoreError> {
    if values.is_empty() {
        return Err(ScoreError::EmptyValues);
    }
    let one = Rational::one();
    if !top_frac.is_positive()
        || !bottom_frac.is_positive()
        || top_frac.clone() + bottom_frac.clone() > one
    {
        return Err(ScoreError::BadFractions {
            top: top_frac.to_string(),
            bottom: bottom_frac.to_string(),
        });
    }
    let n = BigInt::from(values.len() as u64);
    let count = |frac: &Rational| -> usize {
        (Rational::from(n.clone()) * frac)
            .floor()
            .to_integer()
            .to_usize()
            .unwrap_or(0)
    };
    let top_k = count(top_frac);
    let bottom_k = count(bottom_frac);

    let mut desc: Vec<&(String, Rational)> = values.iter().collect();
    desc.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut labels: BTreeMap<String, QuantileLabel> = values
        .iter()
        .map(|(id, _)| (id.clone(), QuantileLabel::Excluded))
        .collect();
    for (id, _) in desc.iter().take(top_k) {
        labels.insert(id.clone(), QuantileLabel::Correct);
    }
    let mut asc: Vec<&(String, Rational)> = values.iter().collect();
    asc.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let mut assigned = 0usize;
    for (id, _) in asc {
        if assigned == bottom_k {
            break;
        }
        if labels[id] == QuantileLabel::Correct {
            continue;
        }
        labels.insert(id.clone(), QuantileLabel::Incorrect);
        assigned += 1;
    }
    Ok(labels)
}
