//! Task data: samples, splits, and per-task formatting metadata.
//!
//! Datasets are line-delimited JSON, one record per line, with fields
//! `{id?, question, gold, options?, split?}`. Records may pin themselves to
//! a split with a `split` tag (`"train"`, `"validation"`, `"test"`); when
//! any record is tagged, tags decide the split membership and the
//! requested counts are ignored. Untagged datasets are shuffled with a
//! seeded Fisher–Yates (see [`crate::rng`]) and cut to the requested
//! sizes, so the same `(samples, counts, seed)` always produces the same
//! splits.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::scoring::{Metric, Rational};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate sample id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("unsupported dataset format {0:?} (expected \"jsonl\")")]
    UnsupportedFormat(String),
    #[error("requested {requested} samples but only {available} are available")]
    NotEnoughSamples { requested: usize, available: usize },
    #[error("train and validation splits must be non-empty (got {train}/{validation})")]
    EmptySplit { train: usize, validation: usize },
    #[error("records mix split tags with untagged records (line {line} is untagged)")]
    MixedTagging { line: usize },
}

/// One task instance: a question with its gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub gold: String,
    /// Ordered multiple-choice options as `(key, text)` pairs; empty when
    /// the task is free-form.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<(String, String)>,
}

/// Which metric aggregates per-sample outcomes into a split score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum F1Averaging {
    #[default]
    Micro,
    Macro,
}

/// Fractions used to binarize continuous per-sample scores into
/// correct/incorrect labels (summarization-style tasks).
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizeFracs {
    pub top: Rational,
    pub bottom: Rational,
}

impl Default for BinarizeFracs {
    fn default() -> Self {
        Self {
            top: Rational::new(1.into(), 5.into()),
            bottom: Rational::new(1.into(), 5.into()),
        }
    }
}

/// Fixed, non-optimized parts of a task: metric, input-format components,
/// and the starting prompt.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub metric: Metric,
    /// Optional block appended after the question. A `{options}` slot is
    /// replaced with the sample's options rendered one per line as
    /// `(key) text`; if the slot is present but the sample has no options
    /// the whole block is omitted.
    pub task_suffix_template: Option<String>,
    /// Final block of every model input; tells the base model how to mark
    /// its answer.
    pub answer_format: String,
    pub initial_prompt: String,
    /// Micro (pooled counts) or macro (mean of per-sample F1) aggregation
    /// for set-F1 tasks.
    pub f1_averaging: F1Averaging,
    /// Quantile cutoffs used to partition continuous-score tasks.
    pub binarize: BinarizeFracs,
}

impl TaskSpec {
    pub fn new(name: &str, metric: Metric, initial_prompt: &str, answer_format: &str) -> Self {
        Self {
            name: name.to_string(),
            metric,
            task_suffix_template: None,
            answer_format: answer_format.to_string(),
            initial_prompt: initial_prompt.to_string(),
            f1_averaging: F1Averaging::default(),
            binarize: BinarizeFracs::default(),
        }
    }

    pub fn with_suffix_template(mut self, template: &str) -> Self {
        self.task_suffix_template = Some(template.to_string());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Validation => write!(f, "validation"),
            SplitTag::Test => write!(f, "test"),
        }
    }
}

/// Requested split sizes for untagged datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplits {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// How to enforce a cap on an oversized predefined test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TestCapMode {
    /// Keep the first `cap` test samples in file order.
    #[default]
    Head,
    /// Keep a seeded uniform subsample of size `cap`.
    Random,
}

impl DatasetSplits {
    /// Truncate the test split to at most `cap` samples.
    pub fn cap_test(&mut self, cap: usize, mode: TestCapMode, seed: u64) {
        if self.test.len() <= cap {
            return;
        }
        match mode {
            TestCapMode::Head => self.test.truncate(cap),
            TestCapMode::Random => {
                let mut rng = SplitMix64::new(seed);
                let mut keep = rng.sample_indices(self.test.len(), cap);
                keep.sort_unstable();
                self.test = keep.into_iter().map(|i| self.test[i].clone()).collect();
            }
        }
    }
}

/// A parsed dataset file: samples in file order plus any split tags.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub samples: Vec<Sample>,
    tags: Vec<Option<SplitTag>>,
}

impl LoadedDataset {
    pub fn from_samples(samples: Vec<Sample>) -> Self {
        let tags = vec![None; samples.len()];
        Self { samples, tags }
    }

    pub fn has_tags(&self) -> bool {
        self.tags.iter().any(|t| t.is_some())
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum IdField {
    Text(String),
    Number(i64),
}

impl IdField {
    fn into_string(self) -> String {
        match self {
            IdField::Text(s) => s,
            IdField::Number(n) => n.to_string(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<IdField>,
    question: String,
    gold: String,
    #[serde(default)]
    options: Option<Vec<(String, String)>>,
    #[serde(default)]
    split: Option<String>,
}

/// Load a line-delimited JSON dataset.
///
/// Records keep file order; ids default to the zero-based record index
/// when absent. `format_hint` currently accepts only `"jsonl"`.
pub fn load_samples(path: &Path, format_hint: Option<&str>) -> Result<LoadedDataset, DatasetError> {
    if let Some(hint) = format_hint {
        if !hint.eq_ignore_ascii_case("jsonl") {
            return Err(DatasetError::UnsupportedFormat(hint.to_string()));
        }
    }
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut samples = Vec::new();
    let mut tags = Vec::new();
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();
    let mut record_index = 0usize;
    for (line_no, line) in reader.lines().enumerate() {
        let line_no = line_no + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.question.trim().is_empty() {
            return Err(DatasetError::Malformed {
                line: line_no,
                message: "question must be non-empty".into(),
            });
        }
        let explicit_id = raw.id.is_some();
        let id = raw
            .id
            .map(IdField::into_string)
            .unwrap_or_else(|| record_index.to_string());
        if !seen_ids.insert(id.clone()) {
            if explicit_id {
                return Err(DatasetError::DuplicateId { line: line_no, id });
            }
            return Err(DatasetError::Malformed {
                line: line_no,
                message: format!("auto-assigned id {id:?} collides with an explicit id"),
            });
        }
        let options = raw.options.unwrap_or_default();
        if !options.is_empty() && !options.iter().any(|(key, _)| *key == raw.gold) {
            return Err(DatasetError::Malformed {
                line: line_no,
                message: format!("gold {:?} is not one of the option keys", raw.gold),
            });
        }
        let tag = match raw.split.as_deref() {
            None => None,
            Some("train") => Some(SplitTag::Train),
            Some("validation") => Some(SplitTag::Validation),
            Some("test") => Some(SplitTag::Test),
            Some(other) => {
                return Err(DatasetError::Malformed {
                    line: line_no,
                    message: format!(
                        "unknown split tag {other:?} (expected train/validation/test)"
                    ),
                })
            }
        };
        samples.push(Sample {
            id,
            question: raw.question,
            gold: raw.gold,
            options,
        });
        tags.push(tag);
        record_index += 1;
    }
    Ok(LoadedDataset { samples, tags })
}

/// Cut a dataset into train/validation/test splits.
///
/// Tagged records always go to their tagged split and `counts` is ignored;
/// a dataset that tags some records but not all is rejected. Untagged
/// datasets are shuffled deterministically from `seed` and cut to exactly
/// the requested sizes.
pub fn make_splits(
    data: &LoadedDataset,
    counts: SplitCounts,
    seed: u64,
) -> Result<DatasetSplits, DatasetError> {
    let splits = if data.has_tags() {
        if let Some(pos) = data.tags.iter().position(|t| t.is_none()) {
            return Err(DatasetError::MixedTagging { line: pos + 1 });
        }
        let mut out = DatasetSplits {
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        };
        for (sample, tag) in data.samples.iter().zip(&data.tags) {
            match tag.expect("checked above") {
                SplitTag::Train => out.train.push(sample.clone()),
                SplitTag::Validation => out.validation.push(sample.clone()),
                SplitTag::Test => out.test.push(sample.clone()),
            }
        }
        out
    } else {
        let requested = counts.train + counts.validation + counts.test;
        if requested > data.samples.len() {
            return Err(DatasetError::NotEnoughSamples {
                requested,
                available: data.samples.len(),
            });
        }
        let mut order: Vec<usize> = (0..data.samples.len()).collect();
        SplitMix64::new(seed).shuffle(&mut order);
        let pick = |range: std::ops::Range<usize>| -> Vec<Sample> {
            order[range]
                .iter()
                .map(|&i| data.samples[i].clone())
                .collect()
        };
        let train_end = counts.train;
        let val_end = train_end + counts.validation;
        let test_end = val_end + counts.test;
        DatasetSplits {
            train: pick(0..train_end),
            validation: pick(train_end..val_end),
            test: pick(val_end..test_end),
        }
    };
    if splits.train.is_empty() || splits.validation.is_empty() {
        return Err(DatasetError::EmptySplit {
            train: splits.train.len(),
            validation: splits.validation.len(),
        });
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().expect("temp file");
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f
    }

    fn dummy_samples(n: usize) -> LoadedDataset {
        let samples = (0..n)
            .map(|i| Sample {
                id: i.to_string(),
                question: format!("q{i}"),
                gold: "yes".into(),
                options: Vec::new(),
            })
            .collect();
        LoadedDataset::from_samples(samples)
    }

    #[test]
    fn loads_records_in_order_with_auto_ids() {
        let f = write_jsonl(&[
            r#"{"question": "q0", "gold": "a"}"#,
            r#"{"question": "q1", "gold": "b"}"#,
            r#"{"question": "q2", "gold": "c"}"#,
        ]);
        let data = load_samples(f.path(), None).unwrap();
        assert_eq!(data.samples.len(), 3);
        let ids: Vec<_> = data.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["0", "1", "2"]);
    }

    #[test]
    fn unknown_format_hint_is_rejected() {
        let f = write_jsonl(&[r#"{"question": "q", "gold": "a"}"#]);
        assert!(matches!(
            load_samples(f.path(), Some("parquet")),
            Err(DatasetError::UnsupportedFormat(_))
        ));
        assert!(load_samples(f.path(), Some("jsonl")).is_ok());
    }

    #[test]
    fn empty_file_is_an_empty_list() {
        let f = write_jsonl(&[]);
        let data = load_samples(f.path(), None).unwrap();
        assert!(data.samples.is_empty());
    }

    #[test]
    fn missing_gold_errors_at_its_line() {
        let f = write_jsonl(&[
            r#"{"question": "q0", "gold": "a"}"#,
            r#"{"question": "q1"}"#,
        ]);
        let err = load_samples(f.path(), None).unwrap_err();
        match err {
            DatasetError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_explicit_id_is_rejected() {
        let f = write_jsonl(&[
            r#"{"id": "x", "question": "q0", "gold": "a"}"#,
            r#"{"id": "x", "question": "q1", "gold": "b"}"#,
        ]);
        let err = load_samples(f.path(), None).unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateId { line: 2, .. }));
    }

    #[test]
    fn gold_must_match_an_option_key() {
        let f = write_jsonl(&[
            r#"{"question": "q", "gold": "Z", "options": [["A", "first"], ["B", "second"]]}"#,
        ]);
        assert!(matches!(
            load_samples(f.path(), None),
            Err(DatasetError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn split_sizes_match_requested_counts() {
        let data = dummy_samples(125 + 65 + 56);
        let splits = make_splits(
            &data,
            SplitCounts {
                train: 125,
                validation: 65,
                test: 56,
            },
            3,
        )
        .unwrap();
        assert_eq!(splits.train.len(), 125);
        assert_eq!(splits.validation.len(), 65);
        assert_eq!(splits.test.len(), 56);
    }

    #[test]
    fn zero_counts_are_rejected() {
        let data = dummy_samples(10);
        let err = make_splits(
            &data,
            SplitCounts {
                train: 0,
                validation: 0,
                test: 0,
            },
            0,
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::EmptySplit { .. }));
    }

    #[test]
    fn insufficient_samples_report_required_vs_available() {
        let data = dummy_samples(5);
        let err = make_splits(
            &data,
            SplitCounts {
                train: 4,
                validation: 2,
                test: 0,
            },
            0,
        )
        .unwrap_err();
        match err {
            DatasetError::NotEnoughSamples {
                requested,
                available,
            } => {
                assert_eq!((requested, available), (6, 5));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn same_seed_gives_identical_splits() {
        let data = dummy_samples(40);
        let counts = SplitCounts {
            train: 20,
            validation: 10,
            test: 10,
        };
        let a = make_splits(&data, counts, 11).unwrap();
        let b = make_splits(&data, counts, 11).unwrap();
        assert_eq!(a, b);
        let c = make_splits(&data, counts, 12).unwrap();
        assert_ne!(a, c, "different seeds should shuffle differently");
    }

    #[test]
    fn tags_take_precedence_over_counts() {
        let f = write_jsonl(&[
            r#"{"question": "q0", "gold": "a", "split": "train"}"#,
            r#"{"question": "q1", "gold": "b", "split": "validation"}"#,
            r#"{"question": "q2", "gold": "c", "split": "test"}"#,
        ]);
        let data = load_samples(f.path(), None).unwrap();
        let splits = make_splits(
            &data,
            SplitCounts {
                train: 99,
                validation: 99,
                test: 99,
            },
            0,
        )
        .unwrap();
        assert_eq!(splits.train.len(), 1);
        assert_eq!(splits.validation.len(), 1);
        assert_eq!(splits.test.len(), 1);
    }

    #[test]
    fn mixed_tagging_is_rejected() {
        let f = write_jsonl(&[
            r#"{"question": "q0", "gold": "a", "split": "train"}"#,
            r#"{"question": "q1", "gold": "b"}"#,
        ]);
        let data = load_samples(f.path(), None).unwrap();
        let err = make_splits(
            &data,
            SplitCounts {
                train: 1,
                validation: 1,
                test: 0,
            },
            0,
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::MixedTagging { line: 2 }));
    }

    #[test]
    fn test_cap_head_and_random() {
        let data = dummy_samples(30);
        let counts = SplitCounts {
            train: 10,
            validation: 10,
            test: 10,
        };
        let mut head = make_splits(&data, counts, 1).unwrap();
        let full_test = head.test.clone();
        head.cap_test(4, TestCapMode::Head, 0);
        assert_eq!(head.test, full_test[..4].to_vec());

        let mut random = make_splits(&data, counts, 1).unwrap();
        random.cap_test(4, TestCapMode::Random, 7);
        assert_eq!(random.test.len(), 4);
        for s in &random.test {
            assert!(full_test.contains(s));
        }
        let mut again = make_splits(&data, counts, 1).unwrap();
        again.cap_test(4, TestCapMode::Random, 7);
        assert_eq!(random.test, again.test);
    }
}
