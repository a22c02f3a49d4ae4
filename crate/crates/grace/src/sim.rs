//! Synthetic task and rule-based models for offline runs.
//!
//! The synthetic world makes prompt quality measurable without a real
//! model: a task owns a keyword set, and a prompt's fitness is the
//! fraction of keywords it contains. The synthetic base model answers
//! each sample correctly with probability equal to that coverage, using a
//! hash of the full rendered input as its randomness, so replays (and the
//! evaluation cache) are exact. The synthetic optimizer reads the
//! meta-prompt it was sent: refinement adds one missing keyword
//! (occasionally with a distractor token), compression strips the
//! distractors.
//!
//! When the refinement meta-prompt carries no success cases, the
//! optimizer turns aggressive and may drop a keyword it had already
//! gained while chasing the new one. That contrast is what the
//! no-success-regulation ablation measures.

use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::dataset::{DatasetSplits, Sample, TaskSpec};
use crate::gateway::{Backend, BackendError, BackendResponse, CompletionRequest};
use crate::prompt::{EMPTY_CASE_BLOCK, END_MARKER, START_MARKER};
use crate::scoring::Metric;

pub const SYNTHETIC_ANSWER_FORMAT: &str = "Respond with \\boxed{ok} or \\boxed{no}.";
const DISTRACTOR_PREFIX: &str = "filler-";

/// Deterministic unit-interval draw from a seed and payload.
pub fn unit_hash(seed: u64, payload: &str) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(payload.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    // 53 mantissa bits give a uniform draw in [0, 1).
    (u64::from_be_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

/// A task whose ground truth is keyword coverage of the active prompt.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    keywords: Vec<String>,
    noise_seed: u64,
}

impl SyntheticTask {
    pub fn new(keywords: Vec<String>, noise_seed: u64) -> Self {
        Self {
            keywords,
            noise_seed,
        }
    }

    /// Six keywords chosen to never collide with sample or format text.
    pub fn six_keyword(noise_seed: u64) -> Self {
        Self::new(
            ["zephyr", "quartz", "lumen", "vortex", "ember", "sable"]
                .into_iter()
                .map(str::to_string)
                .collect(),
            noise_seed,
        )
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }

    pub fn noise_seed(&self) -> u64 {
        self.noise_seed
    }

    pub fn coverage_counts(&self, text: &str) -> (usize, usize) {
        let present = self.keywords.iter().filter(|kw| text.contains(*kw)).count();
        (present, self.keywords.len())
    }

    /// Fraction of the keyword set present in `text`.
    pub fn coverage(&self, text: &str) -> f64 {
        let (present, total) = self.coverage_counts(text);
        if total == 0 {
            return 1.0;
        }
        present as f64 / total as f64
    }

    pub fn task_spec(&self, initial_prompt: &str) -> TaskSpec {
        TaskSpec::new(
            "synthetic",
            Metric::Accuracy,
            initial_prompt,
            SYNTHETIC_ANSWER_FORMAT,
        )
    }

    pub fn samples(prefix: &str, n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                id: format!("{prefix}{i}"),
                question: format!("Sample {prefix}{i}: apply the instructions."),
                gold: "ok".into(),
                options: Vec::new(),
            })
            .collect()
    }

    pub fn splits(n_train: usize, n_validation: usize, n_test: usize) -> DatasetSplits {
        DatasetSplits {
            train: Self::samples("t", n_train),
            validation: Self::samples("v", n_validation),
            test: Self::samples("x", n_test),
        }
    }

    pub fn base(&self) -> Arc<SyntheticBase> {
        Arc::new(SyntheticBase { task: self.clone() })
    }

    pub fn optimizer(&self) -> Arc<SyntheticOptimizer> {
        Arc::new(SyntheticOptimizer {
            task: self.clone(),
            drop_prob: 0.9,
            distractor_prob: 0.35,
        })
    }
}

/// Base model: correct with probability equal to prompt coverage,
/// pseudo-randomly per rendered input.
pub struct SyntheticBase {
    task: SyntheticTask,
}

impl Backend for SyntheticBase {
    fn attempt(&self, request: &CompletionRequest) -> Result<BackendResponse, BackendError> {
        let input = request.rendered_text();
        let coverage = self.task.coverage(&input);
        let draw = unit_hash(self.task.noise_seed, &input);
        let answer = if draw < coverage { "ok" } else { "no" };
        Ok(BackendResponse {
            text: format!("Considered the instructions. \\boxed{{{answer}}}"),
            usage: None,
        })
    }

    fn id(&self) -> &str {
        "synthetic-base"
    }
}

/// Optimizer model: rule-based edits driven by the rendered meta-prompt.
pub struct SyntheticOptimizer {
    task: SyntheticTask,
    /// Chance an unregulated refinement drops an already-present keyword.
    drop_prob: f64,
    /// Chance a refinement appends a distractor token.
    distractor_prob: f64,
}

impl SyntheticOptimizer {
    fn refine(&self, meta: &str) -> String {
        let current = parse_current_prompt(meta).unwrap_or_default();
        let regulated = !meta.contains(&format!(
            "It successfully handled the following examples:\n{EMPTY_CASE_BLOCK}"
        ));
        let seed = self.task.noise_seed;

        let missing: Vec<&String> = self
            .task
            .keywords()
            .iter()
            .filter(|kw| !current.contains(*kw))
            .collect();
        let present: Vec<&String> = self
            .task
            .keywords()
            .iter()
            .filter(|kw| current.contains(*kw))
            .collect();

        let mut next = current.clone();
        if !regulated && !present.is_empty() {
            let draw = unit_hash(seed ^ 0x5150, meta);
            if draw < self.drop_prob {
                let idx = (unit_hash(seed ^ 0xD409, meta) * present.len() as f64) as usize;
                let clause = keyword_clause(present[idx.min(present.len() - 1)]);
                next = next.replace(&clause, "");
            }
        }
        if !missing.is_empty() {
            let idx = (unit_hash(seed ^ 0xADD0, meta) * missing.len() as f64) as usize;
            next.push_str(&keyword_clause(missing[idx.min(missing.len() - 1)]));
        }
        let distractor_prob = if regulated {
            self.distractor_prob
        } else {
            self.distractor_prob * 2.0
        };
        if unit_hash(seed ^ 0xF111, meta) < distractor_prob {
            let n = (unit_hash(seed ^ 0xF112, meta) * 1000.0) as u32;
            next.push_str(&format!(" {DISTRACTOR_PREFIX}{n} noted."));
        }
        next
    }

    fn compress(&self, meta: &str) -> String {
        let current = parse_current_prompt(meta).unwrap_or_default();
        strip_distractors(&current)
    }
}

impl Backend for SyntheticOptimizer {
    fn attempt(&self, request: &CompletionRequest) -> Result<BackendResponse, BackendError> {
        let meta = request.rendered_text();
        let next = if meta.contains("reconstruct a cleaner") {
            self.compress(&meta)
        } else {
            self.refine(&meta)
        };
        let next = if next.trim().is_empty() {
            "Apply the instructions.".to_string()
        } else {
            next.trim().to_string()
        };
        Ok(BackendResponse {
            text: format!("Reviewed the batch.\n{START_MARKER}\n{next}\n{END_MARKER}"),
            usage: None,
        })
    }

    fn id(&self) -> &str {
        "synthetic-optimizer"
    }
}

fn keyword_clause(keyword: &str) -> String {
    format!(" Consider {keyword}.")
}

/// The prompt quoted after "The current prompt is:" in either
/// meta-prompt.
fn parse_current_prompt(meta: &str) -> Option<String> {
    let after = &meta[meta.find("The current prompt is:")?..];
    let open = after.find('"')?;
    let rest = &after[open + 1..];
    let close = rest.find('"')?;
    Some(rest[..close].to_string())
}

fn strip_distractors(text: &str) -> String {
    let mut out = text.to_string();
    while let Some(start) = out.find(&format!(" {DISTRACTOR_PREFIX}")) {
        let tail = &out[start..];
        let Some(end) = tail.find(" noted.") else {
            break;
        };
        out.replace_range(start..start + end + " noted.".len(), "");
    }
    out
}
