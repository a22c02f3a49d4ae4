//! Rendering of every text the two models see.
//!
//! Four surfaces live here:
//!
//! - the base-model task input: `prompt`, `question`, optional task
//!   suffix (options rendered one per line), and the answer format,
//!   joined by blank lines;
//! - per-sample case records (`<i>` / input / response / label /
//!   prediction blocks) inlined into the refinement meta-prompt;
//! - the two optimizer meta-prompts: refinement (current prompt plus
//!   success and failure case blocks) and compression (current prompt
//!   only), filled from template files with `{current prompt}`,
//!   `{correct string}` and `{error string}` slots;
//! - candidate extraction from optimizer output, reading the span between
//!   the last `<START>` and the first following `</START>`.
//!
//! Everything is a pure string-to-string function; slot filling is a
//! single pass, so braces inside values are never re-expanded. Default
//! templates ship with the crate and may be overridden per task from
//! files.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Sample, TaskSpec};

pub const SLOT_CURRENT_PROMPT: &str = "{current prompt}";
pub const SLOT_CORRECT_STRING: &str = "{correct string}";
pub const SLOT_ERROR_STRING: &str = "{error string}";
pub const SLOT_OPTIONS: &str = "{options}";

/// Marker pair the optimizer is instructed to wrap its final prompt in.
pub const START_MARKER: &str = "<START>";
pub const END_MARKER: &str = "</START>";

/// Sentinel rendered when a case block would otherwise be empty.
pub const EMPTY_CASE_BLOCK: &str = "(none)";

/// Default refinement meta-prompt shipped with the crate.
pub const BUILTIN_REFINE_TEMPLATE: &str = include_str!("../assets/refine_prompt.txt");
/// Default compression meta-prompt shipped with the crate.
pub const BUILTIN_COMPRESS_TEMPLATE: &str = include_str!("../assets/compress_prompt.txt");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt text is empty after trimming")]
    EmptyPrompt,
    #[error("case record list is empty")]
    EmptyCaseList,
    #[error("template {template}: slot {slot:?} must appear exactly once (found {found})")]
    BadSlot {
        template: &'static str,
        slot: &'static str,
        found: usize,
    },
    #[error("cannot read template {path}: {source}")]
    TemplateIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no {start}...{end} span in optimizer output", start = START_MARKER, end = END_MARKER)]
    MarkersAbsent,
    #[error("empty candidate between {start} and {end}", start = START_MARKER, end = END_MARKER)]
    EmptyCandidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptOrigin {
    Initial,
    Refined,
    Compressed,
}

/// An optimization candidate: the unit the search runs over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub origin: PromptOrigin,
    /// Iteration that produced this prompt; `None` for the initial prompt.
    pub parent_step: Option<u32>,
}

impl PromptText {
    /// Build a prompt, trimming surrounding whitespace. Empty prompts are
    /// rejected.
    pub fn new(
        text: &str,
        origin: PromptOrigin,
        parent_step: Option<u32>,
    ) -> Result<Self, PromptError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(PromptError::EmptyPrompt);
        }
        Ok(Self {
            text: trimmed.to_string(),
            origin,
            parent_step,
        })
    }

    pub fn initial(text: &str) -> Result<Self, PromptError> {
        Self::new(text, PromptOrigin::Initial, None)
    }

    /// Stable content hash used as the evaluation-cache key and for trace
    /// correlation.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.text.as_bytes());
        hex::encode(hasher.finalize())
    }
}

/// One evaluated training sample rendered for the optimizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    /// 1-based position within its success or failure block.
    pub index: usize,
    pub question_input: String,
    pub response: String,
    pub label: String,
    pub prediction: String,
}

/// Assemble the full base-model input for one sample.
///
/// Blocks in order: prompt, question, optional task suffix, answer
/// format, separated by blank lines. A suffix that renders to whitespace
/// (or whose `{options}` slot has no options to fill) is omitted rather
/// than leaving an empty block.
pub fn assemble_task_input(prompt: &PromptText, sample: &Sample, spec: &TaskSpec) -> String {
    let mut blocks: Vec<String> = vec![prompt.text.clone(), sample.question.trim().to_string()];
    if let Some(suffix) = render_task_suffix(sample, spec) {
        blocks.push(suffix);
    }
    blocks.push(spec.answer_format.trim().to_string());
    blocks.join("\n\n")
}

fn render_task_suffix(sample: &Sample, spec: &TaskSpec) -> Option<String> {
    let template = spec.task_suffix_template.as_deref()?;
    let rendered = if template.contains(SLOT_OPTIONS) {
        if sample.options.is_empty() {
            return None;
        }
        let lines: Vec<String> = sample
            .options
            .iter()
            .map(|(key, text)| format!("({key}) {text}"))
            .collect();
        fill_slots(template, &[(SLOT_OPTIONS, &lines.join("\n"))])
    } else {
        template.to_string()
    };
    let rendered = rendered.trim().to_string();
    (!rendered.is_empty()).then_some(rendered)
}

/// Render case records into the block format inlined into the refinement
/// meta-prompt, one block per case in order.
pub fn render_case_block(cases: &[CaseRecord]) -> Result<String, PromptError> {
    if cases.is_empty() {
        return Err(PromptError::EmptyCaseList);
    }
    let blocks: Vec<String> = cases
        .iter()
        .map(|case| {
            format!(
                "<{index}>\nThe model's input is:\n{input}\nThe model's response (solution) is:\n{response}\nThe correct label is: {label}\nThe model's final prediction is: {prediction}.",
                index = case.index,
                input = case.question_input,
                response = case.response,
                label = case.label,
                prediction = case.prediction,
            )
        })
        .collect();
    Ok(blocks.join("\n\n"))
}

/// The two optimizer meta-prompt templates, slot-validated at
/// construction.
#[derive(Debug, Clone)]
pub struct MetaPromptTemplates {
    refine: String,
    compress: String,
}

impl MetaPromptTemplates {
    /// The crate's built-in templates.
    pub fn builtin() -> Self {
        Self::new(BUILTIN_REFINE_TEMPLATE, BUILTIN_COMPRESS_TEMPLATE)
            .expect("built-in templates carry valid slots")
    }

    pub fn new(refine: &str, compress: &str) -> Result<Self, PromptError> {
        for slot in [SLOT_CURRENT_PROMPT, SLOT_CORRECT_STRING, SLOT_ERROR_STRING] {
            check_slot("refine", refine, slot)?;
        }
        check_slot("compress", compress, SLOT_CURRENT_PROMPT)?;
        Ok(Self {
            refine: refine.to_string(),
            compress: compress.to_string(),
        })
    }

    pub fn from_files(
        refine_path: &std::path::Path,
        compress_path: &std::path::Path,
    ) -> Result<Self, PromptError> {
        let read = |path: &std::path::Path| {
            std::fs::read_to_string(path).map_err(|source| PromptError::TemplateIo {
                path: path.display().to_string(),
                source,
            })
        };
        Self::new(&read(refine_path)?, &read(compress_path)?)
    }

    /// Fill the refinement meta-prompt with the current prompt and the
    /// rendered success/failure case blocks. An empty side renders the
    /// `(none)` sentinel so the template's fixed order is preserved.
    pub fn render_refine(
        &self,
        current: &PromptText,
        successes: &[CaseRecord],
        failures: &[CaseRecord],
    ) -> String {
        let correct = if successes.is_empty() {
            EMPTY_CASE_BLOCK.to_string()
        } else {
            render_case_block(successes).expect("non-empty")
        };
        let error = if failures.is_empty() {
            EMPTY_CASE_BLOCK.to_string()
        } else {
            render_case_block(failures).expect("non-empty")
        };
        fill_slots(
            &self.refine,
            &[
                (SLOT_CURRENT_PROMPT, &current.text),
                (SLOT_CORRECT_STRING, &correct),
                (SLOT_ERROR_STRING, &error),
            ],
        )
    }

    /// Fill the compression meta-prompt with the current prompt.
    pub fn render_compress(&self, current: &PromptText) -> String {
        fill_slots(&self.compress, &[(SLOT_CURRENT_PROMPT, &current.text)])
    }
}

fn check_slot(template: &'static str, text: &str, slot: &'static str) -> Result<(), PromptError> {
    let found = text.matches(slot).count();
    if found != 1 {
        return Err(PromptError::BadSlot {
            template,
            slot,
            found,
        });
    }
    Ok(())
}

/// Single-pass slot fill: slot positions are located in the template
/// before any value is inserted, so values containing slot syntax are
/// emitted verbatim.
fn fill_slots(template: &str, fills: &[(&str, &str)]) -> String {
    let mut positions: Vec<(usize, &str, &str)> = fills
        .iter()
        .filter_map(|(slot, value)| template.find(slot).map(|pos| (pos, *slot, *value)))
        .collect();
    positions.sort_by_key(|(pos, _, _)| *pos);
    let mut out = String::with_capacity(template.len());
    let mut cursor = 0;
    for (pos, slot, value) in positions {
        out.push_str(&template[cursor..pos]);
        out.push_str(value);
        cursor = pos + slot.len();
    }
    out.push_str(&template[cursor..]);
    out
}

/// Pull the candidate prompt out of optimizer output: the span strictly
/// between the last `<START>` and the first `</START>` after it, trimmed.
/// Reasoning models may emit draft marker pairs; the final answer is the
/// last one.
pub fn extract_candidate(optimizer_output: &str) -> Result<String, PromptError> {
    let start = optimizer_output
        .rfind(START_MARKER)
        .ok_or(PromptError::MarkersAbsent)?
        + START_MARKER.len();
    let end = optimizer_output[start..]
        .find(END_MARKER)
        .ok_or(PromptError::MarkersAbsent)?
        + start;
    let candidate = optimizer_output[start..end].trim();
    if candidate.is_empty() {
        return Err(PromptError::EmptyCandidate);
    }
    Ok(candidate.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::Metric;

    fn spec_with_suffix() -> TaskSpec {
        TaskSpec::new(
            "trec",
            Metric::Accuracy,
            "Tag the text.",
            "Put your answer option within \\boxed{}.",
        )
        .with_suffix_template("Options:\n{options}")
    }

    fn sample() -> Sample {
        Sample {
            id: "0".into(),
            question: "Text: what is this?\nAssign a label for the preceding text".into(),
            gold: "A".into(),
            options: vec![("A".into(), "first".into()), ("B".into(), "second".into())],
        }
    }

    fn case(i: usize) -> CaseRecord {
        CaseRecord {
            index: i,
            question_input: format!("question {i}"),
            response: format!("response {i}"),
            label: "A".into(),
            prediction: "B".into(),
        }
    }

    #[test]
    fn assembles_four_blocks_with_option_lines() {
        let prompt = PromptText::initial("Tag the text.").unwrap();
        let text = assemble_task_input(&prompt, &sample(), &spec_with_suffix());
        assert_eq!(
            text,
            "Tag the text.\n\nText: what is this?\nAssign a label for the preceding text\n\nOptions:\n(A) first\n(B) second\n\nPut your answer option within \\boxed{}."
        );
    }

    #[test]
    fn no_suffix_means_three_blocks() {
        let mut spec = spec_with_suffix();
        spec.task_suffix_template = None;
        let prompt = PromptText::initial("Tag the text.").unwrap();
        let text = assemble_task_input(&prompt, &sample(), &spec);
        assert!(!text.contains("\n\n\n"));
        assert_eq!(text.matches("\n\n").count(), 2);
    }

    #[test]
    fn whitespace_suffix_template_is_treated_as_absent() {
        let mut spec = spec_with_suffix();
        let prompt = PromptText::initial("Tag the text.").unwrap();
        spec.task_suffix_template = Some("   ".into());
        let a = assemble_task_input(&prompt, &sample(), &spec);
        spec.task_suffix_template = None;
        let b = assemble_task_input(&prompt, &sample(), &spec);
        assert_eq!(a, b);
    }

    #[test]
    fn options_slot_without_options_drops_the_block() {
        let spec = spec_with_suffix();
        let mut s = sample();
        s.options.clear();
        s.gold = "first".into();
        let prompt = PromptText::initial("Tag the text.").unwrap();
        let text = assemble_task_input(&prompt, &s, &spec);
        assert!(!text.contains("Options:"));
    }

    #[test]
    fn case_block_single_and_ordered() {
        let one = render_case_block(&[case(1)]).unwrap();
        assert!(one.starts_with("<1>\nThe model's input is:\nquestion 1\n"));
        assert!(one.ends_with("The model's final prediction is: B."));

        let three = render_case_block(&[case(1), case(2), case(3)]).unwrap();
        let positions: Vec<usize> = ["<1>", "<2>", "<3>"]
            .iter()
            .map(|m| three.find(m).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn case_block_embeds_multiline_response_verbatim() {
        let mut c = case(1);
        c.response = "line one\nline two".into();
        let block = render_case_block(&[c]).unwrap();
        assert!(block.contains(
            "The model's response (solution) is:\nline one\nline two\nThe correct label is: A"
        ));
    }

    #[test]
    fn empty_case_list_errors() {
        assert!(matches!(
            render_case_block(&[]),
            Err(PromptError::EmptyCaseList)
        ));
    }

    #[test]
    fn refine_template_requires_all_slots() {
        let err = MetaPromptTemplates::new("{current prompt} {correct string}", "{current prompt}")
            .unwrap_err();
        match err {
            PromptError::BadSlot { slot, found, .. } => {
                assert_eq!(slot, SLOT_ERROR_STRING);
                assert_eq!(found, 0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn refine_render_fills_both_blocks() {
        let templates = MetaPromptTemplates::builtin();
        let current = PromptText::initial("Do the task.").unwrap();
        let text = templates.render_refine(&current, &[case(1)], &[case(1), case(2)]);
        assert!(text.contains("The current prompt is:\n\"Do the task.\""));
        assert!(text.contains("It successfully handled the following examples:\n<1>"));
        assert!(text.contains("It failed on the following examples:\n<1>"));
        assert!(text.contains("within <START> and </START>"));
    }

    #[test]
    fn empty_success_side_renders_sentinel() {
        let templates = MetaPromptTemplates::builtin();
        let current = PromptText::initial("Do the task.").unwrap();
        let text = templates.render_refine(&current, &[], &[case(1)]);
        assert!(text.contains("It successfully handled the following examples:\n(none)"));
    }

    #[test]
    fn values_with_slot_syntax_are_not_reexpanded() {
        let templates = MetaPromptTemplates::builtin();
        let current = PromptText::initial("Keep {error string} literally.").unwrap();
        let text = templates.render_refine(&current, &[], &[case(1)]);
        assert!(text.contains("Keep {error string} literally."));
        // Exactly one failure block was inserted, from the real slot.
        assert_eq!(text.matches("question 1").count(), 1);
    }

    #[test]
    fn compress_render_is_pure() {
        let templates = MetaPromptTemplates::builtin();
        let current = PromptText::initial("Do the task.").unwrap();
        let a = templates.render_compress(&current);
        let b = templates.render_compress(&current);
        assert_eq!(a, b);
        assert!(a.contains("The current prompt is: \"Do the task.\""));
    }

    #[test]
    fn whitespace_prompt_is_rejected() {
        assert!(matches!(
            PromptText::initial("  \n "),
            Err(PromptError::EmptyPrompt)
        ));
    }

    #[test]
    fn extract_reads_marked_span() {
        assert_eq!(
            extract_candidate("<START>Do X carefully.</START>").unwrap(),
            "Do X carefully."
        );
        assert_eq!(
            extract_candidate("reasoning first...\n<START>\nonly this\n</START>\ntrailing")
                .unwrap(),
            "only this"
        );
    }

    #[test]
    fn extract_takes_last_pair() {
        // Enumerated pair-selection rules on a two-pair fixture: first pair
        // would give "draft", last pair gives "final"; the committed rule is
        // the last pair, confirmed against a manual slice.
        let out = "<START>draft</START> thinking more <START>final</START>";
        let manual = {
            let s = out.rfind("<START>").unwrap() + "<START>".len();
            let e = s + out[s..].find("</START>").unwrap();
            out[s..e].trim().to_string()
        };
        assert_eq!(extract_candidate(out).unwrap(), manual);
        assert_eq!(manual, "final");
    }

    #[test]
    fn extract_failures() {
        assert!(matches!(
            extract_candidate("no markers"),
            Err(PromptError::MarkersAbsent)
        ));
        assert!(matches!(
            extract_candidate("<START>   </START>"),
            Err(PromptError::EmptyCandidate)
        ));
        // Unterminated span counts as absent markers.
        assert!(matches!(
            extract_candidate("</START> then <START> oops"),
            Err(PromptError::MarkersAbsent)
        ));
    }
}
