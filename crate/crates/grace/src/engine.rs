//! The gated refinement / adaptive compression loop.
//!
//! One iteration is one optimizer consultation, so a run of `T`
//! iterations generates at most `T` candidate prompts. Each iteration is
//! either a refinement step or, when the previous iteration left the
//! reject counter at `K`, a compression step:
//!
//! - refinement: evaluate the current prompt on the train split (cached),
//!   partition into successes and failures, sample an update batch of
//!   each, render the refinement meta-prompt, and generate a candidate.
//!   The candidate is adopted only if its validation score strictly
//!   exceeds the incumbent's (exact rational comparison; ties keep the
//!   incumbent and count as rejections).
//! - compression: render the compression meta-prompt and adopt the
//!   distilled prompt unconditionally; its validation score is recorded
//!   for best-tracking and the trace only. The reject counter resets.
//!
//! A train split with no failures skips the iteration without consulting
//! the optimizer. Candidate extraction gets a bounded retry budget;
//! exhausting it blocks the update like a rejection (a failed compression
//! re-arms the counter at `K - 1` instead). The run halts early after
//! `early_stop_window` consecutive iterations without a new best
//! validation score, and always returns the best-scoring prompt ever
//! validated, earliest step winning ties.
//!
//! Per-sample evaluations are cached by `(prompt hash, sample id)`; the
//! cache is sound because the base model runs at temperature 0 and is
//! disabled otherwise. Uncached samples fan out across
//! `eval_concurrency` worker threads and join before scoring, so the
//! loop itself stays strictly sequential.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetSplits, Sample, TaskSpec};
use crate::gateway::{CompletionRequest, Gateway, GatewayError, Role};
use crate::prompt::{
    assemble_task_input, extract_candidate, CaseRecord, MetaPromptTemplates, PromptError,
    PromptOrigin, PromptText,
};
use crate::rng::SplitMix64;
use crate::scoring::{
    aggregate_with, binarize_by_quantile, score_sample, transport_failure_outcome, Metric,
    QuantileLabel, Rational, SampleOutcome, Score, ScoreError,
};
use crate::telemetry::UsageLedger;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("checkpoint does not match this run: {0}")]
    CheckpointMismatch(String),
}

/// Loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Maximum iterations `T`; also the optimizer generation budget.
    pub max_iters: u32,
    /// Consecutive blocked updates `K` that trigger compression.
    pub compression_trigger: u32,
    /// Success samples per update batch.
    pub n_success: usize,
    /// Failure samples per update batch.
    pub n_failure: usize,
    /// Halt after this many consecutive iterations without a new best.
    pub early_stop_window: Option<u32>,
    pub seed: u64,
    /// Worker threads for per-sample evaluation fan-out.
    pub eval_concurrency: usize,
    pub base_temperature: f64,
    pub optimizer_temperature: f64,
    /// Re-generations allowed when optimizer output has no candidate span.
    pub extraction_retries: u32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_iters: 80,
            compression_trigger: 5,
            n_success: 3,
            n_failure: 3,
            early_stop_window: Some(20),
            seed: 0,
            eval_concurrency: 8,
            base_temperature: 0.0,
            optimizer_temperature: 0.6,
            extraction_retries: 2,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.max_iters < 1 {
            return Err(EngineError::Config("max_iters must be >= 1".into()));
        }
        if self.compression_trigger < 1 {
            return Err(EngineError::Config(
                "compression_trigger must be >= 1".into(),
            ));
        }
        if self.n_success + self.n_failure < 1 {
            return Err(EngineError::Config(
                "update batch must hold at least one sample".into(),
            ));
        }
        if self.eval_concurrency < 1 {
            return Err(EngineError::Config("eval_concurrency must be >= 1".into()));
        }
        if self.base_temperature < 0.0 || self.optimizer_temperature < 0.0 {
            return Err(EngineError::Config("temperatures must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Accepted,
    Rejected,
    Compressed,
    SkippedNoFailures,
    ExtractionFailed,
}

/// One trace record per iteration.
///
/// `current_val` and `prompt_hash` describe the prompt that is current
/// once the iteration commits; `candidate_val` is the gated candidate's
/// validation score and is absent for compression (adoption is
/// unconditional) and for iterations that generated no candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub step: u32,
    pub kind: StepKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_val: Option<Score>,
    pub current_val: Score,
    pub prompt_hash: String,
}

/// Best validated prompt so far. `step` is 0 for the initial prompt and
/// `t + 1` for a prompt validated during iteration `t`; ties keep the
/// earliest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPrompt {
    pub prompt: PromptText,
    pub score: Score,
    pub step: u32,
}

type EvalCache = BTreeMap<String, BTreeMap<String, SampleOutcome>>;

/// Complete, checkpointable loop state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    /// False until the initial prompt's validation score is computed.
    pub initialized: bool,
    /// Next iteration index.
    pub step: u32,
    pub current: PromptText,
    pub current_val: Score,
    pub initial_val: Score,
    pub reject_counter: u32,
    pub stagnation_counter: u32,
    pub best: BestPrompt,
    /// Optimizer consultations so far; bounded by `max_iters`.
    pub generations: u32,
    pub trace: Vec<StepEvent>,
    pub rng_state: u64,
    /// `(prompt hash, sample id)` memo of base-model outcomes.
    pub eval_cache: EvalCache,
}

/// Evaluation of one prompt over one sample set.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub prompt_hash: String,
    /// Outcomes in sample order.
    pub outcomes: Vec<SampleOutcome>,
    pub score: Score,
    pub cache_hits: usize,
    /// Samples whose base call failed every retry (scored incorrect).
    pub transport_failures: usize,
}

/// A train sample together with its outcome under the current prompt.
#[derive(Debug, Clone)]
pub struct TrainCase {
    pub sample: Sample,
    pub outcome: SampleOutcome,
}

impl TrainCase {
    /// Render this case for the optimizer; `index` is its 1-based position
    /// within its block.
    pub fn case_record(&self, index: usize) -> CaseRecord {
        CaseRecord {
            index,
            question_input: self.sample.question.clone(),
            response: self.outcome.raw_response.clone(),
            label: self.sample.gold.clone(),
            prediction: self
                .outcome
                .extracted
                .clone()
                .unwrap_or_else(|| "(none)".to_string()),
        }
    }
}

/// Final result of a run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub best: BestPrompt,
    pub final_prompt: PromptText,
    pub final_val: Score,
    pub initial_val: Score,
    pub steps_executed: u32,
    pub generations: u32,
    pub trace: Vec<StepEvent>,
}

/// Whether `run` ran to completion or was interrupted by the observer.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub completed: bool,
    pub result: RunResult,
}

/// On-disk snapshot of a run, sufficient to resume it exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub task_name: String,
    pub config: EngineConfig,
    pub state: EngineState,
    pub ledger: UsageLedger,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Split evaluated train outcomes into success and failure cases.
///
/// Count metrics partition by per-sample correctness. Continuous metrics
/// are binarized by quantile: top fraction correct, bottom fraction
/// incorrect, the rest excluded from both sides. Samples that failed
/// transport are excluded rather than shown to the optimizer as model
/// errors.
pub fn partition_report(
    report: &EvalReport,
    samples: &[Sample],
    spec: &TaskSpec,
) -> Result<(Vec<TrainCase>, Vec<TrainCase>), EngineError> {
    debug_assert_eq!(report.outcomes.len(), samples.len());
    let mut successes = Vec::new();
    let mut failures = Vec::new();
    match spec.metric {
        Metric::Accuracy | Metric::SetF1 => {
            for (sample, outcome) in samples.iter().zip(&report.outcomes) {
                if outcome.transport_failed {
                    continue;
                }
                let case = TrainCase {
                    sample: sample.clone(),
                    outcome: outcome.clone(),
                };
                if outcome.correct {
                    successes.push(case);
                } else {
                    failures.push(case);
                }
            }
        }
        Metric::RougeL => {
            let values: Vec<(String, Rational)> = report
                .outcomes
                .iter()
                .filter(|o| !o.transport_failed)
                .map(|o| (o.sample_id.clone(), o.metric_value.clone()))
                .collect();
            if values.is_empty() {
                return Ok((successes, failures));
            }
            let labels = binarize_by_quantile(&values, &spec.binarize.top, &spec.binarize.bottom)?;
            for (sample, outcome) in samples.iter().zip(&report.outcomes) {
                if outcome.transport_failed {
                    continue;
                }
                let case = TrainCase {
                    sample: sample.clone(),
                    outcome: outcome.clone(),
                };
                match labels.get(&outcome.sample_id) {
                    Some(QuantileLabel::Correct) => successes.push(case),
                    Some(QuantileLabel::Incorrect) => failures.push(case),
                    _ => {}
                }
            }
        }
    }
    Ok((successes, failures))
}

/// Draw the update batch: up to `n_success` successes and `n_failure`
/// failures, uniformly without replacement, successes drawn first.
/// Deterministic given the generator state; picks keep draw order.
pub fn sample_update_batch(
    rng: &mut SplitMix64,
    successes: &[TrainCase],
    failures: &[TrainCase],
    n_success: usize,
    n_failure: usize,
) -> (Vec<TrainCase>, Vec<TrainCase>) {
    let pick = |rng: &mut SplitMix64, pool: &[TrainCase], k: usize| -> Vec<TrainCase> {
        rng.sample_indices(pool.len(), k)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect()
    };
    let s = pick(rng, successes, n_success);
    let f = pick(rng, failures, n_failure);
    (s, f)
}

/// The optimization loop. Owns its state; everything else is shared.
pub struct Engine {
    config: EngineConfig,
    task: TaskSpec,
    splits: DatasetSplits,
    templates: MetaPromptTemplates,
    gateway: std::sync::Arc<Gateway>,
    state: EngineState,
}

impl Engine {
    pub fn new(
        config: EngineConfig,
        task: TaskSpec,
        splits: DatasetSplits,
        templates: MetaPromptTemplates,
        gateway: std::sync::Arc<Gateway>,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        if splits.train.is_empty() || splits.validation.is_empty() {
            return Err(EngineError::Config(
                "train and validation splits must be non-empty".into(),
            ));
        }
        let initial = PromptText::initial(&task.initial_prompt)?;
        let placeholder = Score {
            value: Rational::from(num::BigInt::from(0)),
            n: splits.validation.len(),
            metric: task.metric,
        };
        let state = EngineState {
            initialized: false,
            step: 0,
            current: initial.clone(),
            current_val: placeholder.clone(),
            initial_val: placeholder.clone(),
            reject_counter: 0,
            stagnation_counter: 0,
            best: BestPrompt {
                prompt: initial,
                score: placeholder,
                step: 0,
            },
            generations: 0,
            trace: Vec::new(),
            rng_state: SplitMix64::new(config.seed).state(),
            eval_cache: EvalCache::new(),
        };
        Ok(Self {
            config,
            task,
            splits,
            templates,
            gateway,
            state,
        })
    }

    /// Restore a run from a checkpoint. The configuration and task must
    /// match the checkpointed ones exactly.
    pub fn from_checkpoint(
        checkpoint: Checkpoint,
        config: EngineConfig,
        task: TaskSpec,
        splits: DatasetSplits,
        templates: MetaPromptTemplates,
        gateway: std::sync::Arc<Gateway>,
    ) -> Result<Self, EngineError> {
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(EngineError::CheckpointMismatch(format!(
                "checkpoint version {} (expected {})",
                checkpoint.version, CHECKPOINT_VERSION
            )));
        }
        if checkpoint.task_name != task.name {
            return Err(EngineError::CheckpointMismatch(format!(
                "checkpoint is for task {:?}, not {:?}",
                checkpoint.task_name, task.name
            )));
        }
        if checkpoint.config != config {
            return Err(EngineError::CheckpointMismatch(
                "engine config differs from the checkpointed one".into(),
            ));
        }
        config.validate()?;
        Ok(Self {
            config,
            task,
            splits,
            templates,
            gateway,
            state: checkpoint.state,
        })
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn splits(&self) -> &DatasetSplits {
        &self.splits
    }

    pub fn checkpoint(&self, ledger: UsageLedger) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            task_name: self.task.name.clone(),
            config: self.config.clone(),
            state: self.state.clone(),
            ledger,
        }
    }

    /// Evaluate a prompt on an arbitrary sample set (cached, fanned out).
    pub fn evaluate(
        &mut self,
        prompt: &PromptText,
        samples: &[Sample],
    ) -> Result<EvalReport, EngineError> {
        Self::evaluate_inner(
            &mut self.state.eval_cache,
            &self.task,
            &self.config,
            &self.gateway,
            prompt,
            samples,
        )
    }

    /// Evaluate the best prompt on the test split, if one exists.
    pub fn evaluate_best_on_test(&mut self) -> Result<Option<EvalReport>, EngineError> {
        if self.splits.test.is_empty() {
            return Ok(None);
        }
        let prompt = self.state.best.prompt.clone();
        let samples = self.splits.test.clone();
        self.evaluate(&prompt, &samples).map(Some)
    }

    /// Run the loop to completion (or early stop), calling `on_step` after
    /// the initial evaluation and after every committed iteration. The
    /// observer may interrupt the run by returning `ControlFlow::Break`;
    /// the state is left at the last committed iteration either way.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&EngineState) -> ControlFlow<()>,
    ) -> Result<RunOutcome, EngineError> {
        if !self.state.initialized {
            let prompt = self.state.current.clone();
            let samples = self.splits.validation.clone();
            let report = self.evaluate(&prompt, &samples)?;
            self.state.current_val = report.score.clone();
            self.state.initial_val = report.score.clone();
            self.state.best = BestPrompt {
                prompt,
                score: report.score,
                step: 0,
            };
            self.state.initialized = true;
            if on_step(&self.state).is_break() {
                return Ok(self.outcome(false));
            }
        }
        while self.state.step < self.config.max_iters {
            if let Some(window) = self.config.early_stop_window {
                if self.state.stagnation_counter >= window {
                    break;
                }
            }
            let t = self.state.step;
            if self.state.reject_counter >= self.config.compression_trigger {
                self.compression_step(t)?;
            } else {
                self.refinement_step(t)?;
            }
            self.state.step = t + 1;
            if on_step(&self.state).is_break() {
                return Ok(self.outcome(false));
            }
        }
        Ok(self.outcome(true))
    }

    fn outcome(&self, completed: bool) -> RunOutcome {
        RunOutcome {
            completed,
            result: RunResult {
                best: self.state.best.clone(),
                final_prompt: self.state.current.clone(),
                final_val: self.state.current_val.clone(),
                initial_val: self.state.initial_val.clone(),
                steps_executed: self.state.step,
                generations: self.state.generations,
                trace: self.state.trace.clone(),
            },
        }
    }

    fn refinement_step(&mut self, t: u32) -> Result<(), EngineError> {
        let current = self.state.current.clone();
        let train = self.splits.train.clone();
        let train_report = self.evaluate(&current, &train)?;
        let (successes, failures) = partition_report(&train_report, &train, &self.task)?;

        if failures.is_empty() {
            // A train-perfect prompt gives the optimizer nothing to fix;
            // skip without consuming the generation budget or the reject
            // counter, but count toward stagnation.
            self.state.stagnation_counter += 1;
            let event = StepEvent {
                step: t,
                kind: StepKind::SkippedNoFailures,
                candidate_val: None,
                current_val: self.state.current_val.clone(),
                prompt_hash: current.content_hash(),
            };
            self.state.trace.push(event);
            return Ok(());
        }

        let mut rng = SplitMix64::from_state(self.state.rng_state);
        let (s_batch, f_batch) = sample_update_batch(
            &mut rng,
            &successes,
            &failures,
            self.config.n_success,
            self.config.n_failure,
        );
        self.state.rng_state = rng.state();
        let s_records: Vec<CaseRecord> = s_batch
            .iter()
            .enumerate()
            .map(|(i, case)| case.case_record(i + 1))
            .collect();
        let f_records: Vec<CaseRecord> = f_batch
            .iter()
            .enumerate()
            .map(|(i, case)| case.case_record(i + 1))
            .collect();
        let meta = self
            .templates
            .render_refine(&current, &s_records, &f_records);

        let generated = self.generate_candidate(&meta, t, "refine")?;
        self.state.generations += 1;
        match generated {
            None => {
                // Extraction failure blocks the update like a rejection.
                self.state.reject_counter += 1;
                self.state.stagnation_counter += 1;
                let event = StepEvent {
                    step: t,
                    kind: StepKind::ExtractionFailed,
                    candidate_val: None,
                    current_val: self.state.current_val.clone(),
                    prompt_hash: current.content_hash(),
                };
                self.state.trace.push(event);
            }
            Some(text) => {
                let candidate = PromptText::new(&text, PromptOrigin::Refined, Some(t))?;
                let validation = self.splits.validation.clone();
                let report = self.evaluate(&candidate, &validation)?;
                let cand_val = report.score;
                let new_best = self.track_best(&candidate, &cand_val, t);
                if cand_val.value > self.state.current_val.value {
                    let event = StepEvent {
                        step: t,
                        kind: StepKind::Accepted,
                        candidate_val: Some(cand_val.clone()),
                        current_val: cand_val.clone(),
                        prompt_hash: candidate.content_hash(),
                    };
                    self.state.trace.push(event);
                    self.state.current = candidate;
                    self.state.current_val = cand_val;
                    self.state.reject_counter = 0;
                } else {
                    let event = StepEvent {
                        step: t,
                        kind: StepKind::Rejected,
                        candidate_val: Some(cand_val),
                        current_val: self.state.current_val.clone(),
                        prompt_hash: current.content_hash(),
                    };
                    self.state.trace.push(event);
                    self.state.reject_counter += 1;
                }
                self.bump_stagnation(new_best);
            }
        }
        Ok(())
    }

    fn compression_step(&mut self, t: u32) -> Result<(), EngineError> {
        let current = self.state.current.clone();
        let meta = self.templates.render_compress(&current);
        match self.generate_candidate(&meta, t, "compress")? {
            None => {
                // Abort this compression but re-arm: one more blocked
                // update re-triggers it.
                self.state.reject_counter = self.config.compression_trigger - 1;
                self.state.stagnation_counter += 1;
                let event = StepEvent {
                    step: t,
                    kind: StepKind::ExtractionFailed,
                    candidate_val: None,
                    current_val: self.state.current_val.clone(),
                    prompt_hash: current.content_hash(),
                };
                self.state.trace.push(event);
            }
            Some(text) => {
                let compressed = PromptText::new(&text, PromptOrigin::Compressed, Some(t))?;
                let validation = self.splits.validation.clone();
                // Adoption is unconditional; the score feeds best-tracking
                // and the trace only.
                let report = self.evaluate(&compressed, &validation)?;
                let val = report.score;
                let new_best = self.track_best(&compressed, &val, t);
                let event = StepEvent {
                    step: t,
                    kind: StepKind::Compressed,
                    candidate_val: None,
                    current_val: val.clone(),
                    prompt_hash: compressed.content_hash(),
                };
                self.state.trace.push(event);
                self.state.current = compressed;
                self.state.current_val = val;
                self.state.reject_counter = 0;
                self.bump_stagnation(new_best);
            }
        }
        Ok(())
    }

    fn track_best(&mut self, prompt: &PromptText, score: &Score, t: u32) -> bool {
        if score.value > self.state.best.score.value {
            self.state.best = BestPrompt {
                prompt: prompt.clone(),
                score: score.clone(),
                step: t + 1,
            };
            return true;
        }
        false
    }

    fn bump_stagnation(&mut self, new_best: bool) {
        if new_best {
            self.state.stagnation_counter = 0;
        } else {
            self.state.stagnation_counter += 1;
        }
    }

    /// One optimizer consultation with the extraction retry budget.
    /// Returns `None` when every attempt produced output without a
    /// candidate span. The generation counter moves only when the
    /// iteration commits, so an aborted call is not double-counted after
    /// resume.
    fn generate_candidate(
        &mut self,
        meta_prompt: &str,
        t: u32,
        phase: &str,
    ) -> Result<Option<String>, EngineError> {
        let attempts = 1 + self.config.extraction_retries;
        for attempt in 1..=attempts {
            let tag = format!("step{t}-{phase}-try{attempt}");
            let request = CompletionRequest::user(
                Role::Optimizer,
                meta_prompt,
                self.config.optimizer_temperature,
                &tag,
            );
            let result = self.gateway.complete(&request)?;
            match extract_candidate(&result.text) {
                Ok(text) => return Ok(Some(text)),
                Err(_) if attempt < attempts => continue,
                Err(_) => break,
            }
        }
        Ok(None)
    }

    fn evaluate_inner(
        cache: &mut EvalCache,
        task: &TaskSpec,
        config: &EngineConfig,
        gateway: &Gateway,
        prompt: &PromptText,
        samples: &[Sample],
    ) -> Result<EvalReport, EngineError> {
        let hash = prompt.content_hash();
        let cache_enabled = config.base_temperature == 0.0;
        let cached = cache.entry(hash.clone()).or_default();

        let missing: Vec<(usize, &Sample)> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| !cache_enabled || !cached.contains_key(&s.id))
            .collect();
        let cache_hits = samples.len() - missing.len();

        let fresh: Mutex<Vec<(usize, SampleOutcome)>> = Mutex::new(Vec::new());
        let fatal: Mutex<Option<EngineError>> = Mutex::new(None);
        let failed = AtomicBool::new(false);
        let next = AtomicUsize::new(0);
        let workers = config.eval_concurrency.min(missing.len().max(1));

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if failed.load(Ordering::Relaxed) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= missing.len() {
                        break;
                    }
                    let (position, sample) = missing[i];
                    let input = assemble_task_input(prompt, sample, task);
                    let tag = format!("eval-{}-{}", &hash[..12], sample.id);
                    let request =
                        CompletionRequest::user(Role::Base, &input, config.base_temperature, &tag);
                    match gateway.complete(&request) {
                        Ok(result) => {
                            let outcome = score_sample(&result.text, sample, task);
                            fresh.lock().expect("eval lock").push((position, outcome));
                        }
                        Err(e) if e.is_sample_recoverable() => {
                            let outcome = transport_failure_outcome(sample, task);
                            fresh.lock().expect("eval lock").push((position, outcome));
                        }
                        Err(e) => {
                            *fatal.lock().expect("eval lock") = Some(EngineError::Gateway(e));
                            failed.store(true, Ordering::Relaxed);
                            break;
                        }
                    }
                });
            }
        });

        if let Some(err) = fatal.into_inner().expect("eval lock") {
            return Err(err);
        }
        let mut fresh = fresh.into_inner().expect("eval lock");
        fresh.sort_by_key(|(position, _)| *position);

        let mut by_position: BTreeMap<usize, SampleOutcome> = fresh.into_iter().collect();
        let mut outcomes = Vec::with_capacity(samples.len());
        let mut transport_failures = 0;
        for (i, sample) in samples.iter().enumerate() {
            let outcome = match by_position.remove(&i) {
                Some(outcome) => {
                    if cache_enabled && !outcome.transport_failed {
                        cached.insert(sample.id.clone(), outcome.clone());
                    }
                    outcome
                }
                None => cached
                    .get(&sample.id)
                    .expect("outcome present for every sample")
                    .clone(),
            };
            if outcome.transport_failed {
                transport_failures += 1;
            }
            outcomes.push(outcome);
        }
        let score = aggregate_with(&outcomes, task.metric, task.f1_averaging)?;
        Ok(EvalReport {
            prompt_hash: hash,
            outcomes,
            score,
            cache_hits,
            transport_failures,
        })
    }
}
