//! Shared harness for the acceptance suite: a content-keyed fake base
//! model, scripted optimizer scenarios, and an independent hand-coded
//! simulation of the optimization loop to check engine traces against.

// Each integration-test file links its own copy; not all use everything.
#![allow(dead_code)]

use std::ops::ControlFlow;
use std::sync::Arc;

use grace::dataset::{DatasetSplits, Sample, TaskSpec};
use grace::engine::{Engine, EngineConfig, RunOutcome, StepKind};
use grace::gateway::{
    Backend, BackendError, BackendResponse, CompletionRequest, Gateway, RetryPolicy, Role,
    ScriptEntry, ScriptedProvider,
};
use grace::prompt::MetaPromptTemplates;
use grace::rng::SplitMix64;
use grace::scoring::{Metric, Rational};
use grace::telemetry::Telemetry;

pub const N_TRAIN: usize = 10;
pub const N_VAL: u64 = 8;

/// Deterministic base model: a prompt carries a `[[target:k]]` tag and
/// sample `p{i}` is answered correctly iff `i < k`. Validation scores are
/// therefore exactly `k / N_VAL`, and with targets capped below `N_TRAIN`
/// the train split always contains a failure.
pub struct RuleBase;

impl Backend for RuleBase {
    fn attempt(&self, request: &CompletionRequest) -> Result<BackendResponse, BackendError> {
        let text = request.rendered_text();
        let target: usize = text
            .split("[[target:")
            .nth(1)
            .and_then(|rest| rest.split("]]").next())
            .and_then(|num| num.trim().parse().ok())
            .unwrap_or(0);
        let index: usize = text
            .split("Sample ")
            .nth(1)
            .and_then(|rest| rest.split(':').next())
            .map(|id| id.trim_start_matches(|c: char| c.is_alphabetic()))
            .and_then(|digits| digits.parse().ok())
            .unwrap_or(usize::MAX);
        let answer = if index < target { "ok" } else { "no" };
        Ok(BackendResponse {
            text: format!("\\boxed{{{answer}}}"),
            usage: None,
        })
    }

    fn id(&self) -> &str {
        "rule-base"
    }
}

pub fn rule_samples(prefix: &str, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample {
            id: format!("{prefix}{i}"),
            question: format!("Sample {prefix}{i}: respond as instructed."),
            gold: "ok".into(),
            options: Vec::new(),
        })
        .collect()
}

pub fn rule_task(init_target: u64) -> TaskSpec {
    TaskSpec::new(
        "scenario",
        Metric::Accuracy,
        &format!("Seed prompt. [[target:{init_target}]]"),
        "Respond with \\boxed{ok} or \\boxed{no}.",
    )
}

pub fn rule_splits() -> DatasetSplits {
    DatasetSplits {
        train: rule_samples("t", N_TRAIN),
        validation: rule_samples("v", N_VAL as usize),
        test: Vec::new(),
    }
}

/// What the scripted optimizer does at one consultation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptStep {
    /// Emit a well-formed candidate whose validation score is `k / N_VAL`.
    Candidate(u64),
    /// Emit output with no candidate span, exhausting the retry budget.
    NoMarkers,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub steps: Vec<OptStep>,
    pub init_target: u64,
    pub max_iters: u32,
    pub compression_trigger: u32,
    pub extraction_retries: u32,
    pub early_stop_window: Option<u32>,
    pub seed: u64,
}

/// Randomized scenario; targets stay in `0..=N_VAL` so scores are always
/// representable and the train split always has failures.
pub fn random_scenario(seed: u64) -> Scenario {
    let mut g = SplitMix64::new(seed.wrapping_mul(0x9E37) ^ 0xC0FFEE);
    let max_iters = 5 + g.next_below(26) as u32;
    let compression_trigger = [1u32, 2, 3, 5][g.next_below(4) as usize];
    let extraction_retries = g.next_below(3) as u32;
    let early_stop_window = match g.next_below(3) {
        0 => None,
        _ => Some(4 + g.next_below(10) as u32),
    };
    let init_target = g.next_below(N_VAL + 1);
    let steps = (0..max_iters)
        .map(|_| {
            if g.next_below(100) < 12 {
                OptStep::NoMarkers
            } else {
                OptStep::Candidate(g.next_below(N_VAL + 1))
            }
        })
        .collect();
    Scenario {
        steps,
        init_target,
        max_iters,
        compression_trigger,
        extraction_retries,
        early_stop_window,
        seed,
    }
}

pub fn optimizer_script(scenario: &Scenario) -> Vec<ScriptEntry> {
    let mut entries = Vec::new();
    for (j, step) in scenario.steps.iter().enumerate() {
        match step {
            OptStep::Candidate(target) => entries.push(ScriptEntry::any(&format!(
                "<START>Prompt c{j}. [[target:{target}]]</START>"
            ))),
            OptStep::NoMarkers => {
                for attempt in 0..=scenario.extraction_retries {
                    entries.push(ScriptEntry::any(&format!(
                        "step {j} attempt {attempt}: thinking aloud, no markers"
                    )));
                }
            }
        }
    }
    entries
}

pub fn engine_config_for(scenario: &Scenario) -> EngineConfig {
    EngineConfig {
        max_iters: scenario.max_iters,
        compression_trigger: scenario.compression_trigger,
        n_success: 3,
        n_failure: 3,
        early_stop_window: scenario.early_stop_window,
        seed: scenario.seed,
        eval_concurrency: 2,
        base_temperature: 0.0,
        optimizer_temperature: 0.6,
        extraction_retries: scenario.extraction_retries,
    }
}

/// Engine-side observations captured after initialization and after every
/// committed iteration.
#[derive(Debug, Clone)]
pub struct IterSnapshot {
    pub step: u32,
    pub reject_counter: u32,
    pub stagnation_counter: u32,
    pub best_value: Rational,
    pub best_step: u32,
    pub generations: u32,
}

pub struct ScenarioRun {
    pub outcome: RunOutcome,
    pub snapshots: Vec<IterSnapshot>,
    pub telemetry: Arc<Telemetry>,
}

pub fn build_engine(scenario: &Scenario) -> (Engine, Arc<Telemetry>) {
    let telemetry = Arc::new(Telemetry::in_memory());
    let gateway = Gateway::new(telemetry.clone())
        .with_role_config(
            Role::Base,
            Arc::new(RuleBase),
            RetryPolicy {
                max_attempts: 1,
                base_delay_ms: 0,
                max_delay_ms: 0,
            },
            8,
        )
        .with_role(
            Role::Optimizer,
            Arc::new(ScriptedProvider::new("opt", optimizer_script(scenario))),
        );
    let engine = Engine::new(
        engine_config_for(scenario),
        rule_task(scenario.init_target),
        rule_splits(),
        MetaPromptTemplates::builtin(),
        Arc::new(gateway),
    )
    .expect("scenario engine builds");
    (engine, telemetry)
}

pub fn run_scenario(scenario: &Scenario) -> ScenarioRun {
    let (mut engine, telemetry) = build_engine(scenario);
    let mut snapshots = Vec::new();
    let outcome = engine
        .run(|state| {
            snapshots.push(IterSnapshot {
                step: state.step,
                reject_counter: state.reject_counter,
                stagnation_counter: state.stagnation_counter,
                best_value: state.best.score.value.clone(),
                best_step: state.best.step,
                generations: state.generations,
            });
            ControlFlow::Continue(())
        })
        .expect("scenario run succeeds");
    ScenarioRun {
        outcome,
        snapshots,
        telemetry,
    }
}

pub fn frac(numerator: u64, denominator: u64) -> Rational {
    Rational::new(numerator.into(), denominator.into())
}

// ---------------------------------------------------------------------------
// Independent simulation
// ---------------------------------------------------------------------------

/// Trace record produced by the hand-coded simulation. Scores are raw
/// `(numerator, denominator)` pairs over the validation set.
pub mod oracle {
    use super::{OptStep, Scenario, N_VAL};

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum SimKind {
        Accepted,
        Rejected,
        Compressed,
        ExtractionFailed,
    }

    #[derive(Debug, Clone, PartialEq, Eq)]
    pub struct SimEvent {
        pub step: u32,
        pub kind: SimKind,
        pub candidate_val: Option<(u64, u64)>,
        pub current_val: (u64, u64),
    }

    #[derive(Debug, Clone, PartialEq, Eq)]
    pub struct SimResult {
        pub events: Vec<SimEvent>,
        pub best_val: (u64, u64),
        pub best_step: u32,
        pub generations: u32,
        pub reject_counter: u32,
        pub stagnation_counter: u32,
    }

    /// Hand-coded walk of the loop semantics: one candidate per
    /// iteration through the two gates; `K` consecutive blocked updates
    /// schedule a compression that replaces the following iteration's
    /// refinement and is adopted without the gate; failed extraction
    /// blocks like a rejection (a failed compression re-arms at `K - 1`);
    /// the run halts once `early_stop_window` consecutive iterations set
    /// no new best.
    pub fn simulate(scenario: &Scenario) -> SimResult {
        let k = scenario.compression_trigger;
        let mut events = Vec::new();
        let mut current = scenario.init_target;
        let mut best = scenario.init_target;
        let mut best_step = 0u32;
        let mut reject = 0u32;
        let mut stagnation = 0u32;
        let mut generations = 0u32;

        for t in 0..scenario.max_iters {
            if let Some(window) = scenario.early_stop_window {
                if stagnation >= window {
                    break;
                }
            }
            // Exactly one optimizer consultation per iteration.
            let action = scenario.steps[t as usize];
            generations += 1;
            if reject == k {
                match action {
                    OptStep::NoMarkers => {
                        events.push(SimEvent {
                            step: t,
                            kind: SimKind::ExtractionFailed,
                            candidate_val: None,
                            current_val: (current, N_VAL),
                        });
                        reject = k - 1;
                        stagnation += 1;
                    }
                    OptStep::Candidate(value) => {
                        events.push(SimEvent {
                            step: t,
                            kind: SimKind::Compressed,
                            candidate_val: None,
                            current_val: (value, N_VAL),
                        });
                        current = value;
                        reject = 0;
                        if value > best {
                            best = value;
                            best_step = t + 1;
                            stagnation = 0;
                        } else {
                            stagnation += 1;
                        }
                    }
                }
            } else {
                match action {
                    OptStep::NoMarkers => {
                        events.push(SimEvent {
                            step: t,
                            kind: SimKind::ExtractionFailed,
                            candidate_val: None,
                            current_val: (current, N_VAL),
                        });
                        reject += 1;
                        stagnation += 1;
                    }
                    OptStep::Candidate(value) => {
                        let new_best = value > best;
                        if new_best {
                            best = value;
                            best_step = t + 1;
                        }
                        if value > current {
                            events.push(SimEvent {
                                step: t,
                                kind: SimKind::Accepted,
                                candidate_val: Some((value, N_VAL)),
                                current_val: (value, N_VAL),
                            });
                            current = value;
                            reject = 0;
                        } else {
                            events.push(SimEvent {
                                step: t,
                                kind: SimKind::Rejected,
                                candidate_val: Some((value, N_VAL)),
                                current_val: (current, N_VAL),
                            });
                            reject += 1;
                        }
                        if new_best {
                            stagnation = 0;
                        } else {
                            stagnation += 1;
                        }
                    }
                }
            }
        }
        SimResult {
            events,
            best_val: (best, N_VAL),
            best_step,
            generations,
            reject_counter: reject,
            stagnation_counter: stagnation,
        }
    }
}

pub fn sim_kind_of(kind: StepKind) -> Option<oracle::SimKind> {
    match kind {
        StepKind::Accepted => Some(oracle::SimKind::Accepted),
        StepKind::Rejected => Some(oracle::SimKind::Rejected),
        StepKind::Compressed => Some(oracle::SimKind::Compressed),
        StepKind::ExtractionFailed => Some(oracle::SimKind::ExtractionFailed),
        StepKind::SkippedNoFailures => None,
    }
}
