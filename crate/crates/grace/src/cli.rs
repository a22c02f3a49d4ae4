//! `grace run` and `grace report`.
//!
//! `run` loads a config, validates it before touching any provider,
//! executes the optimization loop, and leaves five artifacts in the run
//! directory: `trace.log`, `calls.log`, `ledger.json`, `best_prompt.txt`,
//! and `checkpoint.json`. The checkpoint is rewritten after every
//! iteration, so `--resume` continues an interrupted run without redoing
//! committed steps; the resumed trace is byte-identical to an
//! uninterrupted run's. `report` reads a finished (or interrupted) run
//! directory, prints a summary, and writes `convergence.csv` with the
//! best-validation-score series per generated prompt.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use num::ToPrimitive;

use crate::config::{BuiltProvider, EngineOverrides, RunConfigFile, DEFAULT_TEST_CAP};
use crate::dataset::{load_samples, make_splits, SplitCounts, TestCapMode};
use crate::engine::{Checkpoint, Engine, EngineConfig, StepEvent, StepKind};
use crate::gateway::{Gateway, Role};
use crate::prompt::{CaseRecord, PromptText};
use crate::scoring::{parse_rational, Score};
use crate::telemetry::{
    estimate_cost, CostBreakdown, LedgerSummary, RunDir, Telemetry, CHECKPOINT_FILE,
};

pub const CONVERGENCE_FILE: &str = "convergence.csv";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config_path: PathBuf,
    pub overrides: EngineOverrides,
    pub resume: bool,
    pub dry_run: bool,
}

/// What `run` printed, kept structured for tests.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub best_val: Score,
    pub best_step: u32,
    pub test_score: Option<Score>,
    pub steps_executed: u32,
    pub generations: u32,
    pub interrupted: bool,
}

/// Execute a run (or just validate and render with `--dry-run`, which
/// returns `None`). `interrupt_after` stops the loop after that many
/// committed iterations; it exists so tests can interrupt and resume
/// runs deterministically.
pub fn cmd_run(options: &RunOptions) -> anyhow::Result<Option<RunSummary>> {
    cmd_run_with_interrupt(options, None)
}

pub fn cmd_run_with_interrupt(
    options: &RunOptions,
    interrupt_after: Option<u32>,
) -> anyhow::Result<Option<RunSummary>> {
    let config = RunConfigFile::load(&options.config_path)?;
    let task = config.task_spec()?;
    let templates = config.templates()?;
    let engine_config = config.engine_config(&options.overrides);
    engine_config.validate()?;
    let pricing = config.pricing_table()?;

    let data = load_samples(&config.dataset.path, config.dataset.format.as_deref())?;
    let counts = SplitCounts {
        train: config.dataset.train.unwrap_or(0),
        validation: config.dataset.validation.unwrap_or(0),
        test: config.dataset.test.unwrap_or(0),
    };
    if !data.has_tags() && (counts.train == 0 || counts.validation == 0) {
        bail!("dataset has no split tags; set dataset.train and dataset.validation counts");
    }
    let mut splits = make_splits(&data, counts, engine_config.seed)?;
    if data.has_tags() {
        let cap = config.dataset.test_cap.unwrap_or(DEFAULT_TEST_CAP);
        if cap > 0 {
            let mode = config.dataset.test_cap_mode.unwrap_or(TestCapMode::Head);
            splits.cap_test(cap, mode, engine_config.seed);
        }
    }

    if options.dry_run {
        print_dry_run(&task, &templates, &splits);
        return Ok(None);
    }

    let run_dir = RunDir::create(&config.output.dir)?;
    if run_dir.has_checkpoint() && !options.resume {
        bail!(
            "{} already holds a checkpoint; pass --resume to continue it",
            run_dir.root().display()
        );
    }
    if options.resume && !run_dir.has_checkpoint() {
        bail!(
            "--resume given but {} has no checkpoint",
            run_dir.root().display()
        );
    }
    if !options.resume {
        // Fresh runs must not append to leftover logs.
        let _ = std::fs::remove_file(run_dir.trace_path());
        let _ = std::fs::remove_file(run_dir.calls_path());
    }

    let telemetry = Arc::new(Telemetry::with_run_dir(&run_dir)?);
    let base = config.providers.base.build("base")?;
    let optimizer = config.providers.optimizer.build("optimizer")?;
    let gateway = Arc::new(
        Gateway::new(telemetry.clone())
            .with_role_config(
                Role::Base,
                base.backend(),
                config.providers.base.retry_policy(),
                config.providers.base.max_in_flight(),
            )
            .with_role_config(
                Role::Optimizer,
                optimizer.backend(),
                config.providers.optimizer.retry_policy(),
                config.providers.optimizer.max_in_flight(),
            ),
    );

    let mut engine = if options.resume {
        let checkpoint: Checkpoint = run_dir.read_json(CHECKPOINT_FILE)?;
        telemetry.restore_ledger(checkpoint.ledger.clone());
        advance_scripts(&checkpoint, &base, &optimizer);
        let engine = Engine::from_checkpoint(
            checkpoint,
            engine_config.clone(),
            task,
            splits,
            templates,
            gateway,
        )?;
        // Rebuild the trace file from the checkpoint so the final file
        // matches an uninterrupted run byte for byte.
        let lines: Vec<String> = engine
            .state()
            .trace
            .iter()
            .map(|e| serde_json::to_string(e).expect("event serializes"))
            .collect();
        telemetry.rewrite_trace_lines(&lines)?;
        engine
    } else {
        Engine::new(engine_config.clone(), task, splits, templates, gateway)?
    };

    let mut written = engine.state().trace.len();
    let run_result = {
        let telemetry = telemetry.clone();
        let engine_config = engine_config.clone();
        let task_name = engine.task().name.clone();
        let run_dir = run_dir.clone();
        engine.run(move |state| {
            for event in &state.trace[written..] {
                let line = serde_json::to_string(event).expect("event serializes");
                let _ = telemetry.append_trace_line(&line);
            }
            written = state.trace.len();
            let checkpoint = Checkpoint {
                version: crate::engine::CHECKPOINT_VERSION,
                task_name: task_name.clone(),
                config: engine_config.clone(),
                state: state.clone(),
                ledger: telemetry.ledger(),
            };
            let _ = run_dir.write_json(CHECKPOINT_FILE, &checkpoint);
            match interrupt_after {
                Some(limit) if state.step >= limit => ControlFlow::Break(()),
                _ => ControlFlow::Continue(()),
            }
        })
    };

    let outcome = match run_result {
        Ok(outcome) => outcome,
        Err(err) => {
            // Persist a consistent snapshot before surfacing the abort.
            let checkpoint = engine.checkpoint(telemetry.ledger());
            let _ = run_dir.write_json(CHECKPOINT_FILE, &checkpoint);
            let _ = run_dir
                .write_ledger_summary(&LedgerSummary::new(telemetry.ledger(), pricing.clone()));
            return Err(err).context("run aborted; checkpoint persisted");
        }
    };

    run_dir.write_best_prompt(&outcome.result.best.prompt.text)?;

    let test_score = if outcome.completed {
        engine.evaluate_best_on_test()?.map(|report| report.score)
    } else {
        None
    };
    // Final checkpoint reflects any test-evaluation cache additions.
    let checkpoint = engine.checkpoint(telemetry.ledger());
    run_dir.write_json(CHECKPOINT_FILE, &checkpoint)?;
    run_dir.write_ledger_summary(&LedgerSummary::new(telemetry.ledger(), pricing))?;

    let result = outcome.result;
    println!(
        "run {}: {} steps, {} prompts generated",
        engine.task().name,
        result.steps_executed,
        result.generations
    );
    println!(
        "best validation score: {} at step {}",
        result.best.score, result.best.step
    );
    if let Some(test) = &test_score {
        println!("test score of best prompt: {test}");
    }
    if !outcome.completed {
        println!("interrupted; resume with --resume");
    }
    Ok(Some(RunSummary {
        run_dir: run_dir.root().to_path_buf(),
        best_val: result.best.score,
        best_step: result.best.step,
        test_score,
        steps_executed: result.steps_executed,
        generations: result.generations,
        interrupted: !outcome.completed,
    }))
}

fn advance_scripts(checkpoint: &Checkpoint, base: &BuiltProvider, optimizer: &BuiltProvider) {
    if let Some(script) = base.scripted() {
        script.advance(checkpoint.ledger.role(Role::Base).api_calls as usize);
    }
    if let Some(script) = optimizer.scripted() {
        script.advance(checkpoint.ledger.role(Role::Optimizer).api_calls as usize);
    }
}

fn print_dry_run(
    task: &crate::dataset::TaskSpec,
    templates: &crate::prompt::MetaPromptTemplates,
    splits: &crate::dataset::DatasetSplits,
) {
    let prompt = PromptText::initial(&task.initial_prompt).expect("validated");
    println!("dry run: config is valid");
    println!(
        "splits: {} train / {} validation / {} test",
        splits.train.len(),
        splits.validation.len(),
        splits.test.len()
    );
    if let Some(sample) = splits.validation.first() {
        println!(
            "\n--- assembled input for validation sample {} ---",
            sample.id
        );
        println!(
            "{}",
            crate::prompt::assemble_task_input(&prompt, sample, task)
        );
    }
    let placeholder = CaseRecord {
        index: 1,
        question_input: "(dry run)".into(),
        response: "(dry run)".into(),
        label: "(dry run)".into(),
        prediction: "(dry run)".into(),
    };
    println!("\n--- refinement meta-prompt (placeholder cases) ---");
    println!(
        "{}",
        templates.render_refine(
            &prompt,
            std::slice::from_ref(&placeholder),
            std::slice::from_ref(&placeholder)
        )
    );
}

/// One row of the convergence series.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergencePoint {
    pub prompts_generated: u32,
    pub best_val: Score,
}

#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub points: Vec<ConvergencePoint>,
    pub event_counts: BTreeMap<String, usize>,
    pub cost: Option<CostBreakdown>,
    pub best_val: Score,
    pub best_step: u32,
    pub steps: usize,
    pub text: String,
}

/// Summarize a run directory and write `convergence.csv`.
pub fn cmd_report(run_dir_path: &Path) -> anyhow::Result<ReportSummary> {
    let run_dir = RunDir::open(run_dir_path);
    let checkpoint: Checkpoint = run_dir
        .read_json(CHECKPOINT_FILE)
        .context("run directory has no readable checkpoint")?;
    let events: Vec<StepEvent> = run_dir
        .read_trace_values()?
        .into_iter()
        .enumerate()
        .map(|(i, value)| {
            serde_json::from_value(value).map_err(|e| {
                anyhow::anyhow!(
                    "{} line {}: bad step event: {e}",
                    run_dir.trace_path().display(),
                    i + 1
                )
            })
        })
        .collect::<anyhow::Result<_>>()?;

    let mut event_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut points = Vec::new();
    let mut generations: u32 = 0;
    let mut best = checkpoint.state.initial_val.clone();
    for event in &events {
        let kind_name = serde_json::to_value(event.kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_else(|| format!("{:?}", event.kind));
        *event_counts.entry(kind_name).or_default() += 1;
        let validated = match event.kind {
            StepKind::Accepted | StepKind::Rejected => event.candidate_val.clone(),
            StepKind::Compressed => Some(event.current_val.clone()),
            StepKind::SkippedNoFailures | StepKind::ExtractionFailed => None,
        };
        if !matches!(event.kind, StepKind::SkippedNoFailures) {
            generations += 1;
            if let Some(score) = validated {
                if score.value > best.value {
                    best = score;
                }
            }
            points.push(ConvergencePoint {
                prompts_generated: generations,
                best_val: best.clone(),
            });
        }
    }

    let ledger_summary = run_dir.read_ledger_summary().ok();
    let cost = match &ledger_summary {
        Some(summary) => match &summary.pricing {
            Some(pricing) => Some(estimate_cost(&summary.ledger, pricing)?),
            None => None,
        },
        None => None,
    };

    let mut text = String::new();
    text.push_str(&format!(
        "task {}: {} steps, {} prompts generated\n",
        checkpoint.task_name,
        events.len(),
        generations
    ));
    text.push_str(&format!(
        "initial validation score: {}\n",
        checkpoint.state.initial_val
    ));
    text.push_str(&format!(
        "best validation score: {} at step {}\n",
        checkpoint.state.best.score, checkpoint.state.best.step
    ));
    text.push_str("events:");
    for (kind, count) in &event_counts {
        text.push_str(&format!(" {kind}={count}"));
    }
    text.push('\n');
    if let Some(cost) = &cost {
        text.push_str(&format!(
            "cost: base ${:.4}, optimizer ${:.4}, total ${:.2}\n",
            cost.base.to_f64().unwrap_or(f64::NAN),
            cost.optimizer.to_f64().unwrap_or(f64::NAN),
            cost.total_dollars()
        ));
    }

    let mut csv = String::from("prompts_generated,best_val_score,best_val_exact\n");
    for point in &points {
        csv.push_str(&format!(
            "{},{},{}\n",
            point.prompts_generated,
            point.best_val.value.to_f64().unwrap_or(f64::NAN),
            point.best_val.value
        ));
    }
    std::fs::write(run_dir_path.join(CONVERGENCE_FILE), &csv)?;

    print!("{text}");
    Ok(ReportSummary {
        points,
        event_counts,
        cost,
        best_val: checkpoint.state.best.score.clone(),
        best_step: checkpoint.state.best.step,
        steps: events.len(),
        text,
    })
}

/// Parse one convergence CSV line back into a point (used by tests and
/// downstream tooling).
pub fn parse_convergence_line(line: &str) -> Option<(u32, f64, crate::scoring::Rational)> {
    let mut parts = line.split(',');
    let generated = parts.next()?.trim().parse().ok()?;
    let display: f64 = parts.next()?.trim().parse().ok()?;
    let exact = parse_rational(parts.next()?.trim())?;
    Some((generated, display, exact))
}

/// Engine config actually used for a run directory's checkpoint.
pub fn checkpoint_engine_config(run_dir_path: &Path) -> anyhow::Result<EngineConfig> {
    let run_dir = RunDir::open(run_dir_path);
    let checkpoint: Checkpoint = run_dir.read_json(CHECKPOINT_FILE)?;
    Ok(checkpoint.config)
}
