use std::fs;
use std::path::Path;

use super::engine::{train_joint, train_task, StepConfig, TrainLog};
use crate::data::{Dataset, JointDataset};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::metrics::F1Average;
use crate::model::{Checkpoint, EvalRecord, InputSpec, Learner, ModelConfig};
use crate::report::MetricsReport;
use crate::task::TaskSpec;
use crate::tensor::Real;

#[derive(Debug, Clone)]
pub struct PlanStep {
    pub task: TaskSpec,
    pub config: StepConfig,
    pub train: Dataset,
    pub eval: Dataset,
}

/// Tasks presented in order to one learner.
#[derive(Debug, Clone)]
pub struct SequencePlan {
    pub input: InputSpec,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub f1_average: F1Average,
    pub steps: Vec<PlanStep>,
}

impl SequencePlan {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Configuration("a plan needs at least one step".into()));
        }
        self.model.validate()?;
        for (t, s) in self.steps.iter().enumerate() {
            s.task.validate()?;
            s.config.validate()?;
            if s.train.task != s.task || s.eval.task != s.task {
                return Err(Error::Configuration(format!(
                    "step {t}: datasets do not belong to task {}",
                    s.task.id
                )));
            }
            if s.train.input != self.input || s.eval.input != self.input {
                return Err(Error::Configuration(format!(
                    "step {t}: dataset input size differs from the plan"
                )));
            }
            if t > 0 && s.task.id <= self.steps[t - 1].task.id {
                return Err(Error::Configuration("task ids must strictly increase".into()));
            }
        }
        for (i, a) in self.steps.iter().enumerate() {
            for b in &self.steps[i + 1..] {
                if let Some(c) = a.task.classes.iter().find(|c| b.task.classes.contains(c)) {
                    return Err(Error::Configuration(format!(
                        "class {c:?} appears in tasks {} and {}",
                        a.task.id, b.task.id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub report: MetricsReport,
    pub log: TrainLog,
    /// Teacher fingerprint before and after the step (incremental steps).
    pub teacher_fingerprints: Option<(u64, u64)>,
}

fn persist<T: Real>(dir: &Path, step: u32, outcome: &StepOutcome<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    outcome.checkpoint.write(&dir.join(format!("step{step}.ckpt")))?;
    let report = dir.join(format!("step{step}.report.json"));
    fs::write(&report, outcome.report.to_json()).map_err(|e| Error::io(&report, e))?;
    let log = dir.join(format!("step{step}.log.tsv"));
    fs::write(&log, outcome.log.to_tsv()).map_err(|e| Error::io(&log, e))
}

/// Runs every step: expand (t ≥ 1), snapshot the teacher (t ≥ 1), train,
/// evaluate on all tasks so far and, with `out_dir`, write the per-step
/// `step{t}.*` artifacts.
pub fn run_incremental_sequence<T: Real>(
    plan: &SequencePlan,
    out_dir: Option<&Path>,
) -> Result<Vec<StepOutcome<T>>> {
    plan.validate()?;
    let mut outcomes: Vec<StepOutcome<T>> = Vec::with_capacity(plan.steps.len());
    let mut history: Vec<EvalRecord> = Vec::new();
    let mut learner: Option<Learner<T>> = None;
    for (t, step) in plan.steps.iter().enumerate() {
        let (mut current, teacher) = match learner.take() {
            None => (
                Learner::build(plan.input, plan.model.clone(), std::slice::from_ref(&step.task), plan.model_seed)?,
                None,
            ),
            Some(prev) => {
                let teacher = prev.snapshot_teacher();
                (prev.expand_classifier(&step.task, step.config.seed)?, Some(teacher))
            }
        };
        let before = teacher.as_ref().map(|t| t.learner().fingerprint());
        let log = train_task(&mut current, teacher.as_ref(), &step.train, &step.config)?;
        let fingerprints = before.map(|b| (b, teacher.as_ref().unwrap().learner().fingerprint()));

        let sets: Vec<&Dataset> = plan.steps[..=t].iter().map(|s| &s.eval).collect();
        let report = evaluate(&current, t as u32, &sets, &mut history, plan.f1_average)?;
        let outcome = StepOutcome {
            checkpoint: Checkpoint {
                step: t as u32,
                learner: current.clone(),
                history: history.clone(),
            },
            report,
            log,
            teacher_fingerprints: fingerprints,
        };
        if let Some(dir) = out_dir {
            persist(dir, t as u32, &outcome)?;
        }
        outcomes.push(outcome);
        learner = Some(current);
    }
    Ok(outcomes)
}

#[derive(Debug, Clone)]
pub struct JointOutcome<T> {
    pub learner: Learner<T>,
    pub report: MetricsReport,
    pub log: TrainLog,
}

/// Single network trained on scenes and events at once (1:1 loss weights).
pub fn train_joint_baseline<T: Real>(
    input: InputSpec,
    model: ModelConfig,
    model_seed: u64,
    train: &JointDataset,
    eval: &JointDataset,
    cfg: &StepConfig,
) -> Result<JointOutcome<T>> {
    let tasks = [train.scenes.task.clone(), train.events.task.clone()];
    let mut learner = Learner::build(input, model, &tasks, model_seed)?;
    let log = train_joint(&mut learner, train, cfg, 1.0)?;
    let mut history = Vec::new();
    let report = evaluate(
        &learner,
        0,
        &[&eval.scenes, &eval.events],
        &mut history,
        F1Average::Micro,
    )?;
    Ok(JointOutcome { learner, report, log })
}
