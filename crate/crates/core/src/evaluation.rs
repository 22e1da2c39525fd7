//! Scoring a learner on every task it has learned.

use std::collections::BTreeMap;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, confusion_matrix, f1_at_threshold, forgetting, F1Average};
use crate::model::{EvalRecord, Head, Learner};
use crate::report::{Metric, MetricsReport, TaskRecord, REPORT_VERSION};
use crate::task::TaskKind;
use crate::tensor::{Real, Tensor};

/// Inference batch size. Fixed so that training-time and stand-alone
/// evaluation see identical batches.
pub const EVAL_BATCH: usize = 100;

pub const F1_THRESHOLD: f64 = 0.5;

/// Eval-mode logits `[N, C]` for every example of `data`.
pub fn predict<T: Real>(learner: &Learner<T>, data: &Dataset) -> Result<Tensor<T>> {
    let c = learner.num_classes();
    let mut out = Vec::with_capacity(data.len() * c);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let logits = learner.infer(&data.features::<T>(chunk))?;
        out.extend_from_slice(logits.data());
    }
    Tensor::new(vec![data.len(), c], out)
}

/// Evaluates `learner` on `sets` (one per task learned so far) and records
/// first evaluations in `history`.
pub fn evaluate<T: Real>(
    learner: &Learner<T>,
    step: u32,
    sets: &[&Dataset],
    history: &mut Vec<EvalRecord>,
    average: F1Average,
) -> Result<MetricsReport> {
    let registry = learner.registry();
    let c = learner.num_classes();
    let scene_units = registry.scene_units();
    let mut records = Vec::with_capacity(sets.len());
    let mut scene_rows: Vec<T> = Vec::new();
    let mut scene_truth: Vec<usize> = Vec::new();
    let mut scene_tasks = 0;
    for data in sets {
        let task = &data.task;
        let units = registry
            .task_units(task.id)
            .ok_or_else(|| Error::Registry(format!("task {} is not known to the learner", task.id)))?;
        let unit_list: Vec<usize> = units.clone().collect();
        let logits = predict(learner, data)?;
        let value = match task.kind {
            TaskKind::SingleLabel => {
                let truth: Vec<usize> = data
                    .examples
                    .iter()
                    .map(|e| match e.labels.as_slice() {
                        [l] => Ok(units.start + l),
                        _ => Err(Error::Label(format!("example {} is not single-label", e.id))),
                    })
                    .collect::<Result<_>>()?;
                scene_rows.extend_from_slice(logits.data());
                scene_truth.extend_from_slice(&truth);
                scene_tasks += 1;
                // Task-wise accuracy still decides among every scene class
                // learned so far; restricting the argmax to the task's own
                // units would hide old classes being absorbed by new ones.
                accuracy(&logits, &truth, &scene_units)?
            }
            TaskKind::MultiLabel => {
                let idx: Vec<usize> = (0..data.len()).collect();
                let truth = data.targets::<T>(&idx);
                f1_at_threshold(&logits, &unit_list, &truth, F1_THRESHOLD, average)?
            }
        };
        records.push(TaskRecord {
            task_id: task.id,
            task_name: task.name.clone(),
            kind: task.kind,
            metric: Metric::for_kind(task.kind),
            value,
        });
    }

    // Tasks seen for the first time get forgetting 0, so a report
    // recomputed from a checkpoint's history matches the training-time one.
    let mut forgets = BTreeMap::new();
    for r in &records {
        let first = match history.iter().find(|h| h.task_id == r.task_id) {
            Some(h) => h.first_value,
            None => {
                history.push(EvalRecord {
                    task_id: r.task_id,
                    first_value: r.value,
                });
                r.value
            }
        };
        forgets.insert(r.task_id, forgetting(first, r.value));
    }

    let (overall, confusion) = if scene_truth.is_empty() {
        (None, None)
    } else {
        let logits = Tensor::new(vec![scene_truth.len(), c], scene_rows)?;
        let overall = if scene_tasks > 1 {
            Some(accuracy(&logits, &scene_truth, &scene_units)?)
        } else {
            None
        };
        let newest = registry
            .entries()
            .iter()
            .filter(|e| e.head == Head::Softmax)
            .map(|e| e.task_id)
            .max()
            .expect("scene units exist");
        let boundary = scene_units
            .iter()
            .position(|&u| registry.entries()[u].task_id == newest)
            .expect("newest scene task has units");
        let names = scene_units
            .iter()
            .map(|&u| registry.entries()[u].name.clone())
            .collect();
        let cm = confusion_matrix(&logits, &scene_truth, &scene_units, names, boundary)?;
        (overall, Some(cm))
    };

    Ok(MetricsReport {
        version: REPORT_VERSION,
        step,
        records,
        overall_scene_accuracy: overall,
        forgetting: forgets,
        confusion,
    })
}
