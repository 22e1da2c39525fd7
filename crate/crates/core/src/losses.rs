//! Training objectives: softmax cross-entropy, sigmoid binary cross-entropy
//! restricted to the new units (independent learning), temperature-softened
//! KL distillation against a frozen teacher, and their weighted sums.
//!
//! All losses sum over classes and average over the batch.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskKind;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Old-task and current-task unit ranges of a logit vector. Always derived
/// from the class registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogitPartition {
    old: Range<usize>,
    new: Range<usize>,
}

impl LogitPartition {
    pub fn new(old: Range<usize>, new: Range<usize>, total: usize) -> Result<Self> {
        if old.start != 0 || old.end != new.start || new.end != total || new.is_empty() {
            return Err(Error::Contract(format!(
                "partition {old:?} / {new:?} does not tile {total} units"
            )));
        }
        Ok(LogitPartition { old, new })
    }

    pub fn old_units(&self) -> Range<usize> {
        self.old.clone()
    }

    pub fn new_units(&self) -> Range<usize> {
        self.new.clone()
    }

    /// `C_{t-1}`.
    pub fn old_len(&self) -> usize {
        self.old.len()
    }

    pub fn new_len(&self) -> usize {
        self.new.len()
    }

    /// `C_t`.
    pub fn total(&self) -> usize {
        self.new.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMode {
    Adaptive,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub omega: f64,
    pub lambda: LambdaMode,
    pub kd_enabled: bool,
    pub indl_enabled: bool,
    /// Multiply the distillation term by `T²`. Off by default.
    pub kd_t2_scaling: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 2.0,
            omega: 5.0,
            lambda: LambdaMode::Adaptive,
            kd_enabled: true,
            indl_enabled: true,
            kd_t2_scaling: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Configuration(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.omega >= 0.0) {
            return Err(Error::Configuration(format!(
                "omega must be non-negative, got {}",
                self.omega
            )));
        }
        if let LambdaMode::Fixed(v) = self.lambda {
            if !(v >= 0.0) {
                return Err(Error::Configuration(format!("fixed lambda {v} is negative")));
            }
        }
        Ok(())
    }

    /// Distillation weight for a step that grows the classifier from
    /// `old_classes` to `total_classes` units.
    pub fn lambda_for(&self, total_classes: usize, old_classes: usize) -> Result<f64> {
        match self.lambda {
            LambdaMode::Adaptive => adaptive_lambda(total_classes, old_classes, self.omega),
            LambdaMode::Fixed(v) => Ok(v),
        }
    }
}

/// `Ω · √((C_t − C_{t−1}) / C_t)`.
pub fn adaptive_lambda(total_classes: usize, old_classes: usize, omega: f64) -> Result<f64> {
    if total_classes <= old_classes {
        return Err(Error::Parameter(format!(
            "adaptive lambda needs C_t > C_(t-1), got {total_classes} <= {old_classes}"
        )));
    }
    let new = (total_classes - old_classes) as f64;
    Ok(omega * (new / total_classes as f64).sqrt())
}

/// Temperature softmax with max subtraction.
pub fn softmax_t(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Contract("softmax of an empty vector".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn check_targets<T: Real>(tape: &Tape<T>, logits: Var, targets: &Tensor<T>) -> Result<[usize; 2]> {
    let dims = tape.value(logits).dims2("loss logits")?;
    if targets.shape() != dims {
        return Err(Error::Dimension(format!(
            "targets shape {:?} does not match logits {:?}",
            targets.shape(),
            dims
        )));
    }
    if dims[0] == 0 {
        return Err(Error::Contract("loss over an empty batch".into()));
    }
    Ok(dims)
}

/// Mean-over-batch softmax cross-entropy; `targets` must be one-hot rows.
pub fn ce_loss<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &Tensor<T>) -> Result<Var> {
    let [b, k] = check_targets(tape, logits, targets)?;
    for (r, row) in targets.data().chunks(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != k {
            return Err(Error::Label(format!("target row {r} is not one-hot")));
        }
    }
    let log_probs = tape.log_softmax(logits, 1.0)?;
    let scale = T::of(-1.0 / b as f64);
    let weights: Vec<T> = targets.data().iter().map(|&y| y * scale).collect();
    tape.weighted_sum(log_probs, &weights)
}

/// Binary cross-entropy of sigmoid outputs, summed over classes and averaged
/// over the batch; `targets` must be multi-hot.
pub fn bce_loss<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &Tensor<T>) -> Result<Var> {
    let [b, _] = check_targets(tape, logits, targets)?;
    if targets
        .data()
        .iter()
        .any(|&v| v != T::zero() && v != T::one())
    {
        return Err(Error::Label("multi-hot targets must be 0 or 1".into()));
    }
    let per_element = tape.bce_with_logits(logits, targets.data())?;
    let weights = vec![T::of(1.0 / b as f64); targets.len()];
    tape.weighted_sum(per_element, &weights)
}

fn new_slice<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    partition: &LogitPartition,
    target_new: &Tensor<T>,
) -> Result<Var> {
    let width = target_new.shape().get(1).copied().unwrap_or(0);
    if width != partition.new_len() {
        if width == partition.total() && partition.old_len() > 0 {
            return Err(Error::IndlViolation(format!(
                "targets span all {} units; independent learning only sees the {} new units",
                partition.total(),
                partition.new_len()
            )));
        }
        return Err(Error::Dimension(format!(
            "targets have {width} columns, the new slice has {}",
            partition.new_len()
        )));
    }
    let new = partition.new_units();
    tape.select_cols(logits, new.start, new.end)
}

/// Binary cross-entropy over the new-task logits only. Old units receive no
/// gradient from this loss.
pub fn bce_new_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    partition: &LogitPartition,
    target_new: &Tensor<T>,
) -> Result<Var> {
    let slice = new_slice(tape, logits, partition, target_new)?;
    bce_loss(tape, slice, target_new)
}

/// Cross-entropy with the softmax taken over the new-task logits only.
pub fn ce_new_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    partition: &LogitPartition,
    target_new: &Tensor<T>,
) -> Result<Var> {
    let slice = new_slice(tape, logits, partition, target_new)?;
    ce_loss(tape, slice, target_new)
}

/// `KL(softmax(teacher/T) ‖ softmax(student/T))`, batch mean. The teacher
/// logits are constants.
pub fn kd_loss<T: Real>(
    tape: &mut Tape<T>,
    student_old: Var,
    teacher: &Tensor<T>,
    temperature: f64,
) -> Result<Var> {
    let dims = tape.value(student_old).dims2("kd student logits")?;
    if teacher.shape() != dims {
        return Err(Error::Dimension(format!(
            "teacher logits {:?} vs student old logits {:?}",
            teacher.shape(),
            dims
        )));
    }
    tape.kl_softened(student_old, teacher.data(), temperature)
}

/// Inputs of the per-step objective.
pub struct StepTargets<'a, T> {
    pub kind: TaskKind,
    pub partition: &'a LogitPartition,
    /// Targets over the new units only, `[B, new_len]`.
    pub targets: &'a Tensor<T>,
    /// Frozen teacher logits over the old units, `[B, old_len]`.
    pub teacher: Option<&'a Tensor<T>>,
}

/// The step objective and its components.
#[derive(Debug, Clone, Copy)]
pub struct StepLoss {
    pub total: Var,
    pub task: Var,
    pub kd: Option<Var>,
    pub lambda: f64,
}

fn pad_old<T: Real>(targets: &Tensor<T>, old: usize) -> Result<Tensor<T>> {
    let [b, k] = targets.dims2("targets")?;
    let mut data = Vec::with_capacity(b * (old + k));
    for row in targets.data().chunks(k) {
        data.extend(std::iter::repeat_n(T::zero(), old));
        data.extend_from_slice(row);
    }
    Tensor::new(vec![b, old + k], data)
}

/// Builds the loss for one step:
/// * initial step: cross-entropy (single-label) or BCE (multi-label) over all units;
/// * incremental step with independent learning: the task loss over the new
///   units plus `λ·KD` on the old units;
/// * independent learning disabled: the task loss over every unit, with zero
///   targets on the old classes.
pub fn combined_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    step: &StepTargets<'_, T>,
    cfg: &LossConfig,
) -> Result<StepLoss> {
    cfg.validate()?;
    let partition = step.partition;
    let [_, width] = tape.value(logits).dims2("logits")?;
    if width != partition.total() {
        return Err(Error::Dimension(format!(
            "{width} logits for a {}-unit partition",
            partition.total()
        )));
    }
    let incremental = partition.old_len() > 0;
    if !incremental && step.teacher.is_some() {
        return Err(Error::Contract(
            "a teacher was supplied for the initial step".into(),
        ));
    }

    let task = if incremental && !cfg.indl_enabled {
        let padded = pad_old(step.targets, partition.old_len())?;
        match step.kind {
            TaskKind::SingleLabel => ce_loss(tape, logits, &padded)?,
            TaskKind::MultiLabel => bce_loss(tape, logits, &padded)?,
        }
    } else {
        match step.kind {
            TaskKind::SingleLabel => ce_new_loss(tape, logits, partition, step.targets)?,
            TaskKind::MultiLabel => bce_new_loss(tape, logits, partition, step.targets)?,
        }
    };

    if !(incremental && cfg.kd_enabled) {
        return Ok(StepLoss {
            total: task,
            task,
            kd: None,
            lambda: 0.0,
        });
    }
    let teacher = step.teacher.ok_or_else(|| {
        Error::Configuration("distillation is enabled but no teacher was provided".into())
    })?;
    let lambda = cfg.lambda_for(partition.total(), partition.old_len())?;
    let old = partition.old_units();
    let student_old = tape.select_cols(logits, old.start, old.end)?;
    let kd = kd_loss(tape, student_old, teacher, cfg.temperature)?;
    let weight = if cfg.kd_t2_scaling {
        lambda * cfg.temperature * cfg.temperature
    } else {
        lambda
    };
    let weighted = tape.mul_const(kd, weight);
    let total = tape.add(task, weighted)?;
    Ok(StepLoss {
        total,
        task,
        kd: Some(kd),
        lambda,
    })
}

/// Multi-task objective of the joint baseline:
/// `CE(scene units) + bce_weight · BCE(event units)`.
pub fn joint_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    scene_units: Range<usize>,
    scene_targets: &Tensor<T>,
    event_units: Range<usize>,
    event_targets: &Tensor<T>,
    bce_weight: f64,
) -> Result<(Var, Var, Var)> {
    let scenes = tape.select_cols(logits, scene_units.start, scene_units.end)?;
    let ce = ce_loss(tape, scenes, scene_targets)?;
    let events = tape.select_cols(logits, event_units.start, event_units.end)?;
    let bce = bce_loss(tape, events, event_targets)?;
    let weighted = tape.mul_const(bce, bce_weight);
    let total = tape.add(ce, weighted)?;
    Ok((total, ce, bce))
}
