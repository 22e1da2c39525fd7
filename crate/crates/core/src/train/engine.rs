use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::Sgd;
use super::schedule::LrSchedule;
use crate::data::{epoch_order, make_batches, Dataset, JointDataset};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, joint_loss, LossConfig, StepTargets};
use crate::model::{Learner, TeacherSnapshot};
use crate::task::TaskKind;
use crate::tensor::{Mode, Real, Tape, Tensor, Var};

/// Hyperparameters of one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepConfig {
    pub lr_initial: f64,
    pub lr_min: f64,
    pub lr_schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub loss: LossConfig,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            lr_initial: 0.1,
            lr_min: 0.0,
            lr_schedule: LrSchedule::Cosine,
            epochs: 120,
            batch_size: 100,
            momentum: 0.9,
            seed: 0,
            shuffle: true,
            loss: LossConfig::default(),
        }
    }
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_initial > 0.0) || !self.lr_initial.is_finite() {
            return Err(Error::Configuration(format!("lr_initial {} must be positive", self.lr_initial)));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_initial) {
            return Err(Error::Configuration(format!(
                "lr_min {} must lie in [0, lr_initial]",
                self.lr_min
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Configuration("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Configuration("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Configuration(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        self.loss.validate()
    }
}

/// Example-weighted epoch means of the loss terms. `ce`/`bce` hold the task
/// term of the matching kind (both for the joint baseline).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub bce: f64,
    pub kd: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch\tlr\tloss\tce\tbce\tkd\tlambda";

    /// Tab-separated, one record per line, floats in shortest round-trip form.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.epoch, r.lr, r.loss, r.ce, r.bce, r.kd, r.lambda
            );
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Default)]
struct Accum {
    n: f64,
    loss: f64,
    ce: f64,
    bce: f64,
    kd: f64,
}

impl Accum {
    fn add(&mut self, b: usize, loss: f64, ce: f64, bce: f64, kd: f64) {
        let w = b as f64;
        self.n += w;
        self.loss += w * loss;
        self.ce += w * ce;
        self.bce += w * bce;
        self.kd += w * kd;
    }

    fn record(&self, epoch: usize, lr: f64, lambda: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            lr,
            loss: self.loss / self.n,
            ce: self.ce / self.n,
            bce: self.bce / self.n,
            kd: self.kd / self.n,
            lambda,
        }
    }
}

fn scalar<T: Real>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).data()[0].f64()
}

/// Backward, optimizer update, batch-norm statistics and the scale clamp.
fn update<T: Real>(
    learner: &mut Learner<T>,
    opt: &mut Sgd<T>,
    tape: &mut Tape<T>,
    loss: Var,
    params: &[Var],
    stats: &[crate::tensor::BatchStats<T>],
    lr: f64,
) -> Result<()> {
    tape.backward(loss)?;
    let grads: Vec<Option<&[T]>> = params.iter().map(|&p| tape.grad(p)).collect();
    opt.step(learner.parameters_mut(), &grads, lr)?;
    learner.apply_batch_stats(stats)?;
    learner.clamp_scale();
    Ok(())
}

/// Trains `learner` (already expanded for `data.task`) for one time step.
///
/// `teacher` must be present exactly when this is an incremental step with
/// distillation enabled.
pub fn train_task<T: Real>(
    learner: &mut Learner<T>,
    teacher: Option<&TeacherSnapshot<T>>,
    data: &Dataset,
    cfg: &StepConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let task = &data.task;
    let partition = learner.registry().partition(task.id)?;
    if partition.new_len() != task.classes.len() {
        return Err(Error::Registry(format!(
            "task {} has {} classes but {} units",
            task.id,
            task.classes.len(),
            partition.new_len()
        )));
    }
    let needs_teacher = partition.old_len() > 0 && cfg.loss.kd_enabled;
    let teacher = if needs_teacher {
        let t = teacher.ok_or_else(|| {
            Error::Configuration(format!("step for task {} needs a teacher for distillation", task.id))
        })?;
        if t.num_classes() != partition.old_len() {
            return Err(Error::Contract(format!(
                "teacher has {} classes, the old partition {}",
                t.num_classes(),
                partition.old_len()
            )));
        }
        Some(t)
    } else {
        None
    };
    let lambda = if needs_teacher {
        cfg.loss.lambda_for(partition.total(), partition.old_len())?
    } else {
        0.0
    };

    let mut opt = Sgd::new(&learner.parameters(), cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_schedule.lr(epoch, cfg.epochs, cfg.lr_initial, cfg.lr_min)?;
        let mut acc = Accum::default();
        for batch in make_batches::<T>(data, cfg.batch_size, cfg.seed, epoch, cfg.shuffle)? {
            let teacher_logits = match teacher {
                Some(t) => Some(t.logits(&batch.features)?),
                None => None,
            };
            let mut tape = Tape::new();
            let pass = learner.forward(&mut tape, &batch.features, Mode::Train, &mut rng)?;
            let step = StepTargets {
                kind: task.kind,
                partition: &partition,
                targets: &batch.targets,
                teacher: teacher_logits.as_ref(),
            };
            let loss = combined_loss(&mut tape, pass.logits, &step, &cfg.loss)?;
            let task_value = scalar(&tape, loss.task);
            let (ce, bce) = match task.kind {
                TaskKind::SingleLabel => (task_value, 0.0),
                TaskKind::MultiLabel => (0.0, task_value),
            };
            let kd = loss.kd.map(|k| scalar(&tape, k)).unwrap_or(0.0);
            acc.add(batch.indices.len(), scalar(&tape, loss.total), ce, bce, kd);
            update(learner, &mut opt, &mut tape, loss.total, &pass.params, &pass.batch_stats, lr)?;
        }
        log.epochs.push(acc.record(epoch, lr, lambda));
    }
    Ok(log)
}

/// Multi-task training of a learner holding both heads:
/// `CE(scenes) + bce_weight · BCE(events)` per batch.
pub fn train_joint<T: Real>(
    learner: &mut Learner<T>,
    data: &JointDataset,
    cfg: &StepConfig,
    bce_weight: f64,
) -> Result<TrainLog> {
    cfg.validate()?;
    let scene_units = learner
        .registry()
        .task_units(data.scenes.task.id)
        .ok_or_else(|| Error::Registry(format!("task {} not registered", data.scenes.task.id)))?;
    let event_units = learner
        .registry()
        .task_units(data.events.task.id)
        .ok_or_else(|| Error::Registry(format!("task {} not registered", data.events.task.id)))?;
    if data.scenes.is_empty() {
        return Err(Error::Contract("joint training set is empty".into()));
    }
    // Reuse the per-task label checks of the batcher.
    make_batches::<T>(&data.scenes, data.scenes.len(), 0, 0, false)?;
    make_batches::<T>(&data.events, data.events.len(), 0, 0, false)?;

    let mut opt = Sgd::new(&learner.parameters(), cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_schedule.lr(epoch, cfg.epochs, cfg.lr_initial, cfg.lr_min)?;
        let mut acc = Accum::default();
        let order = epoch_order(data.scenes.len(), cfg.seed, epoch, cfg.shuffle);
        for idx in order.chunks(cfg.batch_size) {
            let features: Tensor<T> = data.scenes.features(idx);
            let ys = data.scenes.targets::<T>(idx);
            let ye = data.events.targets::<T>(idx);
            let mut tape = Tape::new();
            let pass = learner.forward(&mut tape, &features, Mode::Train, &mut rng)?;
            let (total, ce, bce) = joint_loss(
                &mut tape,
                pass.logits,
                scene_units.clone(),
                &ys,
                event_units.clone(),
                &ye,
                bce_weight,
            )?;
            acc.add(
                idx.len(),
                scalar(&tape, total),
                scalar(&tape, ce),
                scalar(&tape, bce),
                0.0,
            );
            update(learner, &mut opt, &mut tape, total, &pass.params, &pass.batch_stats, lr)?;
        }
        log.epochs.push(acc.record(epoch, lr, 0.0));
    }
    Ok(log)
}
