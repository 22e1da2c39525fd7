//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Synthetic runs are shared between criteria and executed
//! on first use.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use incremental_audio::cli::{prepare_data, sequence_plan};
use incremental_audio::config::RunConfig;
use incremental_audio::data::{make_batches, Dataset};
use incremental_audio::evaluation::predict;
use incremental_audio::features::{read_feature_file, write_feature_file, MelExtractor, ENERGY_FLOOR, N_MELS};
use incremental_audio::losses::{adaptive_lambda, bce_new_loss, ce_new_loss, kd_loss};
use incremental_audio::metrics::{f1_at_threshold, forgetting, F1Average};
use incremental_audio::model::Learner;
use incremental_audio::report::MetricsReport;
use incremental_audio::task::TaskKind;
use incremental_audio::tensor::{Mode, Tape, Tensor};
use incremental_audio::train::{
    cosine_annealing_lr, run_incremental_sequence, sgd_momentum_step, train_task, SequencePlan, StepOutcome,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn(&mut Ctx) -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Run {
    plan: SequencePlan,
    outcomes: Vec<StepOutcome<f32>>,
}

struct Ctx {
    wd: tempfile::TempDir,
    runs: HashMap<(String, usize), Run>,
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic")
}

impl Ctx {
    fn plan(&self, name: &str, steps: usize) -> Result<SequencePlan, String> {
        let cfg = RunConfig::load(&configs().join(format!("{name}.toml"))).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        let tasks = prepare_data(&cfg, self.wd.path()).map_err(|e| e.to_string())?;
        let mut plan = sequence_plan(&cfg, self.wd.path(), &tasks).map_err(|e| e.to_string())?;
        plan.steps.truncate(steps);
        Ok(plan)
    }

    /// Runs the first `steps` steps of a synthetic configuration, once.
    fn run(&mut self, name: &str, steps: usize) -> Result<&Run, String> {
        let key = (name.to_string(), steps);
        if !self.runs.contains_key(&key) {
            let t = Instant::now();
            let plan = self.plan(name, steps)?;
            let outcomes = run_incremental_sequence::<f32>(&plan, None).map_err(|e| e.to_string())?;
            eprintln!("     ran {name} ({steps} steps) in {:.1} s", t.elapsed().as_secs_f64());
            self.runs.insert(key.clone(), Run { plan, outcomes });
        }
        Ok(&self.runs[&key])
    }
}

fn record(report: &MetricsReport, task: u32) -> Result<f64, String> {
    report
        .records
        .iter()
        .find(|r| r.task_id == task)
        .map(|r| r.value)
        .ok_or_else(|| format!("no record for task {task} at step {}", report.step))
}

fn fnv(values: &[f32]) -> u64 {
    values.iter().flat_map(|v| v.to_bits().to_le_bytes()).fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn c1_gradients(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let mut failed = Vec::new();
    for &(name, case) in common::gradcheck::CASES {
        if catch_unwind(case).is_err() {
            failed.push(name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(failed.is_empty(), "failing checks: {failed:?}");
    ensure!(secs < 60.0, "suite took {secs:.1} s");
    Ok(format!("{} check groups below 1e-4 in {secs:.2} s", common::gradcheck::CASES.len()))
}

fn c2_lambda(_: &mut Ctx) -> Outcome {
    for (total, old, want) in [(29, 4, 4.642383), (15, 11, 2.581989), (40, 15, 3.952847)] {
        let got = adaptive_lambda(total, old, 5.0).map_err(|e| e.to_string())?;
        ensure!((got - want).abs() <= 1e-6, "{old}->{total}: {got} vs {want}");
    }
    Ok("4.642383, 2.581989, 3.952847".into())
}

fn kd_value(student: &[f64], teacher: &[f64], cols: usize, temperature: f64) -> Result<f64, String> {
    let rows = student.len() / cols;
    let mut tape = Tape::<f64>::new();
    let s = tape.param(Tensor::new(vec![rows, cols], student.to_vec()).unwrap());
    let t = Tensor::new(vec![rows, cols], teacher.to_vec()).unwrap();
    let kd = kd_loss(&mut tape, s, &t, temperature).map_err(|e| e.to_string())?;
    Ok(tape.value(kd).data()[0])
}

fn c3_kd(_: &mut Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_self = 0.0f64;
    for temperature in [1.0, 2.0, 10.0] {
        for _ in 0..100 {
            let x: Vec<f64> = (0..20).map(|_| rng.gen_range(-15.0..15.0)).collect();
            worst_self = worst_self.max(kd_value(&x, &x, 5, temperature)?.abs());
        }
    }
    ensure!(worst_self <= 1e-12, "kd(x, x) reached {worst_self:e}");
    let mut lowest = f64::INFINITY;
    for _ in 0..1000 {
        let s: Vec<f64> = (0..8).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let t: Vec<f64> = (0..8).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let temperature = [1.0, 2.0, 10.0][rng.gen_range(0..3)];
        lowest = lowest.min(kd_value(&s, &t, 4, temperature)?);
    }
    ensure!(lowest >= 0.0, "kd was negative: {lowest:e}");
    let worked = kd_value(&[0.0, 2.0], &[2.0, 0.0], 2, 2.0)?;
    ensure!((worked - 0.462117).abs() <= 1e-5, "worked example {worked}");
    Ok(format!("max |kd(x,x)| {worst_self:.1e}, min kd {lowest:.2e}, worked example {worked:.6}"))
}

/// Backpropagates the new-task loss alone over every training batch and
/// counts batches whose old classifier rows carry a non-zero bit.
fn old_rows_touched(learner: &Learner<f32>, data: &Dataset, seed: u64) -> Result<(usize, usize), String> {
    let partition = learner.registry().partition(data.task.id).map_err(|e| e.to_string())?;
    let d = learner.classifier().dim();
    let old = partition.old_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut touched = 0;
    let batches = make_batches::<f32>(data, 20, seed, 0, true).map_err(|e| e.to_string())?;
    for batch in &batches {
        let mut tape = Tape::new();
        let pass = learner
            .forward(&mut tape, &batch.features, Mode::Train, &mut rng)
            .map_err(|e| e.to_string())?;
        let loss = match data.task.kind {
            TaskKind::SingleLabel => ce_new_loss(&mut tape, pass.logits, &partition, &batch.targets),
            TaskKind::MultiLabel => bce_new_loss(&mut tape, pass.logits, &partition, &batch.targets),
        }
        .map_err(|e| e.to_string())?;
        tape.backward(loss).map_err(|e| e.to_string())?;
        let grad = tape
            .grad(pass.params[learner.classifier_weight_index()])
            .ok_or("classifier weights received no gradient")?;
        if grad[..old * d].iter().any(|g| g.to_bits() != 0) {
            touched += 1;
        }
        if grad[old * d..].iter().all(|&g| g == 0.0) {
            return Err("new classifier rows received no gradient".into());
        }
    }
    Ok((touched, batches.len()))
}

fn c4_indl(ctx: &mut Ctx) -> Outcome {
    let mut checked = 0;
    for (name, steps) in [("asc-at-kd", 2), ("asc-asc-at-kd", 3)] {
        let run = ctx.run(name, steps)?;
        for t in 1..steps {
            let step = &run.plan.steps[t];
            let start = run.outcomes[t - 1]
                .checkpoint
                .learner
                .expand_classifier(&step.task, step.config.seed)
                .map_err(|e| e.to_string())?;
            for (when, learner) in [("start", &start), ("end", &run.outcomes[t].checkpoint.learner)] {
                let (touched, n) = old_rows_touched(learner, &step.train, step.config.seed)?;
                ensure!(touched == 0, "{name} step {t} ({when}): {touched}/{n} batches touched old rows");
                checked += n;
            }
        }
    }
    Ok(format!("old rows bit-zero on {checked} batches across 3 incremental steps"))
}

fn c5_expansion(ctx: &mut Ctx) -> Outcome {
    let run = ctx.run("asc-at-kd", 2)?;
    let step = &run.plan.steps[1];
    let old = run.outcomes[0].checkpoint.learner.clone();
    let mut grown = old.expand_classifier(&step.task, step.config.seed).map_err(|e| e.to_string())?;
    let input = old.input_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = input.n_mels * input.n_frames;
    let x: Vec<f32> = (0..100 * n).map(|_| rng.gen_range(-25.0f32..0.0)).collect();
    let x = Tensor::new(vec![100, 1, input.n_mels, input.n_frames], x).unwrap();
    let before = old.infer(&x).map_err(|e| e.to_string())?;
    let after = grown.infer(&x).map_err(|e| e.to_string())?;
    let (k, c) = (old.num_classes(), grown.num_classes());
    for r in 0..100 {
        for j in 0..k {
            let (a, b) = (before.data()[r * k + j], after.data()[r * c + j]);
            ensure!(a.to_bits() == b.to_bits(), "input {r} unit {j}: {a} vs {b}");
        }
    }

    let teacher = old.snapshot_teacher();
    let probe = step.train.features::<f32>(&(0..step.train.len()).collect::<Vec<_>>());
    let logits = |t: &incremental_audio::model::TeacherSnapshot<f32>| t.logits(&probe).map(|l| fnv(l.data()));
    let hash_before = logits(&teacher).map_err(|e| e.to_string())?;
    let params_before = teacher.learner().fingerprint();
    train_task(&mut grown, Some(&teacher), &step.train, &step.config).map_err(|e| e.to_string())?;
    let hash_after = logits(&teacher).map_err(|e| e.to_string())?;
    ensure!(hash_before == hash_after, "teacher logits changed during the step");
    ensure!(params_before == teacher.learner().fingerprint(), "teacher parameters changed");
    ensure!(grown == run.outcomes[1].checkpoint.learner, "replayed step differs from the sequence run");
    for (name, steps) in [("asc-at-kd", 2), ("asc-asc-at-kd", 3)] {
        for o in &ctx.run(name, steps)?.outcomes[1..] {
            let (a, b) = o.teacher_fingerprints.ok_or("incremental step without teacher fingerprints")?;
            ensure!(a == b, "{name}: teacher fingerprint moved at step {}", o.report.step);
        }
    }
    Ok(format!("100 inputs bit-equal on {k} old units; teacher logits hash {hash_before:016x} stable"))
}

fn c6_cosine(ctx: &mut Ctx) -> Outcome {
    let mut worst_scale = 0.0f64;
    let mut worst_bound = 0.0f64;
    let mut count = 0;
    for (name, steps) in [("asc-at-kd", 2), ("asc-asc-at-kd", 3)] {
        let run = ctx.run(name, steps)?;
        let learner = run.outcomes[steps - 1].checkpoint.learner.cast::<f64>();
        let eta = learner.classifier().eta();
        for step in &run.plan.steps {
            let logits = predict(&learner, &step.eval).map_err(|e| e.to_string())?;
            for &v in logits.data() {
                worst_bound = worst_bound.max(v.abs() / eta);
                count += 1;
            }
        }
        let head = learner.classifier();
        let d = head.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f: Vec<f64> = (0..10 * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let run_head = |scale: f64| {
            let mut tape = Tape::<f64>::new();
            let v = tape.constant(Tensor::new(vec![10, d], f.iter().map(|x| x * scale).collect()).unwrap());
            let (logits, _, _) = head.forward(&mut tape, v).unwrap();
            tape.value(logits).data().to_vec()
        };
        let base = run_head(1.0);
        for scale in [1e-3, 0.5, 7.0, 1e3] {
            for (a, b) in base.iter().zip(run_head(scale)) {
                worst_scale = worst_scale.max((a - b).abs());
            }
        }
    }
    ensure!(worst_bound <= 1.0 + 1e-12, "max |logit|/eta = {worst_bound}");
    ensure!(worst_scale <= 1e-6, "rescaling moved a logit by {worst_scale:e}");
    Ok(format!("{count} eval logits, max |logit|/eta {worst_bound:.6}; rescaling drift {worst_scale:.1e}"))
}

fn c7_schedule(_: &mut Ctx) -> Outcome {
    let lr = |e| cosine_annealing_lr(e, 120, 0.1, 0.001).unwrap();
    ensure!(lr(0) == 0.1, "epoch 0 gives {}", lr(0));
    ensure!(lr(120) == 0.001, "final epoch gives {}", lr(120));
    let mid = 0.001 + 0.5 * (0.1 - 0.001);
    ensure!((lr(60) - mid).abs() < 1e-15, "midpoint {} vs {mid}", lr(60));
    let mut w = [1.0f64];
    let mut v = [0.0f64];
    sgd_momentum_step(&mut w, &[1.0], &mut v, 0.1, 0.9);
    ensure!((w[0] - 0.9).abs() <= 1e-12, "first step {}", w[0]);
    sgd_momentum_step(&mut w, &[1.0], &mut v, 0.1, 0.9);
    ensure!((w[0] - 0.71).abs() <= 1e-12, "second step {}", w[0]);
    Ok(format!("lr 0.1 / {mid} / 0.001; w 1 -> 0.9 -> {}", w[0]))
}

fn c8_forgetting(ctx: &mut Ctx) -> Outcome {
    let kd = record(&ctx.run("asc-at-kd", 2)?.outcomes[1].report, 0)?;
    let plain = record(&ctx.run("asc-at-no-indl-no-kd", 2)?.outcomes[1].report, 0)?;
    let chance = 100.0 / 4.0;
    ensure!(kd - plain >= 20.0, "KD+IndL {kd:.2} vs plain {plain:.2}: gap below 20 p.p.");
    ensure!(plain < 2.0 * chance, "plain fine-tuning kept {plain:.2}% (2x chance is {})", 2.0 * chance);
    Ok(format!("task 0 after step 1: KD+IndL {kd:.2}%, no-KD/no-IndL {plain:.2}% (chance {chance}%)"))
}

fn c9_at(ctx: &mut Ctx) -> Outcome {
    let incremental = record(&ctx.run("asc-at-kd", 2)?.outcomes[1].report, 1)?;
    let alone = record(&ctx.run("at-individual", 1)?.outcomes[0].report, 1)?;
    ensure!((incremental - alone).abs() <= 5.0, "incremental {incremental:.2} vs alone {alone:.2}");
    Ok(format!("AT F1 incremental {incremental:.2} vs individual {alone:.2}"))
}

fn c10_confusion(ctx: &mut Ctx) -> Outcome {
    let fraction = |r: &MetricsReport| {
        r.confusion
            .as_ref()
            .map(|c| c.old_into_new_fraction())
            .ok_or_else(|| "step 1 report has no confusion matrix".to_string())
    };
    let plain = fraction(&ctx.run("asc-asc-at-no-indl-no-kd", 2)?.outcomes[1].report)?;
    let kd = fraction(&ctx.run("asc-asc-at-kd", 3)?.outcomes[1].report)?;
    ensure!(plain >= 0.9, "no-KD/no-IndL moved only {:.1}% of old examples", plain * 100.0);
    ensure!(kd < 0.5, "KD+IndL moved {:.1}% of old examples", kd * 100.0);
    Ok(format!(
        "old examples predicted as new: no-KD/no-IndL {:.1}%, KD+IndL {:.1}%",
        plain * 100.0,
        kd * 100.0
    ))
}

fn c11_metrics(ctx: &mut Ctx) -> Outcome {
    ensure!(forgetting(94.0, 88.9) == 5.1, "forgetting(94.0, 88.9) = {}", forgetting(94.0, 88.9));
    ensure!(forgetting(94.0, 84.1) == 9.9, "forgetting(94.0, 84.1) = {}", forgetting(94.0, 84.1));
    // Predictions [1, 1, 1, 0] against truth [1, 1, 0, 1]: TP 2, FP 1, FN 1.
    let logits = Tensor::new(vec![1, 4], vec![3.0f64, 3.0, 3.0, -3.0]).unwrap();
    let truth = Tensor::new(vec![1, 4], vec![1.0f64, 1.0, 0.0, 1.0]).unwrap();
    let f1 = f1_at_threshold(&logits, &[0, 1, 2, 3], &truth, 0.5, F1Average::Micro).map_err(|e| e.to_string())?;
    ensure!((f1 - 66.67).abs() <= 0.01, "micro F1 {f1}");

    let mut matrices = 0;
    for ((name, _), run) in &ctx.runs {
        for o in &run.outcomes {
            let Some(cm) = &o.report.confusion else { continue };
            let expected = match o.report.overall_scene_accuracy {
                Some(v) => v,
                None => {
                    let scene = o.report.records.iter().find(|r| r.kind == TaskKind::SingleLabel);
                    scene.ok_or("confusion without a scene record")?.value
                }
            };
            let direct = 100.0 * cm.diagonal() as f64 / cm.total() as f64;
            ensure!(
                (direct - expected).abs() < 1e-9 && (cm.accuracy() - expected).abs() < 1e-9,
                "{name} step {}: diagonal {direct} vs accuracy {expected}",
                o.report.step
            );
            matrices += 1;
        }
    }
    ensure!(matrices > 0, "no confusion matrices were emitted");
    Ok(format!("5.1 and 9.9 exact; micro F1 {f1:.2}; diagonal identity on {matrices} matrices"))
}

fn c12_reproducible(ctx: &mut Ctx) -> Outcome {
    let plan = ctx.plan("asc-asc-at-kd", 3)?;
    let again = run_incremental_sequence::<f32>(&plan, None).map_err(|e| e.to_string())?;
    let first = &ctx.run("asc-asc-at-kd", 3)?.outcomes;
    for (a, b) in first.iter().zip(&again) {
        let step = a.report.step;
        ensure!(a.checkpoint.to_bytes() == b.checkpoint.to_bytes(), "checkpoint {step} differs");
        ensure!(a.report.to_json() == b.report.to_json(), "report {step} differs");
        ensure!(a.log.to_tsv() == b.log.to_tsv(), "log {step} differs");
    }
    ensure!(first.len() == 3 && again.len() == 3, "expected three steps");
    Ok(format!(
        "ASC-ASC-AT twice: 3 checkpoints, reports and logs identical (final fingerprint {:016x})",
        first[2].checkpoint.fingerprint()
    ))
}

fn c13_features(ctx: &mut Ctx) -> Outcome {
    let extractor = MelExtractor::new(44_100, N_MELS).map_err(|e| e.to_string())?;
    let silence = extractor.extract(&vec![0.0f32; 441_000]).map_err(|e| e.to_string())?;
    ensure!(silence.n_frames == 499 && silence.n_mels == 40, "{} x {}", silence.n_frames, silence.n_mels);
    let floor = ENERGY_FLOOR.ln() as f32;
    ensure!(silence.data.iter().all(|&v| v == floor), "silence is not constant at ln(1e-10)");

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let noise: Vec<f32> = (0..441_000).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
    let fm = extractor.extract(&noise).map_err(|e| e.to_string())?;
    let path = ctx.wd.path().join("noise.lmel");
    write_feature_file(&fm, &path).map_err(|e| e.to_string())?;
    let back = read_feature_file(&path).map_err(|e| e.to_string())?;
    ensure!(
        back.n_frames == fm.n_frames && back.data.iter().zip(&fm.data).all(|(a, b)| a.to_bits() == b.to_bits()),
        "LMEL round trip changed the matrix"
    );
    Ok(format!("499 x 40; silence = {floor}; LMEL round trip bit-exact"))
}

fn main() {
    let criteria: [Criterion; 13] = [
        ("gradient oracle", c1_gradients),
        ("adaptive lambda", c2_lambda),
        ("distillation identities", c3_kd),
        ("independent learning masks old units", c4_indl),
        ("expansion preserves old outputs", c5_expansion),
        ("cosine head bounds and scale invariance", c6_cosine),
        ("schedule and optimizer traces", c7_schedule),
        ("synthetic forgetting ordering", c8_forgetting),
        ("tagging unaffected by incremental training", c9_at),
        ("confusion structure", c10_confusion),
        ("metric oracles", c11_metrics),
        ("bitwise reproducibility", c12_reproducible),
        ("feature pipeline", c13_features),
    ];
    let mut ctx = Ctx {
        wd: tempfile::tempdir().expect("temporary directory"),
        runs: HashMap::new(),
    };
    let start = Instant::now();
    let mut failures = 0;
    for (i, (title, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut ctx)))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {title}: {detail} [{secs:.1} s]", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL {:>2} {title}: {why} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failures} failed in {:.0} s",
        criteria.len() - failures,
        start.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
