//! Central finite differences (f64, step 1e-5) against the tape gradients.
//!
//! The error of a gradient tensor is `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖, 1e-5)`;
//! every differentiable input must stay below 1e-4. The floor only matters
//! for gradients that are zero by construction (a conv bias followed by
//! batch norm), where the difference quotient is rounding noise of about
//! `ε·|L| / step ≈ 1e-10`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use incremental_audio::losses::{
    bce_loss, bce_new_loss, ce_loss, ce_new_loss, combined_loss, joint_loss, kd_loss, LogitPartition,
    LossConfig, StepTargets,
};
use incremental_audio::model::{InputSpec, Learner, ModelConfig};
use incremental_audio::task::{TaskKind, TaskSpec};
use incremental_audio::tensor::{BatchNormMode, Mode, Tape, Tensor, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-5;

fn relative(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(FLOOR)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Records `build` on a fresh tape, reducing a non-scalar result with fixed
/// random weights so every output element contributes.
fn evaluate<F>(inputs: &[Tensor<f64>], build: &F, weights: &mut Option<Vec<f64>>) -> (Tape<f64>, Vec<Var>, Var)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let n = tape.value(out).len();
    let loss = if n == 1 {
        out
    } else {
        let w = weights.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        });
        tape.weighted_sum(out, w).unwrap()
    };
    (tape, vars, loss)
}

fn check<F>(name: &str, inputs: Vec<Tensor<f64>>, build: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut weights = None;
    let (mut tape, vars, loss) = evaluate(&inputs, &build, &mut weights);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for i in 0..input.len() {
            let mut probe = |delta: f64| {
                let mut shifted = inputs.clone();
                shifted[k].data_mut()[i] += delta;
                let (tape, _, loss) = evaluate(&shifted, &build, &mut weights);
                tape.value(loss).data()[0]
            };
            numeric[i] = (probe(STEP) - probe(-STEP)) / (2.0 * STEP);
        }
        let rel = relative(&analytic[k], &numeric);
        assert!(rel < TOL, "{name}: input {k} relative error {rel:e}");
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(2024)
}

fn one_hot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut d = vec![0.0; rows * cols];
    for r in 0..rows {
        d[r * cols + rng.gen_range(0..cols)] = 1.0;
    }
    Tensor::new(vec![rows, cols], d).unwrap()
}

fn multi_hot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let d = (0..rows * cols).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![rows, cols], d).unwrap()
}

pub fn conv2d() {
    let mut r = rng();
    let inputs = vec![random(&[2, 2, 4, 5], &mut r, 1.0), random(&[3, 2, 3, 3], &mut r, 0.5), random(&[3], &mut r, 0.5)];
    check("conv2d", inputs, |t, v| t.conv2d(v[0], v[1], v[2]).unwrap());
}

pub fn batchnorm_train_mode() {
    let mut r = rng();
    let inputs = vec![random(&[3, 2, 2, 3], &mut r, 2.0), random(&[2], &mut r, 1.5), random(&[2], &mut r, 1.0)];
    check("batchnorm2d", inputs, |t, v| {
        t.batchnorm2d(v[0], v[1], v[2], BatchNormMode::Train, 1e-5).unwrap().0
    });
}

pub fn relu_and_pool() {
    let mut r = rng();
    // Keep inputs away from the kink so the central difference is smooth.
    let mut x = random(&[2, 2, 4, 6], &mut r, 1.0);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v);
        }
    }
    check("relu", vec![x.clone()], |t, v| t.relu(v[0]));
    check("avgpool2x2", vec![random(&[2, 3, 5, 4], &mut r, 1.0)], |t, v| t.avgpool2x2(v[0]).unwrap());
}

pub fn dropout_fixed_mask() {
    let mut r = rng();
    check("dropout", vec![random(&[4, 3, 2, 2], &mut r, 1.0)], |t, v| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(5);
        t.dropout(v[0], 0.3, Mode::Train, &mut mask_rng).unwrap()
    });
}

pub fn dense_and_reshape() {
    let mut r = rng();
    let inputs = vec![random(&[3, 2, 2, 2], &mut r, 1.0), random(&[4, 8], &mut r, 1.0), random(&[4], &mut r, 1.0)];
    check("dense", inputs.clone(), |t, v| {
        let flat = t.flatten(v[0]).unwrap();
        t.dense(flat, v[1], Some(v[2])).unwrap()
    });
    check("dense without bias", inputs[..2].to_vec(), |t, v| {
        let x = t.reshape(v[0], vec![3, 8]).unwrap();
        t.dense(x, v[1], None).unwrap()
    });
}

pub fn cosine_head_pieces() {
    let mut r = rng();
    let inputs = vec![random(&[3, 5], &mut r, 1.0), random(&[4, 5], &mut r, 1.0), Tensor::scalar(1.7)];
    check("l2_normalize_rows", vec![inputs[0].clone()], |t, v| t.l2_normalize_rows(v[0]).unwrap());
    check("scaled cosine", inputs, |t, v| {
        let f = t.l2_normalize_rows(v[0]).unwrap();
        let w = t.l2_normalize_rows(v[1]).unwrap();
        let cos = t.dense(f, w, None).unwrap();
        t.scale_by(cos, v[2]).unwrap()
    });
}

pub fn softmax_family() {
    let mut r = rng();
    let x = random(&[3, 5], &mut r, 3.0);
    for temp in [1.0, 2.0, 10.0] {
        check("log_softmax", vec![x.clone()], move |t, v| t.log_softmax(v[0], temp).unwrap());
    }
    check("select_cols", vec![x.clone()], |t, v| t.select_cols(v[0], 1, 4).unwrap());
    let targets = multi_hot(3, 5, &mut r);
    check("bce_with_logits", vec![x.clone()], move |t, v| t.bce_with_logits(v[0], targets.data()).unwrap());
    let teacher = random(&[3, 5], &mut r, 3.0);
    for temp in [1.0, 2.0, 10.0] {
        let teacher = teacher.clone();
        check("kl_softened", vec![x.clone()], move |t, v| t.kl_softened(v[0], teacher.data(), temp).unwrap());
    }
}

pub fn elementwise() {
    let mut r = rng();
    let inputs = vec![random(&[2, 3], &mut r, 1.0), random(&[2, 3], &mut r, 1.0)];
    check("add", inputs.clone(), |t, v| t.add(v[0], v[1]).unwrap());
    check("mul", inputs.clone(), |t, v| t.mul(v[0], v[1]).unwrap());
    check("mul_const", inputs[..1].to_vec(), |t, v| t.mul_const(v[0], -2.5));
    check("sum", inputs[..1].to_vec(), |t, v| t.sum(v[0]));
}

pub fn task_losses() {
    let mut r = rng();
    let logits = random(&[4, 6], &mut r, 2.0);
    let y = one_hot(4, 6, &mut r);
    check("ce_loss", vec![logits.clone()], move |t, v| ce_loss(t, v[0], &y).unwrap());
    let y = multi_hot(4, 6, &mut r);
    check("bce_loss", vec![logits.clone()], move |t, v| bce_loss(t, v[0], &y).unwrap());

    let part = LogitPartition::new(0..2, 2..6, 6).unwrap();
    let y = one_hot(4, 4, &mut r);
    let p = part.clone();
    check("ce_new_loss", vec![logits.clone()], move |t, v| ce_new_loss(t, v[0], &p, &y).unwrap());
    let y = multi_hot(4, 4, &mut r);
    let p = part.clone();
    check("bce_new_loss", vec![logits.clone()], move |t, v| bce_new_loss(t, v[0], &p, &y).unwrap());

    let teacher = random(&[4, 2], &mut r, 2.0);
    check("kd_loss", vec![logits.clone()], move |t, v| {
        let old = t.select_cols(v[0], 0, 2).unwrap();
        kd_loss(t, old, &teacher, 2.0).unwrap()
    });
}

pub fn step_objectives() {
    let mut r = rng();
    let logits = random(&[4, 7], &mut r, 2.0);
    let part = LogitPartition::new(0..3, 3..7, 7).unwrap();
    let teacher = random(&[4, 3], &mut r, 2.0);
    let scenes = one_hot(4, 4, &mut r);
    let events = multi_hot(4, 4, &mut r);
    let cases = [
        ("incremental events (BCE + KD)", TaskKind::MultiLabel, events.clone(), true, true),
        ("incremental scenes (CE + KD)", TaskKind::SingleLabel, scenes.clone(), true, true),
        ("scenes without IndL", TaskKind::SingleLabel, scenes.clone(), false, false),
        ("events without IndL", TaskKind::MultiLabel, events.clone(), false, false),
    ];
    for (name, kind, targets, kd, indl) in cases {
        let cfg = LossConfig {
            kd_enabled: kd,
            indl_enabled: indl,
            ..LossConfig::default()
        };
        let (p, teacher) = (part.clone(), teacher.clone());
        check(name, vec![logits.clone()], move |t, v| {
            let step = StepTargets {
                kind,
                partition: &p,
                targets: &targets,
                teacher: if kd { Some(&teacher) } else { None },
            };
            combined_loss(t, v[0], &step, &cfg).unwrap().total
        });
    }
    let initial = LogitPartition::new(0..0, 0..4, 4).unwrap();
    let y = one_hot(4, 4, &mut r);
    check("initial step (CE)", vec![random(&[4, 4], &mut r, 2.0)], move |t, v| {
        let step = StepTargets {
            kind: TaskKind::SingleLabel,
            partition: &initial,
            targets: &y,
            teacher: None,
        };
        combined_loss(t, v[0], &step, &LossConfig::default()).unwrap().total
    });
    let (ys, ye) = (one_hot(4, 3, &mut r), multi_hot(4, 4, &mut r));
    check("joint CE + BCE", vec![logits], move |t, v| joint_loss(t, v[0], 0..3, &ys, 3..7, &ye, 1.0).unwrap().0);
}

/// conv → bn → relu → pool → dropout → cosine head → CE through the real
/// learner, on a reduced geometry.
pub fn whole_network() {
    let task = TaskSpec::new(0, "s", TaskKind::SingleLabel, vec!["a".into(), "b".into(), "c".into()]);
    let config = ModelConfig {
        channels: [2, 2, 3],
        ..ModelConfig::default()
    };
    let learner = Learner::<f64>::build(InputSpec { n_mels: 8, n_frames: 8 }, config, &[task], 4).unwrap();
    let mut r = rng();
    let x = random(&[3, 1, 8, 8], &mut r, 1.0);
    let y = one_hot(3, 3, &mut r);
    let loss_of = |l: &Learner<f64>| {
        let mut tape = Tape::new();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(8);
        let pass = l.forward(&mut tape, &x, Mode::Train, &mut drop_rng).unwrap();
        let loss = ce_loss(&mut tape, pass.logits, &y).unwrap();
        (tape, pass.params, loss)
    };
    let (mut tape, params, loss) = loss_of(&learner);
    tape.backward(loss).unwrap();
    let n_params = params.len();
    for k in 0..n_params {
        let analytic = tape.grad(params[k]).unwrap().to_vec();
        let len = analytic.len();
        let mut numeric = vec![0.0; len];
        for i in 0..len {
            let probe = |delta: f64| {
                let mut l = learner.clone();
                l.parameters_mut()[k].data_mut()[i] += delta;
                let (t, _, loss) = loss_of(&l);
                t.value(loss).data()[0]
            };
            numeric[i] = (probe(STEP) - probe(-STEP)) / (2.0 * STEP);
        }
        let rel = relative(&analytic, &numeric);
        assert!(rel < TOL, "learner parameter {k}: relative error {rel:e}");
    }
}

/// Every check, by name, in the order the suite runs them.
pub const CASES: &[(&str, fn())] = &[
    ("conv2d", conv2d),
    ("batchnorm_train_mode", batchnorm_train_mode),
    ("relu_and_pool", relu_and_pool),
    ("dropout_fixed_mask", dropout_fixed_mask),
    ("dense_and_reshape", dense_and_reshape),
    ("cosine_head_pieces", cosine_head_pieces),
    ("softmax_family", softmax_family),
    ("elementwise", elementwise),
    ("task_losses", task_losses),
    ("step_objectives", step_objectives),
    ("whole_network", whole_network),
];
