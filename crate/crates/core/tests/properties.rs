use std::collections::HashSet;
use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use incremental_audio::data::{epoch_order, make_batches, parse_manifest, Dataset, Example, ManifestEntry, Split};
use incremental_audio::features::FeatureMatrix;
use incremental_audio::losses::{
    adaptive_lambda, combined_loss, kd_loss, softmax_t, LogitPartition, LossConfig, StepTargets,
};
use incremental_audio::metrics::{accuracy, confusion_matrix, f1_at_threshold, forgetting, F1Average};
use incremental_audio::model::{Checkpoint, ClassRegistry, InputSpec, Learner, ModelConfig};
use incremental_audio::task::{TaskKind, TaskSpec};
use incremental_audio::tensor::{Mode, Tape, Tensor};
use incremental_audio::train::cosine_annealing_lr;

fn logits_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, n)
}

fn task(id: u32, kind: TaskKind, n: usize) -> TaskSpec {
    TaskSpec::new(id, format!("t{id}"), kind, (0..n).map(|k| format!("t{id}c{k}")).collect())
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        channels: [2, 2, 3],
        ..ModelConfig::default()
    }
}

fn tiny_input() -> InputSpec {
    InputSpec { n_mels: 8, n_frames: 8 }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0f32..2.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(x in logits_vec(7), t in 0.5f64..10.0) {
        let p = softmax_t(&x, t).unwrap();
        prop_assert!(p.iter().all(|&v| v > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant(x in logits_vec(5), c in -50.0f64..50.0) {
        let p = softmax_t(&x, 2.0).unwrap();
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let q = softmax_t(&shifted, 2.0).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kd_is_non_negative_and_zero_on_self(
        s in logits_vec(12), t in logits_vec(12), temp in 0.5f64..10.0
    ) {
        let student = Tensor::new(vec![3, 4], s.clone()).unwrap();
        let teacher = Tensor::new(vec![3, 4], t).unwrap();

        let mut tape = Tape::<f64>::new();
        let sv = tape.param(student.clone());
        let kd = kd_loss(&mut tape, sv, &teacher, temp).unwrap();
        prop_assert!(tape.value(kd).data()[0] >= -1e-12);

        let mut tape = Tape::<f64>::new();
        let sv = tape.param(student.clone());
        let kd = kd_loss(&mut tape, sv, &student, temp).unwrap();
        prop_assert!(tape.value(kd).data()[0].abs() < 1e-12);
    }

    #[test]
    fn lambda_grows_with_the_new_share(old in 1usize..50, new in 1usize..50, omega in 0.0f64..10.0) {
        let a = adaptive_lambda(old + new, old, omega).unwrap();
        let b = adaptive_lambda(old + new + 1, old, omega).unwrap();
        prop_assert!(b >= a);
        prop_assert!(a <= omega + 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn accuracy_ignores_units_outside_the_subset(
        x in logits_vec(24), noise in logits_vec(24), truth in prop::collection::vec(0usize..3, 4)
    ) {
        // Six units, subset {1, 3, 4}; truth indexes into the subset.
        let subset = [1usize, 3, 4];
        let truth_units: Vec<usize> = truth.iter().map(|&k| subset[k]).collect();
        let a = Tensor::new(vec![4, 6], x.clone()).unwrap();
        let mut y = x.clone();
        for r in 0..4 {
            for c in [0usize, 2, 5] {
                y[r * 6 + c] = noise[r * 6 + c] * 100.0;
            }
        }
        let b = Tensor::new(vec![4, 6], y).unwrap();
        prop_assert_eq!(
            accuracy(&a, &truth_units, &subset).unwrap(),
            accuracy(&b, &truth_units, &subset).unwrap()
        );
    }

    #[test]
    fn micro_f1_ignores_example_order(
        x in logits_vec(30), labels in prop::collection::vec(prop::collection::vec(any::<bool>(), 5), 6),
        seed in any::<u64>()
    ) {
        let units: Vec<usize> = (0..5).collect();
        let flat: Vec<f64> = labels.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let logits = Tensor::new(vec![6, 5], x.clone()).unwrap();
        let truth = Tensor::new(vec![6, 5], flat.clone()).unwrap();
        let f = f1_at_threshold(&logits, &units, &truth, 0.5, F1Average::Micro).unwrap();

        let order = epoch_order(6, seed, 0, true);
        let mut y = Vec::new();
        let mut t = Vec::new();
        for &i in &order {
            y.extend_from_slice(&x[i * 5..i * 5 + 5]);
            t.extend_from_slice(&flat[i * 5..i * 5 + 5]);
        }
        let permuted = Tensor::new(vec![6, 5], y).unwrap();
        let t = Tensor::new(vec![6, 5], t).unwrap();
        let g = f1_at_threshold(&permuted, &units, &t, 0.5, F1Average::Micro).unwrap();
        prop_assert_eq!(f, g);
        prop_assert!((0.0..=100.0).contains(&f));
    }

    #[test]
    fn confusion_diagonal_matches_accuracy(
        x in logits_vec(40), truth in prop::collection::vec(0usize..4, 8)
    ) {
        let logits = Tensor::new(vec![8, 5], x).unwrap();
        let units = [0usize, 1, 2, 3];
        let classes: Vec<String> = (0..4).map(|k| format!("c{k}")).collect();
        let cm = confusion_matrix(&logits, &truth, &units, classes, 2).unwrap();
        prop_assert_eq!(cm.total(), 8);
        let acc = accuracy(&logits, &truth, &units).unwrap();
        prop_assert!((cm.accuracy() - acc).abs() < 1e-9);
    }

    #[test]
    fn forgetting_is_the_drop(a in 0.0f64..100.0, b in 0.0f64..100.0) {
        prop_assert_eq!(forgetting(a, a), 0.0);
        prop_assert!((forgetting(a, b) - (a - b)).abs() <= 1e-9);
    }

    #[test]
    fn batches_cover_every_example_once(
        n in 1usize..60, batch in 1usize..17, seed in any::<u64>(), epoch in 0usize..5
    ) {
        let t = task(0, TaskKind::SingleLabel, 3);
        let input = InputSpec { n_mels: 1, n_frames: 1 };
        let examples = (0..n)
            .map(|i| Example { id: format!("e{i}"), features: vec![i as f32], labels: vec![i % 3] })
            .collect();
        let data = Dataset { task: t, input, examples };
        let batches = make_batches::<f32>(&data, batch, seed, epoch, true).unwrap();
        let mut seen = vec![0u32; n];
        for b in &batches {
            prop_assert!(b.indices.len() <= batch);
            for (r, &i) in b.indices.iter().enumerate() {
                seen[i] += 1;
                prop_assert_eq!(b.features.data()[r], i as f32);
                prop_assert_eq!(b.targets.data()[r * 3 + i % 3], 1.0);
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert_eq!(batches.len(), n.div_ceil(batch));
        let again = make_batches::<f32>(&data, batch, seed, epoch, true).unwrap();
        let a: Vec<_> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        let b: Vec<_> = again.iter().flat_map(|b| b.indices.clone()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn lmel_round_trip_is_bitwise(
        frames in 1usize..20, mels in 1usize..12, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..frames * mels).map(|_| rng.gen_range(-30.0f32..5.0)).collect();
        let fm = FeatureMatrix::new(frames, mels, data).unwrap();
        let back = FeatureMatrix::from_bytes(&fm.to_bytes(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.n_frames, fm.n_frames);
        let same = back.data.iter().zip(&fm.data).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn manifest_lines_round_trip(labels in prop::collection::btree_set(0usize..6, 1..4), id in 0u32..3) {
        let t = task(id, TaskKind::MultiLabel, 6);
        let entry = ManifestEntry {
            feature_ref: "features/a.lmel".into(),
            path: "dir/features/a.lmel".into(),
            task_id: id,
            labels: labels.iter().map(|&k| t.classes[k].clone()).collect(),
            split: Split::Train,
        };
        let parsed = parse_manifest(&entry.to_line(), Path::new("dir/m.tsv"), &t).unwrap();
        prop_assert_eq!(parsed, vec![entry]);
    }

    #[test]
    fn lr_stays_between_the_endpoints(lr0 in 1e-4f64..1.0, frac in 0.0f64..1.0, total in 1usize..200) {
        let lr_min = lr0 * frac;
        let mut last = f64::INFINITY;
        for e in 0..total {
            let lr = cosine_annealing_lr(e, total, lr0, lr_min).unwrap();
            prop_assert!(lr <= lr0 && lr >= lr_min);
            prop_assert!(lr <= last);
            last = lr;
        }
        prop_assert_eq!(cosine_annealing_lr(0, total, lr0, lr_min).unwrap(), lr0);
    }

    #[test]
    fn registry_partitions_units(sizes in prop::collection::vec(1usize..6, 1..5)) {
        let mut reg = ClassRegistry::new();
        let mut start = 0;
        for (i, &n) in sizes.iter().enumerate() {
            let kind = if i % 2 == 0 { TaskKind::SingleLabel } else { TaskKind::MultiLabel };
            let range = reg.register(&task(i as u32, kind, n)).unwrap();
            prop_assert_eq!(range.clone(), start..start + n);
            let p = reg.partition(i as u32).unwrap();
            prop_assert_eq!(p.old_units(), 0..start);
            prop_assert_eq!(p.new_units(), range);
            start += n;
        }
        prop_assert_eq!(reg.len(), start);
        let names: HashSet<_> = reg.entries().iter().map(|e| e.name.clone()).collect();
        prop_assert_eq!(names.len(), start);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cosine_logits_are_bounded_and_scale_free(
        seed in any::<u64>(), scale in 0.01f64..100.0
    ) {
        let learner = Learner::<f64>::build(tiny_input(), tiny_config(), &[task(0, TaskKind::SingleLabel, 4)], seed).unwrap();
        let head = learner.classifier();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let d = head.dim();
        let f: Vec<f64> = (0..3 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = f.iter().map(|v| v * scale).collect();

        let run = |x: Vec<f64>| {
            let mut tape = Tape::<f64>::new();
            let fv = tape.constant(Tensor::new(vec![3, d], x).unwrap());
            let (logits, _, _) = head.forward(&mut tape, fv).unwrap();
            tape.value(logits).data().to_vec()
        };
        let a = run(f);
        let b = run(g);
        let eta = head.eta();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.abs() <= eta + 1e-9);
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    /// With independent learning, the task loss leaves old units with a
    /// gradient of exactly zero.
    #[test]
    fn independent_learning_isolates_old_units(
        x in logits_vec(20), labels in prop::collection::vec(0usize..2, 4), multi in any::<bool>()
    ) {
        let partition = LogitPartition::new(0..3, 3..5, 5).unwrap();
        let kind = if multi { TaskKind::MultiLabel } else { TaskKind::SingleLabel };
        let mut t = vec![0.0; 8];
        for (r, &k) in labels.iter().enumerate() {
            t[r * 2 + k] = 1.0;
        }
        let targets = Tensor::new(vec![4, 2], t).unwrap();
        let cfg = LossConfig { kd_enabled: false, ..LossConfig::default() };
        let mut tape = Tape::<f64>::new();
        let lv = tape.param(Tensor::new(vec![4, 5], x).unwrap());
        let step = StepTargets { kind, partition: &partition, targets: &targets, teacher: None };
        let loss = combined_loss(&mut tape, lv, &step, &cfg).unwrap();
        tape.backward(loss.total).unwrap();
        let grad = tape.grad(lv).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                prop_assert_eq!(grad[r * 5 + c].to_bits(), 0.0f64.to_bits());
            }
            prop_assert!(grad[r * 5 + 3..r * 5 + 5].iter().any(|&g| g != 0.0));
        }
    }

    /// Growing the classifier leaves the old units' outputs bit-identical.
    #[test]
    fn expansion_preserves_old_outputs(seed in any::<u64>()) {
        let t0 = task(0, TaskKind::SingleLabel, 3);
        let t1 = task(1, TaskKind::MultiLabel, 2);
        let mut learner = Learner::<f32>::build(tiny_input(), tiny_config(), &[t0], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let warm = random_tensor(&[6, 1, 8, 8], &mut rng);
        let mut tape = Tape::new();
        let pass = learner.forward(&mut tape, &warm, Mode::Train, &mut rng).unwrap();
        learner.apply_batch_stats(&pass.batch_stats).unwrap();

        let grown = learner.expand_classifier(&t1, seed ^ 7).unwrap();
        prop_assert_eq!(grown.num_classes(), 5);
        let input = random_tensor(&[5, 1, 8, 8], &mut rng);
        let before = learner.infer(&input).unwrap();
        let after = grown.infer(&input).unwrap();
        for r in 0..5 {
            for c in 0..3 {
                prop_assert_eq!(before.data()[r * 3 + c].to_bits(), after.data()[r * 5 + c].to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(seed in any::<u64>()) {
        let learner = Learner::<f32>::build(tiny_input(), tiny_config(), &[task(0, TaskKind::SingleLabel, 3)], seed).unwrap();
        let ck = Checkpoint { step: 0, learner, history: vec![] };
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
