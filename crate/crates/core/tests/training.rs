use cllora_core::classifier::PrototypeStore;
use cllora_core::harness::{build_model, build_stream, run_experiment, ExperimentConfig, RunRngs};
use cllora_core::model::Model;
use cllora_core::streams::{Task, TaskStream};
use cllora_core::trainer::{train_task, Optimizer, TaskSession, TrainConfig};
use cllora_core::{Error, Execution};

fn quick() -> ExperimentConfig {
    ExperimentConfig {
        train_per_class: 4,
        test_per_class: 2,
        ..ExperimentConfig::micro()
    }
}

fn setup(cfg: &ExperimentConfig, seed: u64) -> (TaskStream, Model, RunRngs) {
    let mut rngs = RunRngs::new(seed);
    let stream = build_stream(cfg, &mut rngs).unwrap();
    let model = build_model(cfg, &mut rngs).unwrap();
    (stream, model, rngs)
}

/// Model after task 1, and a session at the start of task 2.
fn second_task(cfg: &ExperimentConfig, seed: u64) -> (TaskStream, Model, TaskSession) {
    let (stream, mut model, mut rngs) = setup(cfg, seed);
    let tc = cfg.train_config();
    train_task(&mut model, &mut PrototypeStore::new(), &stream.tasks[0], &tc, &mut rngs.training, None).unwrap();
    let session = TaskSession::begin(&model, &stream.tasks[1], &tc, &mut rngs.training).unwrap();
    (stream, model, session)
}

#[test]
fn zero_learning_rate_changes_nothing() {
    for optimizer in [Optimizer::Adam, Optimizer::Sgd] {
        let cfg = ExperimentConfig {
            learning_rate: 0.0,
            optimizer,
            ..quick()
        };
        let (_, mut model, mut session) = second_task(&cfg, 1);
        let before = session.parameters(&model);
        let log = session.run(&mut model, None).unwrap();
        assert!(!log.steps.is_empty());
        let after = session.parameters(&model);
        assert_eq!(before.len(), after.len());
        for (b, a) in before.iter().zip(&after) {
            assert_eq!(b.key, a.key);
            let same = b.value.data().iter().zip(a.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{:?} moved under lr 0 with {optimizer:?}", b.key);
        }
    }
}

#[test]
fn separable_pair_is_fit() {
    let cfg = ExperimentConfig {
        num_classes: 2,
        num_tasks: 1,
        train_per_class: 6,
        noise_std: 0.02,
        epochs: 40,
        ..quick()
    };
    let (stream, mut model, mut rngs) = setup(&cfg, 2);
    let task = &stream.tasks[0];

    // Nearest class mean in pixel space: the data is separable.
    let mean = |local: usize| -> Vec<f64> {
        let members: Vec<&Vec<f32>> = task.train.iter().filter(|s| s.local == local).map(|s| &s.image).collect();
        (0..members[0].len())
            .map(|p| members.iter().map(|m| m[p] as f64).sum::<f64>() / members.len() as f64)
            .collect()
    };
    let means = [mean(0), mean(1)];
    let dist = |img: &[f32], m: &[f64]| img.iter().zip(m).map(|(a, b)| (*a as f64 - b).powi(2)).sum::<f64>();
    for s in &task.train {
        let nearest = usize::from(dist(&s.image, &means[1]) < dist(&s.image, &means[0]));
        assert_eq!(nearest, s.local);
    }

    let mut session = TaskSession::begin(&model, task, &cfg.train_config(), &mut rngs.training).unwrap();
    let log = session.run(&mut model, None).unwrap();
    assert!(log.epochs.last().unwrap().loss_ce < log.epochs[0].loss_ce);
    for i in 0..session.num_samples() {
        let logits = session.logits(&model, i, true).unwrap();
        let predicted = usize::from(logits[1] > logits[0]);
        assert_eq!(predicted, task.train[i].local, "sample {i} misclassified after training");
    }
}

#[test]
fn batch_loss_is_weighted_sum_of_terms() {
    let cfg = quick();
    let (_, model, session) = second_task(&cfg, 3);
    assert!(session.kd_active() && session.orth_active());
    let idx: Vec<usize> = (0..session.num_samples()).collect();
    let (_, loss) = session.batch(&model, &idx).unwrap();
    let tc = cfg.train_config();
    assert!((loss.total - (loss.ce + tc.lambda_kd * loss.kd + tc.lambda_orth * loss.orth)).abs() <= 1e-12);

    let n = idx.len() as f64;
    let mut ce = 0.0;
    let mut kd = 0.0;
    for &i in &idx {
        let (c, k) = session.sample_losses(&model, i, Some(session.kd_target(i).unwrap())).unwrap();
        ce += c / n;
        kd += k / n;
    }
    assert!((loss.ce - ce).abs() <= 1e-12);
    assert!((loss.kd - kd).abs() <= 1e-12);
    assert!((loss.orth - session.orth_term().unwrap().0).abs() <= 1e-12);
    assert!(loss.kd > 0.0 && loss.orth > 0.0);
}

#[test]
fn teacher_snapshot_does_not_follow_training() {
    let (_, mut model, mut session) = second_task(&quick(), 4);
    let snapshot = session.snapshot().unwrap().clone();
    let cached: Vec<Vec<f64>> = (0..session.num_samples()).map(|i| session.cached_teacher(i).unwrap().to_vec()).collect();
    let shared_before = model.shared().clone();
    session.run(&mut model, None).unwrap();
    assert_ne!(model.shared(), &shared_before, "shared adapter should have trained");
    assert_eq!(session.snapshot().unwrap(), &snapshot);
    for (i, c) in cached.iter().enumerate() {
        assert_eq!(session.cached_teacher(i).unwrap(), c.as_slice());
        assert_eq!(&session.teacher_feature(&model, i).unwrap(), c);
    }
}

#[test]
fn disabled_terms_contribute_nothing() {
    let cfg = ExperimentConfig {
        kd: false,
        bw: false,
        ..quick()
    };
    let (_, mut model, mut session) = second_task(&cfg, 5);
    assert!(!session.kd_active() && !session.orth_active());
    let log = session.run(&mut model, None).unwrap();
    assert!(log.steps.iter().all(|s| s.kd == 0.0 && s.orth == 0.0 && s.total == s.ce));
    assert!(session.weights().mu().iter().all(|&m| m == 1.0));
}

#[test]
fn finished_tasks_are_frozen() {
    let (stream, mut model, session) = second_task(&quick(), 6);
    let mut store = PrototypeStore::new();
    session.finish(&mut model, &stream.tasks[1], &mut store).unwrap();
    for t in model.tasks() {
        assert!(t.specific.is_frozen());
        assert!(t.weights.is_frozen());
    }
    assert_eq!(store.for_task(2).count(), 2);
}

#[test]
fn protocol_violations_are_rejected() {
    let cfg = quick();
    let (stream, model, mut rngs) = setup(&cfg, 7);
    let tc = cfg.train_config();
    let err = TaskSession::begin(&model, &stream.tasks[1], &tc, &mut rngs.training).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));

    let empty = Task {
        train: Vec::new(),
        ..stream.tasks[0].clone()
    };
    assert!(matches!(TaskSession::begin(&model, &empty, &tc, &mut rngs.training), Err(Error::Data(_))));

    let bad = TrainConfig {
        batch_size: 0,
        ..tc
    };
    assert!(matches!(TaskSession::begin(&model, &stream.tasks[0], &bad, &mut rngs.training), Err(Error::Config(_))));
}

#[test]
fn execution_mode_does_not_change_results() {
    let base = ExperimentConfig {
        num_tasks: 2,
        ..quick()
    };
    let par = run_experiment(&ExperimentConfig { execution: Execution::Parallel, ..base.clone() }, 8, None).unwrap();
    let seq = run_experiment(&ExperimentConfig { execution: Execution::Sequential, ..base }, 8, None).unwrap();
    let strip = |r: &cllora_core::harness::RunReport| {
        let mut r = r.without_timings();
        r.config.execution = Execution::Sequential;
        r
    };
    assert_eq!(strip(&par.report), strip(&seq.report));
    assert_eq!(par.logs, seq.logs);
    assert_eq!(par.store, seq.store);
}

#[test]
fn runs_are_reproducible() {
    let a = run_experiment(&quick(), 9, None).unwrap();
    let b = run_experiment(&quick(), 9, None).unwrap();
    assert_eq!(a.report.without_timings(), b.report.without_timings());
    assert_eq!(a.model.frozen_hashes(), b.model.frozen_hashes());
    let c = run_experiment(&quick(), 10, None).unwrap();
    assert_ne!(a.model.frozen_hashes(), c.model.frozen_hashes());
}
