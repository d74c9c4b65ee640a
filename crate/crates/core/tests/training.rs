use eloquent::connectivity::WindowConfig;
use eloquent::diffcore::Gradients;
use eloquent::loss::LossMode;
use eloquent::model::{ModelConfig, ModelState, Task, Variant};
use eloquent::synthdata::{generate_cohort, SynthConfig};
use eloquent::training::{cross_validate, example_gradient, train, Example, TrainConfig};

fn synth(patients: usize, presence: [f64; 4]) -> SynthConfig {
    SynthConfig {
        regions: 20,
        frames: 40,
        patients,
        task_presence: presence,
        community_sizes: [2, 2, 2, 2],
        tumor_size: [1, 3],
        block_frames: [10, 15],
        bilateral_fraction: 0.0,
        ..SynthConfig::default()
    }
}

fn model(variant: Variant) -> ModelConfig {
    // the dense baseline reads all N^2 entries, so it needs a larger budget
    let (filters, fc) = match variant {
        Variant::MtAnn => (10, vec![16, 8]),
        _ => (3, vec![8, 6]),
    };
    ModelConfig {
        regions: 20,
        filters,
        fc_dims: fc,
        lstm_hidden: 4,
        leaky_slope: 0.1,
        variant,
        ..ModelConfig::default()
    }
}

fn wcfg() -> WindowConfig {
    WindowConfig {
        window_length: 15,
        stride: 5,
        ..WindowConfig::default()
    }
}

fn examples(cfg: &SynthConfig, mcfg: &ModelConfig) -> Vec<Example> {
    let state = ModelState::init(mcfg, 0).unwrap();
    generate_cohort(cfg)
        .unwrap()
        .iter()
        .map(|p| p.example(&wcfg(), &state).unwrap())
        .collect()
}

#[test]
fn single_patient_loss_decreases() {
    for mode in LossMode::ALL {
        let mcfg = model(Variant::Proposed);
        let ex = examples(&synth(1, [1.0; 4]), &mcfg);
        let cfg = TrainConfig {
            loss_mode: mode,
            ..TrainConfig::default()
        };
        let out = train(&ex, &cfg, &mcfg).unwrap();
        assert_eq!(out.history.len(), 300);
        let (first, last) = (out.history[0], *out.history.last().unwrap());
        assert!(last < first, "{mode}: {first} -> {last}");
    }
}

#[test]
fn same_seed_is_bit_identical() {
    for variant in Variant::ALL {
        let mcfg = model(variant);
        let ex = examples(&synth(5, [1.0, 0.5, 0.5, 0.5]), &mcfg);
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: Some(2),
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train(&ex, &cfg, &mcfg).unwrap();
        let b = train(&ex, &cfg, &mcfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.state.params(), b.state.params());
        let other = train(&ex, &TrainConfig { seed: 12, ..cfg.clone() }, &mcfg).unwrap();
        assert_ne!(a.history, other.history);
    }
}

#[test]
fn absent_task_head_keeps_its_initialization() {
    let mcfg = model(Variant::Proposed);
    let cfg = TrainConfig {
        epochs: 40,
        seed: 3,
        loss_mode: LossMode::SoftmaxCe,
        ..TrainConfig::default()
    };
    // foot never performed by anyone
    let ex = examples(&synth(4, [1.0, 1.0, 0.0, 1.0]), &mcfg);
    assert!(ex.iter().all(|e| !e.labels.is_present(Task::Foot)));

    let init = ModelState::init(&mcfg, eloquent::seeding::derive_seed(cfg.seed, 0)).unwrap();
    for e in &ex {
        let (_, grads) = example_gradient(&init, e, &cfg).unwrap();
        for id in init.head_params(Task::Foot) {
            assert!(grads.get(id).iter().all(|&g| g == 0.0));
        }
    }

    let out = train(&ex, &cfg, &mcfg).unwrap();
    for id in out.state.head_params(Task::Foot) {
        assert_eq!(out.state.params().get(id), init.params().get(id));
    }
    for id in out.state.head_params(Task::Finger) {
        assert_ne!(out.state.params().get(id), init.params().get(id));
    }
}

#[test]
fn mixed_batches_freeze_only_unseen_heads() {
    // in a batch where some patient performed a task, that head moves
    let mcfg = model(Variant::MtGnnStatic);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: None,
        loss_mode: LossMode::SoftmaxCe,
        ..TrainConfig::default()
    };
    let ex = examples(&synth(6, [1.0, 0.5, 0.5, 0.5]), &mcfg);
    let init = ModelState::init(&mcfg, eloquent::seeding::derive_seed(cfg.seed, 0)).unwrap();
    let out = train(&ex, &cfg, &mcfg).unwrap();
    for task in Task::ALL {
        let performed = ex.iter().any(|e| e.labels.is_present(task));
        let moved = out.state.head_params(task).iter().any(|&id| out.state.params().get(id) != init.params().get(id));
        assert_eq!(performed, moved, "{task}");
    }
}

#[test]
fn cross_validation_averages_only_performed_tasks() {
    let mcfg = model(Variant::MtGnnStatic);
    let cfg = TrainConfig {
        epochs: 5,
        folds: 4,
        loss_mode: LossMode::SoftmaxCe,
        ..TrainConfig::default()
    };
    let scfg = synth(8, [1.0, 0.6, 0.3, 0.6]);
    let ex = examples(&scfg, &mcfg);
    let report = cross_validate(&ex, &cfg, &mcfg).unwrap();
    assert_eq!(report.folds.len(), 4);
    for task in Task::ALL {
        let performed = ex.iter().filter(|e| e.labels.is_present(task)).count();
        let evaluated: usize = report
            .folds
            .iter()
            .map(|f| f.patients.iter().filter(|p| p.metrics[task.index()].is_some()).count())
            .sum();
        assert_eq!(evaluated, performed, "{task}");
        let folds_with_task = report.folds.iter().filter(|f| f.summary[task.index()].is_some()).count();
        match &report.summary[task.index()] {
            Some(s) => assert_eq!(s.counts.overall_accuracy, folds_with_task),
            None => assert_eq!(folds_with_task, 0),
        }
    }
    // every patient is tested exactly once
    let mut tested: Vec<&str> = report.folds.iter().flat_map(|f| f.split.test.iter().map(String::as_str)).collect();
    tested.sort_unstable();
    let mut ids: Vec<&str> = ex.iter().map(|e| e.id.as_str()).collect();
    ids.sort_unstable();
    assert_eq!(tested, ids);
}

#[test]
fn fold_without_a_task_is_skipped_in_the_mean() {
    let mcfg = model(Variant::MtGnnStatic);
    let cfg = TrainConfig {
        epochs: 2,
        folds: 4,
        loss_mode: LossMode::SoftmaxCe,
        ..TrainConfig::default()
    };
    let mut ex = examples(&synth(8, [1.0; 4]), &mcfg);
    // only one patient performed the tongue task
    for e in ex.iter_mut().skip(1) {
        e.labels = e.labels.without(Task::Tongue);
    }
    let report = cross_validate(&ex, &cfg, &mcfg).unwrap();
    let tongue = report.summary[Task::Tongue.index()].as_ref().unwrap();
    assert_eq!(tongue.counts.overall_accuracy, 1);
    assert_eq!(tongue.counts.auc, 1);
    let defined = report.folds.iter().filter(|f| f.summary[Task::Tongue.index()].is_some()).count();
    assert_eq!(defined, 1);
}

#[test]
fn gradients_are_summed_in_a_fixed_order() {
    let mcfg = model(Variant::Proposed);
    let ex = examples(&synth(2, [1.0; 4]), &mcfg);
    let state = ModelState::init(&mcfg, 1).unwrap();
    let cfg = TrainConfig::default();
    let (_, g1) = example_gradient(&state, &ex[0], &cfg).unwrap();
    let (_, g2) = example_gradient(&state, &ex[0], &cfg).unwrap();
    let flat = |g: &Gradients| g.iter().flat_map(|v| v.to_vec()).collect::<Vec<_>>();
    assert_eq!(flat(&g1), flat(&g2));
}
