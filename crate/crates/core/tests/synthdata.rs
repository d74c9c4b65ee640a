use eloquent::connectivity::{TimeSeries, WindowConfig};
use eloquent::evaluation::pearson;
use eloquent::model::{Task, ELOQUENT, TUMOR};
use eloquent::synthdata::{
    generate_cohort, generate_patient, hemisphere, oracle_window_synchrony, Hemisphere, SynthConfig,
    SynthPatient,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn patient(cfg: &SynthConfig, seed: u64, bilateral: bool) -> SynthPatient {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_patient(cfg, "p", bilateral, &mut rng).unwrap()
}

/// Mean oracle synchrony over windows entirely inside (or outside) the active
/// intervals of a network.
fn synchrony_by_state(cfg: &SynthConfig, seeds: std::ops::Range<u64>) -> (f64, f64) {
    let wcfg = WindowConfig::default();
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for seed in seeds {
        let p = patient(cfg, seed, false);
        let (lang, motor) = p.schedule.window_activity(cfg.frames, &wcfg);
        for (task, act) in [(Task::Language, &lang), (Task::Finger, &motor), (Task::Tongue, &motor)] {
            let trace = p.synchrony(task, &wcfg).unwrap();
            for (v, &a) in trace.values.iter().zip(act.iter()) {
                if a == 1.0 {
                    inside.push(v.unwrap());
                } else if a == 0.0 {
                    outside.push(v.unwrap());
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(inside.len() > 20 && outside.len() > 20);
    (mean(&inside), mean(&outside))
}

#[test]
fn active_windows_reach_the_high_level() {
    let cfg = SynthConfig::default();
    let (inside, outside) = synchrony_by_state(&cfg, 0..40);
    assert!((0.55..=0.85).contains(&inside), "active {inside}");
    assert!((-0.05..=0.25).contains(&outside), "inactive {outside}");
}

#[test]
fn measurement_noise_lowers_synchrony() {
    let noisy = SynthConfig {
        noise: 1.0,
        ..SynthConfig::default()
    };
    let (clean, _) = synchrony_by_state(&SynthConfig::default(), 0..20);
    let (dirty, _) = synchrony_by_state(&noisy, 0..20);
    // unit-variance signal plus unit noise halves the correlation
    assert!((dirty - clean / 2.0).abs() < 0.08, "{dirty} vs {clean}");
}

#[test]
fn unilateral_language_stays_left() {
    let cfg = SynthConfig::default();
    for seed in 0..30 {
        let p = patient(&cfg, seed, false);
        let classes = p.labels.classes(Task::Language).unwrap();
        for (r, &c) in classes.iter().enumerate() {
            if c == ELOQUENT {
                assert_eq!(p.hemisphere(r), Hemisphere::Left, "seed {seed} region {r}");
            }
        }
    }
}

#[test]
fn bilateral_language_spans_both_halves() {
    let cfg = SynthConfig::default();
    for seed in 0..10 {
        let p = patient(&cfg, seed, true);
        let sides: Vec<Hemisphere> = p
            .communities
            .language
            .iter()
            .map(|&r| hemisphere(r, cfg.regions))
            .collect();
        assert!(sides.contains(&Hemisphere::Left) && sides.contains(&Hemisphere::Right));
    }
}

#[test]
fn same_rng_state_gives_the_same_patient() {
    let cfg = SynthConfig::default();
    assert_eq!(patient(&cfg, 9, false), patient(&cfg, 9, false));
    assert_ne!(patient(&cfg, 9, false).series, patient(&cfg, 10, false).series);
    let small = SynthConfig {
        patients: 6,
        ..SynthConfig::default()
    };
    assert_eq!(generate_cohort(&small).unwrap(), generate_cohort(&small).unwrap());
}

#[test]
fn schedules_are_anti_correlated() {
    let cfg = SynthConfig::default();
    let wcfg = WindowConfig::default();
    for seed in 0..30 {
        let p = patient(&cfg, seed, false);
        let (lang, motor) = p.schedule.window_activity(cfg.frames, &wcfg);
        let r = pearson(&lang, &motor).unwrap();
        assert!(r < 0.0, "seed {seed}: {r}");
    }
}

#[test]
fn cohort_presence_follows_the_probabilities() {
    let cfg = SynthConfig {
        patients: 400,
        frames: 50,
        ..SynthConfig::default()
    };
    let cohort = generate_cohort(&cfg).unwrap();
    for (k, &p) in cfg.task_presence.iter().enumerate() {
        let count = cohort
            .iter()
            .filter(|pt| pt.labels.is_present(Task::ALL[k]))
            .count() as f64;
        let n = cfg.patients as f64;
        let sd = (n * p * (1.0 - p)).sqrt();
        assert!((count - n * p).abs() <= 4.0 * sd + 1e-9, "task {k}: {count}");
    }
    assert_eq!(cohort.iter().filter(|p| p.bilateral).count(), 36);
}

#[test]
fn default_cohort_matches_the_table_counts() {
    let cohort = generate_cohort(&SynthConfig::default()).unwrap();
    assert_eq!(cohort.len(), 56);
    assert_eq!(cohort.iter().filter(|p| p.bilateral).count(), 5);
    let counts: Vec<usize> = Task::ALL
        .iter()
        .map(|&t| cohort.iter().filter(|p| p.labels.is_present(t)).count())
        .collect();
    assert_eq!(counts[0], 56);
    // binomial spread around 36, 17, 39
    for (c, e) in counts[1..].iter().zip([36.0, 17.0, 39.0]) {
        assert!((*c as f64 - e).abs() <= 12.0, "{counts:?}");
    }
}

#[test]
fn certain_presence_labels_every_task() {
    let cfg = SynthConfig {
        patients: 8,
        task_presence: [1.0; 4],
        ..SynthConfig::default()
    };
    for p in generate_cohort(&cfg).unwrap() {
        assert_eq!(p.labels.present().count(), 4);
    }
}

#[test]
fn constant_regions_are_excluded_from_synchrony() {
    let frames = 20;
    let values: Vec<f64> = (0..frames)
        .flat_map(|t| [t as f64, 3.0, (t * t) as f64])
        .collect();
    let ts = TimeSeries::new(frames, 3, values).unwrap();
    let wcfg = WindowConfig {
        window_length: 10,
        stride: 10,
        ..WindowConfig::default()
    };
    let trace = oracle_window_synchrony(&ts, &[0, 1, 2], &wcfg).unwrap();
    assert_eq!(trace.excluded_pairs, 4);
    assert_eq!(trace.values.len(), 2);
    assert!(trace.values.iter().all(|v| v.unwrap() > 0.9));
    let trace = oracle_window_synchrony(&ts, &[1, 0], &wcfg).unwrap();
    assert_eq!(trace.values, vec![None, None]);
}

fn check_consistency(p: &SynthPatient) {
    let n = p.regions();
    p.labels.check_mask(&p.mask).unwrap();
    assert!(p.labels.present().count() >= 1);
    for task in p.labels.present() {
        let classes = p.labels.classes(task).unwrap();
        let planted = p.communities.for_task(task);
        assert!(!planted.is_empty());
        for r in 0..n {
            let expected = if planted.contains(&r) {
                ELOQUENT
            } else if p.mask.contains(r) {
                TUMOR
            } else {
                2
            };
            assert_eq!(classes[r], expected, "{task} region {r}");
        }
        for &r in planted {
            assert!(!p.mask.contains(r));
        }
    }
    for &r in &p.communities.distractor {
        assert!(!p.mask.contains(r));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn labels_masks_and_schedules_agree(
        seed in any::<u64>(),
        bilateral in any::<bool>(),
        tumor_max in 0usize..12,
        lang in 2usize..10,
    ) {
        let cfg = SynthConfig {
            frames: 60,
            community_sizes: [lang, 4, 3, 5],
            tumor_size: [0, tumor_max],
            ..SynthConfig::default()
        };
        let p = patient(&cfg, seed, bilateral);
        check_consistency(&p);
        for t in 0..cfg.frames {
            prop_assert!(p.schedule.language_active(t) != p.schedule.motor_active(t));
        }
    }
}
