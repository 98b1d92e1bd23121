use fscil::data::{
    generate_synthetic, split_sessions, SessionDataset, SplitConfig, SyntheticConfig,
};
use fscil::losses::{evaluate_objective, Objective, TrainingItem};
use fscil::metrics::{evaluate, summarize};
use fscil::model::{MlpExtractor, Network};
use fscil::protocol::{
    incremental_update, run_experiment, run_from_base, sweep_hyperparams, train_base,
    train_base_ce, Strategy, TrainConfig,
};

fn sessions(seed: u64, n_sessions: usize) -> Vec<SessionDataset> {
    let data = generate_synthetic(&SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap();
    split_sessions(
        &data,
        &SplitConfig {
            seed,
            n_sessions,
            ..SplitConfig::default()
        },
    )
    .unwrap()
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        incremental_epochs: 20,
        ..TrainConfig::default()
    }
}

#[test]
fn two_separated_blobs_are_learned() {
    let data = generate_synthetic(&SyntheticConfig {
        input_dim: 2,
        n_classes: 2,
        train_per_class: 50,
        test_per_class: 10,
        separation: 8.0,
        within_std: 1.0,
        seed: 3,
    })
    .unwrap();
    let split = SplitConfig {
        base_classes: 2,
        n_sessions: 0,
        ..SplitConfig::default()
    };
    let s = split_sessions(&data, &split).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        feature_dim: 2,
        ..TrainConfig::default()
    };
    let state = train_base(&cfg, &s[0]).unwrap();
    let report = evaluate(&state, 0, &s[0].train).unwrap();
    assert!(
        report.acc_overall >= 0.99,
        "train accuracy {}",
        report.acc_overall
    );
}

#[test]
fn no_incremental_sessions_gives_one_report() {
    let s = sessions(0, 0);
    let reports = run_experiment(&quick_cfg(), &s).unwrap();
    assert_eq!(reports.len(), 1);
    let summary = summarize(&reports).unwrap();
    assert_eq!(summary.new, None);
    assert_eq!(summary.harmonic, None);
}

#[test]
fn spl_with_identity_perturbation_doubles_cross_entropy() {
    let s = sessions(1, 1);
    let cfg = TrainConfig {
        alpha: 0.0,
        incremental_epochs: 1,
        ..quick_cfg()
    };
    let base = train_base(&cfg, &s[0]).unwrap();
    let proto = incremental_update(&base, &s[1], &cfg, Strategy::Prototype).unwrap();
    let spl = incremental_update(&base, &s[1], &cfg, Strategy::Spl).unwrap();
    let first = spl.session_log.iter().find(|l| l.session == 1).unwrap();

    let d = proto.classifier.dim();
    let net = Network {
        extractor: MlpExtractor::identity(d),
        classifier: proto.classifier.clone(),
        head: None,
    };
    let items: Vec<TrainingItem> = s[1]
        .train
        .iter()
        .map(|x| TrainingItem {
            input: proto.extractor.extract_features(&x.input).unwrap(),
            label_index: proto.classifier.index_of(x.label).unwrap(),
            prior_mean: None,
        })
        .collect();
    let ce = evaluate_objective(&net, Objective::CrossEntropy, &items, None).unwrap();
    assert!(
        (first.loss - 2.0 * ce.value).abs() < 1e-12,
        "{} vs {}",
        first.loss,
        ce.value
    );
}

#[test]
fn finetune_cross_entropy_decreases() {
    let s = sessions(2, 1);
    let cfg = TrainConfig {
        incremental_epochs: 50,
        ..quick_cfg()
    };
    let base = train_base(&cfg, &s[0]).unwrap();
    let next = incremental_update(&base, &s[1], &cfg, Strategy::FinetuneCe).unwrap();
    let trace: Vec<f64> = next
        .session_log
        .iter()
        .filter(|l| l.session == 1)
        .map(|l| l.loss)
        .collect();
    assert_eq!(trace.len(), 50);
    assert!(trace.windows(2).all(|w| w[1] < w[0]), "{trace:?}");
}

#[test]
fn sweep_origin_matches_cross_entropy_baseline() {
    let s = sessions(4, 2);
    let cfg = TrainConfig {
        strategy: Strategy::Prototype,
        ..quick_cfg()
    };
    let grid = sweep_hyperparams(&cfg, &s, &[0.0], &[0.0]).unwrap();
    let base = train_base_ce(&cfg, &s[0]).unwrap();
    let (reports, _) = run_from_base(&base, &s, &cfg, Strategy::Prototype).unwrap();
    assert_eq!(
        grid.final_acc,
        vec![vec![reports.last().unwrap().acc_overall]]
    );

    let single = run_experiment(
        &TrainConfig {
            gamma: 0.0,
            alpha: 0.0,
            ..cfg
        },
        &s,
    )
    .unwrap();
    assert_eq!(grid.final_acc[0][0], single.last().unwrap().acc_overall);
}

#[test]
fn evaluation_ignores_sample_order() {
    let s = sessions(5, 1);
    let cfg = quick_cfg();
    let base = train_base(&cfg, &s[0]).unwrap();
    let state = incremental_update(&base, &s[1], &cfg, Strategy::Prototype).unwrap();
    let mut test: Vec<_> = s.iter().flat_map(|x| x.test.clone()).collect();
    let a = evaluate(&state, 1, &test).unwrap();
    test.reverse();
    let b = evaluate(&state, 1, &test).unwrap();
    assert_eq!(a, b);
    let weighted: f64 = a
        .per_class_acc
        .iter()
        .map(|(c, acc)| acc * test.iter().filter(|x| x.label == *c).count() as f64)
        .sum::<f64>()
        / test.len() as f64;
    assert!((weighted - a.acc_overall).abs() < 1e-9);

    let mut unknown = test.clone();
    unknown[0].label = 999;
    assert!(evaluate(&state, 1, &unknown).is_err());
}
