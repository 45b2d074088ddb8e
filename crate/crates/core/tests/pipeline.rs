use ndarray::Array2;
use proptest::prelude::*;

use croft_core::eval::{self, ClosedPopulation, Detector};
use croft_core::features::{read_feature_set, write_feature_set, FeatureSet, Role, OPEN_SET_LABEL};
use croft_core::trainer::{self, load_checkpoint, save_checkpoint, Mode, TrainConfig};
use croft_core::{AdapterParams, SynthConfig};

fn feature_set_strategy() -> impl Strategy<Value = FeatureSet> {
    (
        1usize..6,
        1usize..12,
        2usize..5,
        prop_oneof![Just(Role::ClosedId), Just(Role::ClosedOod), Just(Role::OpenOod)],
    )
        .prop_flat_map(|(d, n, k, role)| {
            let label = if role == Role::OpenOod {
                Just(OPEN_SET_LABEL).boxed()
            } else {
                (0..k as i32).boxed()
            };
            (
                prop::collection::vec(-1e3f32..1e3, n * d),
                prop::collection::vec(-1e3f32..1e3, k * d),
                prop::collection::vec(label, n),
                prop::collection::vec(0u32..3, n),
                Just((d, n, k, role)),
            )
        })
        .prop_map(|(img, txt, labels, domains, (d, n, k, role))| {
            let image = Array2::from_shape_vec((n, d), img.into_iter().map(f64::from).collect()).unwrap();
            let text = Array2::from_shape_vec((k, d), txt.into_iter().map(f64::from).collect()).unwrap();
            let names = (0..k).map(|c| format!("class {c}")).collect();
            FeatureSet::new(image, text, labels, domains, role, names)
                .unwrap()
                .with_domain_names(vec!["a".into(), "b".into(), "c".into()])
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cft1_round_trip_is_byte_identical(fs in feature_set_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        write_feature_set(&fs, &a).unwrap();
        let back = read_feature_set(&a).unwrap();
        prop_assert_eq!(&back, &fs);
        write_feature_set(&back, &b).unwrap();
        for ext in ["cft1", "json"] {
            prop_assert_eq!(
                std::fs::read(a.with_extension(ext)).unwrap(),
                std::fs::read(b.with_extension(ext)).unwrap()
            );
        }
    }
}

fn small_bench() -> croft_core::Benchmark {
    croft_core::synth::generate_benchmark(&SynthConfig {
        samples_per_class: 8,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn stable_config() -> TrainConfig {
    TrainConfig {
        temperature: 10.0,
        lambda1: 1.0,
        lambda2: 10.0,
        lambda_sim: 1.0,
        max_epochs: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn identity_adapters_reproduce_zero_shot() {
    let bench = small_bench();
    let id = bench.id();
    let tau = 2.5;
    let params = AdapterParams::identity(id.d(), tau);
    let energy = eval::energy_detector(id.image_features.view(), id.text_features.view(), &params).unwrap();
    let raw = id.image_features.dot(&id.text_features.t());
    let mut correct = 0;
    for (i, row) in raw.rows().into_iter().enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = tau * m + row.iter().map(|v| (tau * (v - m)).exp()).sum::<f64>().ln();
        assert!((energy[i] + lse).abs() < 1e-10);
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
        correct += usize::from(best as i32 == id.labels[i]);
    }
    let labels = id.class_labels().unwrap();
    let acc = eval::classify_accuracy(id.image_features.view(), id.text_features.view(), &labels, &params).unwrap();
    assert!((acc - correct as f64 / id.n() as f64).abs() < 1e-10);
}

#[test]
fn checkpoint_and_report_are_deterministic() {
    let bench = small_bench();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let ck = trainer::train(bench.id(), &stable_config()).unwrap();
        let base = dir.path().join(name);
        save_checkpoint(&ck, &base).unwrap();
        let shifted = bench.shifted().expect("shifted domains");
        let r = eval::evaluate(
            &ck.params,
            bench.id(),
            shifted.as_ref(),
            Some(&bench.open),
            Detector::Energy,
            ClosedPopulation::Id,
        )
        .unwrap();
        (base, serde_json::to_string(&r).unwrap())
    };
    let (a, ra) = run("a");
    let (b, rb) = run("b");
    assert_eq!(ra, rb);
    for ext in ["bin", "json"] {
        assert_eq!(
            std::fs::read(a.with_extension(ext)).unwrap(),
            std::fs::read(b.with_extension(ext)).unwrap()
        );
    }
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(
        loaded.params,
        trainer::train(bench.id(), &stable_config()).unwrap().params
    );
}

#[test]
fn croft_training_lowers_total_loss() {
    let bench = croft_core::synth::generate_benchmark(&SynthConfig::default()).unwrap();
    let cfg = TrainConfig {
        max_epochs: 6,
        ..stable_config()
    };
    let ck = trainer::train(bench.id(), &cfg).unwrap();
    let first = ck.epoch_mean_total(0).unwrap();
    let fifth = ck.epoch_mean_total(5).unwrap();
    assert!(fifth < first, "epoch 5 {fifth} vs epoch 0 {first}");
}

#[test]
fn lodo_identical_domains_match_direct_evaluation() {
    let bench = small_bench();
    let d0 = bench.id();
    let mut d1 = d0.clone();
    d1.domain_ids.fill(1);
    let cfg = TrainConfig {
        mode: Mode::CeOnly,
        ..stable_config()
    };
    let report = eval::lodo_evaluate(
        &[d0.clone(), d1],
        std::slice::from_ref(&bench.open),
        &cfg,
        Detector::Energy,
    )
    .unwrap();
    assert_eq!(report.per_domain.len(), 2);
    let ck = trainer::train(d0, &cfg).unwrap();
    let direct = eval::evaluate(
        &ck.params,
        d0,
        None,
        Some(&bench.open),
        Detector::Energy,
        ClosedPopulation::Id,
    )
    .unwrap();
    let a = &report.per_domain[0];
    let b = &report.per_domain[1];
    assert!((a.id_acc.unwrap() - b.id_acc.unwrap()).abs() < 1e-9);
    assert!((a.auroc.unwrap() - b.auroc.unwrap()).abs() < 1e-9);
    assert!((a.auroc.unwrap() - direct.auroc.unwrap()).abs() < 1e-9);
}

#[test]
fn lodo_three_domains_and_no_open_set() {
    let bench = small_bench();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..stable_config()
    };
    let report = eval::lodo_evaluate(
        &bench.domains,
        std::slice::from_ref(&bench.open),
        &cfg,
        Detector::Knn { k: 1 },
    )
    .unwrap();
    assert_eq!(report.per_domain.len(), 3);
    let mean = report.per_domain.iter().map(|r| r.auroc.unwrap()).sum::<f64>() / 3.0;
    assert!((report.average.auroc.unwrap() - mean).abs() < 1e-12);
    let report = eval::lodo_evaluate(&bench.domains, &[], &cfg, Detector::Energy).unwrap();
    assert!(report.average.auroc.is_none());
    assert!(report.average.id_acc.is_some());
}
