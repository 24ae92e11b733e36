use oodconcepts_core::concepts::ConceptMatrix;
use oodconcepts_core::detectors::{CalibratedDetector, DetectorKind, DetectorSpec};
use oodconcepts_core::explain::{shapley_exact, Coalition, CoalitionGame, DetectionCharacteristic, FinetuneData, FinetuneSettings, Target};
use oodconcepts_core::metrics::evaluate_completeness;
use oodconcepts_core::model::{train_head, ConceptModel, HeadTrainConfig, ReconstructionNet};
use oodconcepts_core::tensor::{generate_synthetic, SyntheticSpec};

#[test]
fn characteristic_endpoints_and_efficiency() {
    let spec = SyntheticSpec { classes: 3, channels: 6, patches: 3, per_class: 40, seed: 2, ..SyntheticSpec::default() };
    let bundle = generate_synthetic(&spec).unwrap();
    let (head, _) = train_head(&bundle.id_train, &bundle.id_val, &HeadTrainConfig { epochs: 100, ..HeadTrainConfig::default() }).unwrap();
    let m = 4;
    let model = ConceptModel::new(ConceptMatrix::random(6, m, 4).unwrap(), ReconstructionNet::random(m, 16, 6, 5).unwrap(), head.clone()).unwrap();
    let det = DetectorSpec::fitted(DetectorKind::Energy, None, None, &bundle.id_train).unwrap();
    let cd = CalibratedDetector::calibrate(det.clone(), &head, &bundle.id_val.features).unwrap();
    let reference = evaluate_completeness(&cd, &model, &bundle.id_test, &bundle.ood_test).unwrap();

    let tune = FinetuneData::sample(&det, &model, &bundle.id_train, &bundle.ood_train, 32).unwrap();
    let settings = FinetuneSettings { steps: 3, ..FinetuneSettings::default() };
    let mut ch = DetectionCharacteristic::new(&model, &det, &bundle.id_test.features, &bundle.ood_test, tune, settings).unwrap();
    assert_eq!(ch.auc_canonical(), reference.auc_canonical);

    let mut global = ch.game(Target::Global).unwrap();
    assert_eq!(global.value(Coalition::EMPTY).unwrap(), 0.0);
    assert_eq!(global.value(Coalition::full(m)).unwrap(), reference.eta_det);
    let r = shapley_exact(&mut global).unwrap();
    let total: f64 = r.values.iter().sum();
    assert!((total - (r.nu_full - r.nu_empty)).abs() < 1e-9);
    assert_eq!(ch.evaluated(), (1 << m) - 1);

    for (j, expected) in reference.per_class_det.iter().enumerate() {
        match ch.game(Target::Class(j)) {
            Some(mut g) => {
                assert_eq!(Some(g.value(Coalition::full(m)).unwrap()), *expected);
                let r = shapley_exact(&mut g).unwrap();
                assert!((r.values.iter().sum::<f64>() - r.nu_full).abs() < 1e-9);
            }
            None => assert!(expected.is_none()),
        }
    }
    assert_eq!(ch.evaluated(), (1 << m) - 1, "class games reuse the cached scores");
    assert!(ch.game(Target::Class(3)).is_none());
}
