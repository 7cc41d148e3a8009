use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vistree::env::{render, CartPoleState, RenderConfig, THETA_LIMIT, X_LIMIT};
use vistree::features::dataset::{build_dataset, DatasetConfig, FeatureDataset, Split};
use vistree::features::surrogate::{evaluate_surrogate, train_surrogate, Surrogate, SurrogateHyper};
use vistree::features::{compose_temporal, extract_single, FeatureSpec, ReferenceExtractor};
use vistree::segment::ColorPalette;

fn extractor() -> ReferenceExtractor {
    ReferenceExtractor::new(&FeatureSpec::cart_pole(), ColorPalette::default()).unwrap()
}

#[test]
fn extracted_values_follow_the_state() {
    let cfg = RenderConfig::default();
    let spec = FeatureSpec::cart_pole();
    let ex = extractor();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..300 {
        let s = CartPoleState {
            x: rng.gen_range(-X_LIMIT..X_LIMIT),
            theta: rng.gen_range(-THETA_LIMIT..THETA_LIMIT),
            ..CartPoleState::zero()
        };
        let v = extract_single(&render(&s, &cfg), &ex).unwrap();
        let pos = v[0].unwrap();
        assert!((pos - cfg.cart_center(s.x) / cfg.width as f64).abs() <= 1.0 / cfg.width as f64);
        let angle = spec.features[2].denormalize(v[1].unwrap());
        assert!((angle - s.theta).abs() < 0.05, "{angle} vs {}", s.theta);
    }
}

#[test]
fn temporal_values_by_hand() {
    let spec = FeatureSpec::cart_pole();
    // cart moves right by 0.005 (half its range), pole angle steps by -0.05 (bottom of its range)
    let v = compose_temporal(&spec, &[Some(0.40), Some(0.55)], &[Some(0.405), Some(0.50)]).unwrap();
    let expect = [0.405, 0.75, 0.50, 0.0];
    for (a, b) in v.values.iter().zip(expect) {
        assert!((a.unwrap() - b).abs() < 1e-9, "{:?}", v.values);
    }
    // out-of-range differences clip
    let v = compose_temporal(&spec, &[Some(0.0), Some(0.5)], &[Some(1.0), Some(0.5)]).unwrap();
    assert_eq!(v.values[1], Some(1.0));
    assert_eq!(v.to_input()[3], 0.5);
    let v = compose_temporal(&spec, &[Some(0.5), None], &[Some(0.5), Some(0.5)]).unwrap();
    assert_eq!(v.values[3], None);
    assert_eq!(v.to_input()[3], 0.5);
    assert!(compose_temporal(&spec, &[Some(0.5)], &[Some(0.5), Some(0.5)]).is_err());
}

#[test]
fn dataset_splits_are_deterministic() {
    let spec = FeatureSpec::cart_pole();
    let a = build_dataset(&DatasetConfig::new(300, 4), &spec, &mut extractor(), None).unwrap();
    let b = build_dataset(&DatasetConfig::new(300, 4), &spec, &mut extractor(), None).unwrap();
    assert_eq!(a, b);
    let m = a.manifest(4);
    assert_eq!((m.train, m.val, m.test), (210, 60, 30));
    let c = build_dataset(&DatasetConfig::new(300, 5), &spec, &mut extractor(), None).unwrap();
    assert_ne!(a.indices(Split::Test), c.indices(Split::Test));
    assert!(build_dataset(&DatasetConfig::new(50, 0), &spec, &mut extractor(), None).is_err());
}

#[test]
fn dataset_and_surrogate_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FeatureSpec::cart_pole();
    let ds = build_dataset(&DatasetConfig::new(200, 2), &spec, &mut extractor(), Some(dir.path())).unwrap();
    let back = FeatureDataset::load(dir.path()).unwrap();
    assert_eq!(back, ds);

    let hyper = SurrogateHyper { hidden: vec![16], max_epochs: 3, ..SurrogateHyper::default() };
    let mut epochs = 0;
    let model = train_surrogate(&ds, &hyper, |_| epochs += 1).unwrap();
    assert!((1..=3).contains(&epochs));
    let path = dir.path().join("surrogate.json");
    model.save(&path).unwrap();
    let loaded = Surrogate::load(&path).unwrap();
    assert_eq!(loaded, model);

    let frames: Vec<_> = (0..5)
        .map(|i| vistree::segment::Image::load(&dir.path().join(&ds.samples[i].frame)).unwrap())
        .collect();
    let refs: Vec<_> = frames.iter().collect();
    let batch = loaded.predict_batch(&refs).unwrap();
    for (i, f) in refs.iter().enumerate() {
        assert_eq!(loaded.predict_batch(&[f]).unwrap()[0], batch[i]);
        assert!(batch[i].iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let table = evaluate_surrogate(&loaded, &ds, Split::Test).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[0].n, 20);
}

proptest! {
    #[test]
    fn normalize_round_trips_inside_range(v in 0.0f64..=1.0) {
        for f in &FeatureSpec::cart_pole().features {
            prop_assert!((f.normalize(f.denormalize(v)) - v).abs() <= 1e-12);
        }
    }
}
