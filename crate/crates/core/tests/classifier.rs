use etongue_core::forest::{train_dataset, Dataset};
use etongue_core::pipeline::pack_features;
use etongue_core::{loocv, seeded_rng, train, FeatureVector, Hyperparams, ScenarioPack};
use rand::seq::SliceRandom;
use rand::Rng;
use uuid::Uuid;

#[test]
fn loocv_matches_a_hand_rolled_loop() {
    let vectors: Vec<FeatureVector> = pack_features(&ScenarioPack::builtin("beverages").unwrap(), 3).unwrap();
    let h = Hyperparams {
        n_trees: 30,
        seed: 11,
        ..Hyperparams::default()
    };
    let report = loocv(&vectors, &h).unwrap();
    let data = Dataset::from_vectors(&vectors).unwrap();
    let mut correct = 0;
    for i in 0..vectors.len() {
        let rest: Vec<FeatureVector> = vectors
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, v)| v.clone())
            .collect();
        let model = train(
            &rest,
            &Hyperparams {
                seed: 11 + i as u64,
                ..h
            },
        )
        .unwrap();
        let predicted = model.predict(&vectors[i].values);
        assert_eq!(predicted, report.predictions[i], "fold {i}");
        correct += usize::from(Some(predicted) == vectors[i].label.as_deref());
    }
    assert_eq!(report.folds, data.len());
    assert_eq!(
        report.confusion.accuracy_ratio(),
        (correct as u64, vectors.len() as u64)
    );
}

#[test]
fn shuffled_labels_score_near_chance() {
    let mut vectors = pack_features(&ScenarioPack::builtin("beverages").unwrap(), 8).unwrap();
    let h = Hyperparams {
        n_trees: 50,
        ..Hyperparams::default()
    };
    let mut rng = seeded_rng(77);
    let mut accuracies = Vec::new();
    for _ in 0..8 {
        let mut labels: Vec<Option<String>> = vectors.iter().map(|v| v.label.clone()).collect();
        labels.shuffle(&mut rng);
        for (v, l) in vectors.iter_mut().zip(labels) {
            v.label = l;
        }
        accuracies.push(loocv(&vectors, &h).unwrap().accuracy);
    }
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    assert!(
        (mean - 1.0 / 3.0).abs() <= 0.15,
        "mean {mean}, runs {accuracies:?}"
    );
}

/// Resubstitution accuracy of a single full-feature tree never drops as it
/// is allowed to grow deeper.
#[test]
fn deeper_trees_fit_at_least_as_well() {
    for seed in 0..10 {
        let mut rng = seeded_rng(seed);
        let vectors: Vec<FeatureVector> = (0..60)
            .map(|i| FeatureVector {
                record_id: Uuid::from_u128(i + 1),
                label: Some(["a", "b", "c"][rng.random_range(0..3)].to_string()),
                n_sample_frames: 5,
                values: (0..5).map(|_| f64::from(rng.random_range(0..6u8))).collect(),
            })
            .collect();
        let data = Dataset::from_vectors(&vectors).unwrap();
        let mut previous = 0;
        for depth in 1..=8 {
            let h = Hyperparams {
                n_trees: 1,
                max_depth: Some(depth),
                bootstrap: false,
                features_per_split: Some(5),
                seed,
                ..Hyperparams::default()
            };
            let model = train_dataset(&data, &h).unwrap();
            let fit = (0..data.len())
                .filter(|&i| model.predict(data.row(i)) == data.classes[data.y[i]])
                .count();
            assert!(fit >= previous, "seed {seed} depth {depth}: {fit} < {previous}");
            previous = fit;
        }
    }
}
