use rand::Rng as _;
use reroof::changepoint::{feature_baseline_all, zncc, CategoricalModel, FeatureKind, FeatureThresholds};
use reroof::data::{generate_synthetic, Image, ReroofLabel, SynthConfig};
use reroof::rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn training_labels() -> Vec<ReroofLabel> {
    let mut labels = vec![ReroofLabel::NoReroof; 11];
    for (year, count) in [(2013, 3), (2014, 5), (2015, 9), (2016, 2), (2018, 10)] {
        labels.extend(std::iter::repeat_n(ReroofLabel::ReroofYear(year), count));
    }
    labels
}

#[test]
fn categorical_draw_frequencies_match_fitted_probabilities() {
    let model = CategoricalModel::fit(&training_labels()).unwrap();
    let n = 1_000_000usize;
    let mut rng = rng::seeded(21);
    let mut counts = vec![0usize; model.outcomes.len()];
    for _ in 0..n {
        let d = model.predict(&mut rng);
        counts[model.outcomes.iter().position(|(l, _)| *l == d).unwrap()] += 1;
    }
    let mut chi2 = 0.0;
    for ((label, p), &c) in model.outcomes.iter().zip(&counts) {
        let freq = c as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() <= 3.0 * se, "{label}: {freq} vs {p}");
        let expected = p * n as f64;
        chi2 += (c as f64 - expected).powi(2) / expected;
    }
    let critical = ChiSquared::new((model.outcomes.len() - 1) as f64).unwrap().inverse_cdf(0.99);
    assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
}

#[test]
fn categorical_self_accuracy_matches_sum_of_squares() {
    let model = CategoricalModel::fit(&training_labels()).unwrap();
    let p_none = model.probability(ReroofLabel::NoReroof);
    let analytic = p_none * p_none + (1.0 - p_none) * (1.0 - p_none);
    let trials = 100_000;
    let mut rng = rng::seeded(5);
    let hits = (0..trials)
        .filter(|_| model.predict(&mut rng).is_reroof() == model.predict(&mut rng).is_reroof())
        .count();
    let freq = hits as f64 / trials as f64;
    let se = (analytic * (1.0 - analytic) / trials as f64).sqrt();
    assert!((freq - analytic).abs() <= 3.0 * se, "{freq} vs {analytic}");
}

#[test]
fn independent_noise_images_are_uncorrelated() {
    let mut rng = rng::seeded(17);
    let mut noise = || {
        let data: Vec<f32> = (0..3 * 64 * 64).map(|_| rng.random::<f32>()).collect();
        Image::new(64, 64, data).unwrap()
    };
    let trials = 500;
    let large = (0..trials).filter(|_| zncc(&noise(), &noise()).unwrap().abs() >= 0.05).count();
    assert!(large * 100 <= trials, "{large} of {trials} pairs with |zncc| >= 0.05");
}

#[test]
fn feature_baselines_find_clean_transitions() {
    let cfg = SynthConfig {
        num_buildings: 40,
        ..SynthConfig::default().without_confounders()
    };
    let split = generate_synthetic(&cfg, 12).unwrap();
    for kind in [FeatureKind::Zncc, FeatureKind::Intensity] {
        let thresholds = FeatureThresholds::fit(kind, &split.train).unwrap();
        assert!(thresholds.threshold.is_finite(), "{kind:?}");
        let preds = feature_baseline_all(&split.test, &thresholds).unwrap();
        for (seq, pred) in split.test.iter().zip(&preds) {
            assert_eq!(pred.predicted, seq.label, "{kind:?} on {}", seq.building_id);
        }
    }
}

#[test]
fn fitted_threshold_separates_the_training_classes() {
    let split = generate_synthetic(&SynthConfig { num_buildings: 30, ..SynthConfig::default() }, 3).unwrap();
    let t = FeatureThresholds::fit(FeatureKind::Intensity, &split.train).unwrap();
    assert!(t.scale > 0.0);
    assert_eq!(t.probability(t.threshold), 0.5);
    assert!(t.probability(t.threshold + 10.0 * t.scale) > 0.99);
    assert!(t.probability(t.threshold - 10.0 * t.scale) < 0.01);
}
