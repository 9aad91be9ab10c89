use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use reroof::pairclf::{
    evaluate_classifier, train_classifier, training_log_csv, ClassifierArch, ClassifierTrainConfig, PairExample,
};
use reroof::rng::{self, Rng};

const DIM: usize = 8;

fn gaussian(rng: &mut Rng, scale: f32) -> Vec<f32> {
    (0..DIM).map(|_| scale * <StandardNormal as Distribution<f32>>::sample(&StandardNormal, rng)).collect()
}

fn pair(label: bool, z_a: Vec<f32>, z_b: Vec<f32>) -> PairExample {
    PairExample {
        building_id: "b".into(),
        year_a: 2012,
        year_b: 2013,
        z_a,
        z_b,
        label,
    }
}

/// Two roofs per "building": same-roof pairs are the same latent plus small
/// noise, different-roof pairs sit on opposite sides of the origin along the
/// first axis.
fn separable(n: usize, seed: u64) -> Vec<PairExample> {
    let mut rng = rng::seeded(seed);
    (0..n)
        .map(|i| {
            let label = i % 3 == 0;
            let mut z_a = gaussian(&mut rng, 0.3);
            z_a[0] = 2.0 + z_a[0].abs();
            let mut z_b: Vec<f32> = z_a.iter().zip(gaussian(&mut rng, 0.1)).map(|(a, e)| a + e).collect();
            if label {
                z_b[0] = -z_b[0];
            }
            if rng.random::<bool>() {
                pair(label, z_b, z_a)
            } else {
                pair(label, z_a, z_b)
            }
        })
        .collect()
}

fn config(epochs: usize) -> ClassifierTrainConfig {
    ClassifierTrainConfig {
        arch: ClassifierArch {
            input: 2 * DIM,
            hidden: vec![32, 16],
            dropout: 0.1,
        },
        epochs,
        batch_size: 32,
        patience: epochs,
        learning_rate: 3e-3,
        balance_classes: true,
    }
}

#[test]
fn identical_inputs_plateau_at_ln_two() {
    // With uninformative inputs the balanced optimum is p = 1/2 everywhere.
    let mut rng = rng::seeded(4);
    let train: Vec<PairExample> = (0..200).map(|_| pair(rng.random::<bool>(), vec![0.0; DIM], vec![0.0; DIM])).collect();
    let trained = train_classifier(&train, &[], &config(40), 1).unwrap();
    let best = trained.log[trained.best_epoch].train_loss;
    assert!((best - std::f32::consts::LN_2).abs() < 0.01, "loss {best}");
    let p = trained.params.classify_pair(&[0.0; DIM], &[0.0; DIM]).unwrap();
    assert!((p - 0.5).abs() < 0.05, "p = {p}");
}

#[test]
fn separable_pairs_are_learned_and_generalize() {
    let train = separable(600, 1);
    let val = separable(150, 2);
    let held_out = separable(300, 3);
    let trained = train_classifier(&train, &val, &config(40), 5).unwrap();
    let (_, val_acc) = evaluate_classifier(&trained.params, &val, (1.0, 1.0)).unwrap();
    let (_, held_acc) = evaluate_classifier(&trained.params, &held_out, (1.0, 1.0)).unwrap();
    assert!(val_acc >= 0.99, "validation accuracy {val_acc}");
    assert!(held_acc >= 0.95, "held-out accuracy {held_acc}");
}

#[test]
fn first_epoch_does_not_increase_training_loss() {
    let train = separable(300, 7);
    let trained = train_classifier(&train, &[], &config(1), 9).unwrap();
    assert_eq!(trained.log.len(), 2);
    assert!(trained.log[1].train_loss <= trained.log[0].train_loss, "{:?}", trained.log);
}

#[test]
fn same_seed_gives_same_classifier() {
    let train = separable(120, 3);
    let a = train_classifier(&train, &[], &config(3), 2).unwrap();
    let b = train_classifier(&train, &[], &config(3), 2).unwrap();
    // Logs hold NaN for the empty validation set, so compare their text.
    assert_eq!(training_log_csv(&a.log), training_log_csv(&b.log));
    assert_eq!(a.params.to_checkpoint().to_bytes().unwrap(), b.params.to_checkpoint().to_bytes().unwrap());
}
