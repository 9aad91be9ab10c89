use reroof::data::{generate_synthetic, AugmentConfig, DatasetSplit, Image, SynthConfig};
use reroof::rng;
use reroof::vae::{
    evaluate_elbo, reparameterize, train_vae, train_vae_checkpointed, LatentCode, VaeArch, VaeParams, VaeTrainConfig,
};

fn synthetic(n: usize, seed: u64) -> DatasetSplit {
    let cfg = SynthConfig {
        num_buildings: n,
        validation_fraction: 0.0,
        test_fraction: 0.0,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg, seed).unwrap()
}

fn pixels(images: &[&Image]) -> f32 {
    (images.len() * images[0].data().len()) as f32
}

#[test]
fn reparameterized_draws_match_posterior_moments() {
    let code = LatentCode {
        mu: vec![0.5, -1.0, 0.0],
        log_var: vec![0.0, 4f32.ln(), -2.0],
    };
    let n = 100_000;
    let mut rng = rng::seeded(11);
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    for _ in 0..n {
        for (d, z) in reparameterize(&code, &mut rng).into_iter().enumerate() {
            sum[d] += z as f64;
            sq[d] += (z as f64).powi(2);
        }
    }
    for d in 0..3 {
        let var = (code.log_var[d] as f64).exp();
        let mean = sum[d] / n as f64;
        let sample_var = sq[d] / n as f64 - mean * mean;
        let mean_se = (var / n as f64).sqrt();
        let var_se = (2.0 * var * var / n as f64).sqrt();
        assert!((mean - code.mu[d] as f64).abs() < 4.0 * mean_se, "dim {d}: mean {mean}");
        assert!((sample_var - var).abs() < 4.0 * var_se, "dim {d}: var {sample_var} vs {var}");
    }
}

#[test]
fn validation_loss_improves_over_thirty_epochs() {
    let data = synthetic(7, 5);
    let train: DatasetSplit = DatasetSplit {
        train: data.train[..5].to_vec(),
        validation: data.train[5..].to_vec(),
        test: Vec::new(),
    };
    // 35 training images plus 14 held out.
    let cfg = VaeTrainConfig {
        epochs: 30,
        batch_size: 8,
        ..VaeTrainConfig::default()
    };
    let trained = train_vae(&train, &cfg, 3).unwrap();
    let first = trained.log[0].val.loss();
    let best = trained.log[trained.best_epoch].val.loss();
    assert!(trained.best_epoch > 0);
    assert!(best < 0.5 * first, "best {best} vs initial {first}");
    let last = trained.log.last().unwrap();
    assert!(last.train.loss() < trained.log[1].train.loss());
}

#[test]
fn beta_zero_overfits_a_handful_of_images() {
    let data = synthetic(1, 9);
    let images: Vec<Image> = data.train[0].images[..5].to_vec();
    let mut seq = data.train[0].clone();
    seq.images = images.clone();
    seq.years.truncate(5);
    seq.label = reroof::data::ReroofLabel::NoReroof;
    let split = DatasetSplit {
        train: vec![seq],
        ..DatasetSplit::default()
    };
    let cfg = VaeTrainConfig {
        epochs: 150,
        batch_size: 5,
        micro_batch: 5,
        patience: 150,
        learning_rate: 1e-3,
        beta: 0.0,
        augment: AugmentConfig::identity(),
        ..VaeTrainConfig::default()
    };
    let trained = train_vae(&split, &cfg, 4).unwrap();
    let refs: Vec<&Image> = images.iter().collect();
    let recon = evaluate_elbo(&trained.params, &refs, 0.0, &mut rng::seeded(0)).unwrap().reconstruction_term;
    // The reconstruction term is half the summed squared error per image.
    let mse = 2.0 * recon * refs.len() as f32 / pixels(&refs);
    assert!(mse < 0.01, "per-pixel MSE {mse}");
    // Coarse monotonicity: mean training loss per block of 50 epochs.
    let curve: Vec<f32> = trained.log.iter().map(|r| r.train.reconstruction_term).collect();
    let blocks: Vec<f32> = curve[1..].chunks(50).map(|c| c.iter().sum::<f32>() / c.len() as f32).collect();
    assert!(blocks.windows(2).all(|w| w[1] < w[0]), "{blocks:?}");
}

#[test]
fn checkpointed_training_leaves_best_parameters_on_disk() {
    let cfg = SynthConfig {
        num_buildings: 4,
        image_size: 16,
        validation_fraction: 0.25,
        test_fraction: 0.0,
        ..SynthConfig::default()
    };
    let split = generate_synthetic(&cfg, 2).unwrap();
    let train_cfg = VaeTrainConfig {
        arch: VaeArch {
            image_size: 16,
            conv_channels: vec![4, 8],
            latent_dim: 6,
            residual_blocks: 1,
            ..VaeArch::default()
        },
        epochs: 4,
        batch_size: 7,
        ..VaeTrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vae.ckpt");
    let trained = train_vae_checkpointed(&split, &train_cfg, 8, Some(&path)).unwrap();
    let saved = VaeParams::load(&path).unwrap();
    assert_eq!(saved.to_checkpoint().to_bytes().unwrap(), trained.params.to_checkpoint().to_bytes().unwrap());
    // Same seed, same result.
    let again = train_vae(&split, &train_cfg, 8).unwrap();
    assert_eq!(again.log, trained.log);
}

#[test]
fn initialization_depends_only_on_the_rng() {
    let arch = VaeArch {
        image_size: 16,
        conv_channels: vec![4, 8],
        latent_dim: 6,
        residual_blocks: 1,
        ..VaeArch::default()
    };
    let a = VaeParams::init(arch.clone(), &mut rng::seeded(1)).unwrap();
    let b = VaeParams::init(arch.clone(), &mut rng::seeded(1)).unwrap();
    let c = VaeParams::init(arch, &mut rng::seeded(2)).unwrap();
    assert_eq!(a.store(), b.store());
    assert_ne!(a.store(), c.store());
}
