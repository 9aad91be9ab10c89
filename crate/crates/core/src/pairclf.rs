//! Classifier over concatenated latent means `(μ_earlier, μ_later)` predicting
//! whether two images of one building show different roofs.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSequence, ReroofLabel};
use crate::error::{Error, Result};
use crate::exec;
use crate::numerics::init::{kaiming_uniform, lecun_uniform};
use crate::numerics::{AdamConfig, Checkpoint, Graph, ParamStore, Tensor, Var};
use crate::rng::{self, streams, Rng};
use crate::vae::VaeParams;

pub const MODEL_KIND: &str = "pairclf";

/// Two latent means from one building, earlier year first.
#[derive(Clone, Debug, PartialEq)]
pub struct PairExample {
    pub building_id: String,
    pub year_a: i32,
    pub year_b: i32,
    pub z_a: Vec<f32>,
    pub z_b: Vec<f32>,
    /// `true` when the two images show different roofs.
    pub label: bool,
}

/// Different roofs iff exactly one of the two years precedes the reroof.
pub fn pair_label(year_a: i32, year_b: i32, label: ReroofLabel) -> bool {
    match label {
        ReroofLabel::NoReroof => false,
        ReroofLabel::ReroofYear(t) => (year_a < t) != (year_b < t),
    }
}

/// All `C(n, 2)` pairs of one building given its per-image latent means.
pub fn sequence_pairs(seq: &ImageSequence, mus: &[Vec<f32>]) -> Result<Vec<PairExample>> {
    if mus.len() != seq.years.len() {
        return Err(Error::shape(
            "sequence_pairs",
            format!("{} latent codes", seq.years.len()),
            format!("{}", mus.len()),
        ));
    }
    let mut out = Vec::with_capacity(seq.years.len() * seq.years.len().saturating_sub(1) / 2);
    for i in 0..seq.years.len() {
        for j in i + 1..seq.years.len() {
            out.push(PairExample {
                building_id: seq.building_id.clone(),
                year_a: seq.years[i],
                year_b: seq.years[j],
                z_a: mus[i].clone(),
                z_b: mus[j].clone(),
                label: pair_label(seq.years[i], seq.years[j], seq.label),
            });
        }
    }
    Ok(out)
}

/// Latent means of every image of every sequence, one entry per sequence.
pub fn encode_sequences(sequences: &[ImageSequence], vae: &VaeParams) -> Result<Vec<Vec<Vec<f32>>>> {
    exec::try_map(sequences, |seq| {
        let codes = vae.encode_tensor(&crate::data::Image::batch(&seq.images.iter().collect::<Vec<_>>())?)?;
        Ok::<_, Error>(codes.into_iter().map(|c| c.mu).collect())
    })
}

/// Every within-building pair of every sequence, buildings in input order.
pub fn build_pairs(sequences: &[ImageSequence], vae: &VaeParams) -> Result<Vec<PairExample>> {
    let mus = encode_sequences(sequences, vae)?;
    let mut out = Vec::new();
    for (seq, m) in sequences.iter().zip(&mus) {
        out.extend(sequence_pairs(seq, m)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierArch {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub dropout: f32,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        ClassifierArch {
            input: 2 * crate::vae::LATENT_DIM,
            hidden: vec![128, 64, 16],
            dropout: 0.5,
        }
    }
}

impl ClassifierArch {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || !self.input.is_multiple_of(2) || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig(format!("degenerate classifier architecture {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(1);
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    arch: ClassifierArch,
    store: ParamStore,
}

/// Probabilities are kept strictly inside (0, 1).
const P_MIN: f32 = f32::MIN_POSITIVE;
const P_MAX: f32 = 1.0 - f32::EPSILON / 2.0;

impl ClassifierParams {
    pub fn init(arch: ClassifierArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let widths = arch.widths();
        let last = widths.len() - 2;
        for (i, w) in widths.windows(2).enumerate() {
            let value = if i == last {
                lecun_uniform(rng, &[w[0], w[1]], w[0])
            } else {
                kaiming_uniform(rng, &[w[0], w[1]], w[0])
            };
            store.insert(&format!("clf.fc{i}.w"), value)?;
            store.insert(&format!("clf.fc{i}.b"), Tensor::zeros(&[w[1]]))?;
        }
        Ok(ClassifierParams { arch, store })
    }

    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn layers(&self) -> usize {
        self.arch.hidden.len() + 1
    }

    /// Logits `[N, 1]`. Dropout follows every hidden layer and is active
    /// only in a training graph, drawing from `rng`.
    pub fn forward(&self, g: &mut Graph, x: Var, rng: &mut Rng) -> Result<Var> {
        let mut h = x;
        for i in 0..self.layers() {
            let w = g.param(&self.store, &format!("clf.fc{i}.w"))?;
            let b = g.param(&self.store, &format!("clf.fc{i}.b"))?;
            h = g.dense(h, w, b)?;
            if i + 1 < self.layers() {
                h = g.relu(h);
                h = g.dropout(h, self.arch.dropout, rng)?;
            }
        }
        Ok(h)
    }

    fn check_dims(&self, z_a: &[f32], z_b: &[f32]) -> Result<()> {
        let half = self.arch.input / 2;
        if z_a.len() != half || z_b.len() != half {
            return Err(Error::shape(
                "classify_pair",
                format!("two {half}-d latent vectors"),
                format!("{} and {}", z_a.len(), z_b.len()),
            ));
        }
        Ok(())
    }

    /// Probabilities that each `(earlier, later)` pair shows different roofs
    /// (evaluation mode, no dropout).
    pub fn classify_batch(&self, pairs: &[(&[f32], &[f32])]) -> Result<Vec<f32>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let mut data = Vec::with_capacity(pairs.len() * self.arch.input);
        for (a, b) in pairs {
            self.check_dims(a, b)?;
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        let mut g = Graph::eval();
        let x = g.input(Tensor::new(vec![pairs.len(), self.arch.input], data)?);
        let logits = self.forward(&mut g, x, &mut rng::seeded(0))?;
        let p = g.sigmoid(logits);
        let p = g.value(p);
        p.ensure_finite("pair probability")?;
        Ok(p.data().iter().map(|v| v.clamp(P_MIN, P_MAX)).collect())
    }

    /// Probability that two latent means show different roofs.
    pub fn classify_pair(&self, z_a: &[f32], z_b: &[f32]) -> Result<f32> {
        Ok(self.classify_batch(&[(z_a, z_b)])?[0])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let hidden: Vec<String> = self.arch.hidden.iter().map(usize::to_string).collect();
        Checkpoint::new(self.store.clone())
            .with_meta("model_kind", MODEL_KIND)
            .with_meta("input", self.arch.input)
            .with_meta("hidden", hidden.join(","))
            .with_meta("dropout", self.arch.dropout)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let kind = ckpt.meta("model_kind")?;
        if kind != MODEL_KIND {
            return Err(Error::CheckpointFormat(format!("expected model_kind={MODEL_KIND}, found {kind}")));
        }
        let bad = |k: &str| Error::CheckpointFormat(format!("bad `{k}`"));
        let arch = ClassifierArch {
            input: ckpt.meta("input")?.parse().map_err(|_| bad("input"))?,
            hidden: ckpt
                .meta("hidden")?
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("hidden"))?,
            dropout: ckpt.meta("dropout")?.parse().map_err(|_| bad("dropout"))?,
        };
        let reference = ClassifierParams::init(arch.clone(), &mut rng::seeded(0))?;
        for (name, p) in reference.store.iter() {
            let got = ckpt.store.value(name).map_err(|_| bad(name))?;
            if got.shape() != p.value.shape() {
                return Err(bad(name));
            }
        }
        if ckpt.store.len() != reference.store.len() {
            return Err(Error::CheckpointFormat("unexpected parameters in classifier checkpoint".into()));
        }
        Ok(ClassifierParams { arch, store: ckpt.store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub arch: ClassifierArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub learning_rate: f32,
    /// Upweight the minority class so both classes carry equal total weight.
    pub balance_classes: bool,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            arch: ClassifierArch::default(),
            epochs: 100,
            batch_size: 64,
            patience: 15,
            learning_rate: 1e-3,
            balance_classes: true,
        }
    }
}

/// Epoch 0 evaluates the initial parameters. Losses are weighted binary
/// cross-entropy in evaluation mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpochLog {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: f32,
    pub val_accuracy: f32,
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub params: ClassifierParams,
    pub log: Vec<ClassifierEpochLog>,
    pub best_epoch: usize,
}

/// `epoch,train_loss,val_loss,val_accuracy` rows.
pub fn training_log_csv(log: &[ClassifierEpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for r in log {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_accuracy));
    }
    out
}

/// Per-example weights `(w_negative, w_positive)` giving both classes equal
/// total weight, the majority class keeping weight 1.
pub fn class_weights(pairs: &[PairExample]) -> (f32, f32) {
    let pos = pairs.iter().filter(|p| p.label).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return (1.0, 1.0);
    }
    if pos < neg {
        (1.0, neg as f32 / pos as f32)
    } else {
        (pos as f32 / neg as f32, 1.0)
    }
}

struct Batch {
    x: Tensor,
    targets: Vec<f32>,
    weights: Vec<f32>,
}

fn assemble(pairs: &[&PairExample], input: usize, weights: (f32, f32)) -> Result<Batch> {
    let mut data = Vec::with_capacity(pairs.len() * input);
    for p in pairs {
        if p.z_a.len() + p.z_b.len() != input {
            return Err(Error::shape("pair batch", format!("{input} concatenated features"), format!("{}", p.z_a.len() + p.z_b.len())));
        }
        data.extend_from_slice(&p.z_a);
        data.extend_from_slice(&p.z_b);
    }
    Ok(Batch {
        x: Tensor::new(vec![pairs.len(), input], data)?,
        targets: pairs.iter().map(|p| p.label as u8 as f32).collect(),
        weights: pairs.iter().map(|p| if p.label { weights.1 } else { weights.0 }).collect(),
    })
}

/// Weighted loss and accuracy at threshold 0.5 in evaluation mode.
pub fn evaluate_classifier(params: &ClassifierParams, pairs: &[PairExample], weights: (f32, f32)) -> Result<(f32, f32)> {
    if pairs.is_empty() {
        return Ok((f32::NAN, f32::NAN));
    }
    let refs: Vec<&PairExample> = pairs.iter().collect();
    let b = assemble(&refs, params.arch.input, weights)?;
    let mut g = Graph::eval();
    let x = g.input(b.x);
    let logits = params.forward(&mut g, x, &mut rng::seeded(0))?;
    let loss = g.bce_with_logits(logits, &b.targets, &b.weights)?;
    let correct = g
        .value(logits)
        .data()
        .iter()
        .zip(&b.targets)
        .filter(|(z, t)| (**z > 0.0) == (**t > 0.5))
        .count();
    Ok((g.value(loss).item().expect("scalar"), correct as f32 / pairs.len() as f32))
}

/// Minimizes class-balanced binary cross-entropy with Adam and returns the
/// parameters of the epoch with the lowest validation loss (training loss
/// when `val` is empty).
///
/// Randomness: initialization uses stream `CLF_INIT` of `seed`; shuffling and
/// dropout masks use stream `CLF_TRAIN`.
pub fn train_classifier(
    train: &[PairExample],
    val: &[PairExample],
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<TrainedClassifier> {
    let positives = train.iter().filter(|p| p.label).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::Precondition(format!(
            "classifier training needs both classes; got {positives} different-roof pairs out of {}",
            train.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let adam = AdamConfig::with_learning_rate(cfg.learning_rate)?;
    let mut params = ClassifierParams::init(cfg.arch.clone(), &mut rng::stream(seed, streams::CLF_INIT))?;
    let mut rng = rng::stream(seed, streams::CLF_TRAIN);
    let weights = class_weights(train);
    let val_weights = class_weights(val);

    let record = |params: &ClassifierParams, epoch: usize| -> Result<ClassifierEpochLog> {
        let (train_loss, _) = evaluate_classifier(params, train, weights)?;
        let (val_loss, val_accuracy) = evaluate_classifier(params, val, val_weights)?;
        if !train_loss.is_finite() {
            return Err(Error::Diverged { epoch, term: "classifier loss" });
        }
        Ok(ClassifierEpochLog {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        })
    };
    let score = |r: &ClassifierEpochLog| if val.is_empty() { r.train_loss } else { r.val_loss };

    let first = record(&params, 0)?;
    let mut best = (params.clone(), 0usize, score(&first));
    let mut log = vec![first];
    let mut order: Vec<&PairExample> = train.iter().collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let b = assemble(chunk, params.arch.input, if cfg.balance_classes { weights } else { (1.0, 1.0) })?;
            let mut g = Graph::training();
            let x = g.input(b.x);
            let logits = params.forward(&mut g, x, &mut rng)?;
            let loss = g.bce_with_logits(logits, &b.targets, &b.weights)?;
            params.store.clear_grads();
            g.backward_into(loss, &mut params.store).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, term: "classifier loss" },
                other => other,
            })?;
            params.store.adam_step(&adam)?;
        }
        let r = record(&params, epoch)?;
        let s = score(&r);
        log.push(r);
        if s < best.2 {
            best = (params.clone(), epoch, s);
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    let (mut params, best_epoch, _) = best;
    params.store.clear_grads();
    Ok(TrainedClassifier { params, log, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;

    fn seq(label: ReroofLabel) -> ImageSequence {
        let years: Vec<i32> = (2012..=2018).collect();
        let images = years.iter().map(|_| Image::filled(4, 4, [0.5; 3])).collect();
        ImageSequence::new("b".into(), years, images, label).unwrap()
    }

    fn mus(n: usize) -> Vec<Vec<f32>> {
        (0..n).map(|i| vec![i as f32; 2]).collect()
    }

    #[test]
    fn no_reroof_building_gives_21_same_roof_pairs() {
        let pairs = sequence_pairs(&seq(ReroofLabel::NoReroof), &mus(7)).unwrap();
        assert_eq!(pairs.len(), 21);
        assert!(pairs.iter().all(|p| !p.label && p.year_a < p.year_b));
    }

    #[test]
    fn reroof_in_2015_gives_12_different_roof_pairs() {
        let pairs = sequence_pairs(&seq(ReroofLabel::ReroofYear(2015)), &mus(7)).unwrap();
        assert_eq!(pairs.len(), 21);
        assert_eq!(pairs.iter().filter(|p| p.label).count(), 12);
    }

    fn small_arch() -> ClassifierArch {
        ClassifierArch {
            input: 4,
            hidden: vec![8, 4],
            dropout: 0.5,
        }
    }

    #[test]
    fn zero_output_layer_gives_one_half() {
        let mut p = ClassifierParams::init(small_arch(), &mut rng::seeded(1)).unwrap();
        p.store_mut().value_mut("clf.fc2.w").unwrap().data_mut().fill(0.0);
        assert_eq!(p.classify_pair(&[1.0, -2.0], &[3.0, 0.5]).unwrap(), 0.5);
        assert_eq!(p.classify_pair(&[0.0, 9.0], &[-3.0, 7.0]).unwrap(), 0.5);
    }

    #[test]
    fn eval_mode_is_pure_and_inside_unit_interval() {
        let mut p = ClassifierParams::init(small_arch(), &mut rng::seeded(2)).unwrap();
        let a = p.classify_pair(&[0.3, 0.1], &[-0.2, 0.9]).unwrap();
        assert_eq!(a, p.classify_pair(&[0.3, 0.1], &[-0.2, 0.9]).unwrap());
        p.store_mut().value_mut("clf.fc2.b").unwrap().data_mut()[0] = 500.0;
        let high = p.classify_pair(&[0.3, 0.1], &[-0.2, 0.9]).unwrap();
        assert!(high > 0.0 && high < 1.0);
    }

    #[test]
    fn wrong_dimension_is_rejected() {
        let p = ClassifierParams::init(small_arch(), &mut rng::seeded(2)).unwrap();
        assert!(p.classify_pair(&[0.0; 3], &[0.0; 2]).is_err());
    }

    #[test]
    fn single_class_training_set_is_rejected() {
        let pairs = sequence_pairs(&seq(ReroofLabel::NoReroof), &mus(7)).unwrap();
        let cfg = ClassifierTrainConfig {
            arch: small_arch(),
            ..Default::default()
        };
        assert!(matches!(train_classifier(&pairs, &[], &cfg, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn minority_class_is_upweighted() {
        let pairs = sequence_pairs(&seq(ReroofLabel::ReroofYear(2013)), &mus(7)).unwrap();
        // One image before the reroof: 6 different-roof pairs, 15 same-roof.
        assert_eq!(class_weights(&pairs), (1.0, 2.5));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ClassifierParams::init(small_arch(), &mut rng::seeded(3)).unwrap();
        let back = ClassifierParams::from_checkpoint(Checkpoint::from_bytes(&p.to_checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
