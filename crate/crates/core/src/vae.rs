//! Convolutional β-VAE producing 128-d latent codes for 64×64 RGB roofs.
//!
//! Encoder: four stride-2 convolutions (kernel 4, padding 1) with ReLU, a
//! dense layer to the latent width, three fully connected residual blocks
//! `h + W₂·relu(W₁·h + b₁) + b₂`, and a final dense head emitting μ and
//! log σ² (clamped to [−10, 10]). The decoder mirrors it with a dense layer
//! and four transposed convolutions ending in a sigmoid.
//!
//! The loss is `½‖x − x̂‖² + β·KL(q(z|x) ‖ N(0, I))` per image, averaged over
//! the batch: the negative ELBO under a unit-variance Gaussian likelihood.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentConfig, DatasetSplit, Image};
use crate::error::{Error, Result};
use crate::exec;
use crate::numerics::init::{kaiming_uniform, lecun_uniform};
use crate::numerics::{AdamConfig, Checkpoint, Graph, ParamStore, Tensor, Var};
use crate::rng::{self, streams, Rng};

pub const LATENT_DIM: usize = 128;
pub const LOG_VAR_RANGE: (f32, f32) = (-10.0, 10.0);
pub const MODEL_KIND: &str = "vae";

/// Network shape. The default is the production architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeArch {
    pub image_size: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub latent_dim: usize,
    pub residual_blocks: usize,
}

impl Default for VaeArch {
    fn default() -> Self {
        VaeArch {
            image_size: 64,
            conv_channels: vec![32, 64, 128, 256],
            kernel: 4,
            latent_dim: LATENT_DIM,
            residual_blocks: 3,
        }
    }
}

impl VaeArch {
    pub fn validate(&self) -> Result<()> {
        let n = self.conv_channels.len();
        if n == 0 || self.conv_channels.contains(&0) || self.latent_dim == 0 {
            return Err(Error::InvalidConfig(format!("degenerate VAE architecture {self:?}")));
        }
        // Kernel 4 / stride 2 / padding 1 halves the spatial size exactly.
        if self.kernel != 4 || !self.image_size.is_multiple_of(1 << n) || self.image_size >> n == 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {} must be divisible by 2^{n} with kernel 4",
                self.image_size
            )));
        }
        Ok(())
    }

    fn bottleneck(&self) -> (usize, usize) {
        let c = *self.conv_channels.last().expect("validated");
        let s = self.image_size >> self.conv_channels.len();
        (c, s)
    }

    fn flat(&self) -> usize {
        let (c, s) = self.bottleneck();
        c * s * s
    }
}

/// Posterior parameters for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f32>,
    pub log_var: Vec<f32>,
}

/// Per-image means of the two loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub reconstruction_term: f32,
    pub kl_term: f32,
    pub beta: f32,
}

impl ElboTerms {
    /// Negative ELBO (up to constants): `reconstruction + β·KL`.
    pub fn loss(&self) -> f32 {
        self.reconstruction_term + self.beta * self.kl_term
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams {
    arch: VaeArch,
    store: ParamStore,
}

const STRIDE: usize = 2;
const PAD: usize = 1;

impl VaeParams {
    /// Fresh parameters. Draws come from `rng` in parameter order
    /// (encoder convolutions, dense, residual blocks, head, decoder), each
    /// tensor row-major; biases start at zero.
    pub fn init(arch: VaeArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut s = ParamStore::new();
        let k = arch.kernel;
        let l = arch.latent_dim;
        let mut cin = 3;
        for (i, &c) in arch.conv_channels.iter().enumerate() {
            s.insert(&format!("enc.conv{i}.w"), kaiming_uniform(rng, &[c, cin, k, k], cin * k * k))?;
            s.insert(&format!("enc.conv{i}.b"), Tensor::zeros(&[c]))?;
            cin = c;
        }
        let flat = arch.flat();
        s.insert("enc.fc.w", kaiming_uniform(rng, &[flat, l], flat))?;
        s.insert("enc.fc.b", Tensor::zeros(&[l]))?;
        for j in 0..arch.residual_blocks {
            s.insert(&format!("enc.res{j}.w1"), kaiming_uniform(rng, &[l, l], l))?;
            s.insert(&format!("enc.res{j}.b1"), Tensor::zeros(&[l]))?;
            // Residual branches start small so each block begins near identity.
            let w2 = lecun_uniform(rng, &[l, l], l).map(|v| 0.1 * v);
            s.insert(&format!("enc.res{j}.w2"), w2)?;
            s.insert(&format!("enc.res{j}.b2"), Tensor::zeros(&[l]))?;
        }
        s.insert("enc.head.w", lecun_uniform(rng, &[l, 2 * l], l))?;
        s.insert("enc.head.b", Tensor::zeros(&[2 * l]))?;

        s.insert("dec.fc.w", kaiming_uniform(rng, &[l, flat], l))?;
        s.insert("dec.fc.b", Tensor::zeros(&[flat]))?;
        let mut chans: Vec<usize> = arch.conv_channels.iter().rev().copied().collect();
        chans.push(3);
        for (i, pair) in chans.windows(2).enumerate() {
            let (ci, co) = (pair[0], pair[1]);
            s.insert(&format!("dec.deconv{i}.w"), kaiming_uniform(rng, &[ci, co, k, k], ci * k * k / 4))?;
            s.insert(&format!("dec.deconv{i}.b"), Tensor::zeros(&[co]))?;
        }
        Ok(VaeParams { arch, store: s })
    }

    pub fn arch(&self) -> &VaeArch {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let a = &self.arch;
        let chans: Vec<String> = a.conv_channels.iter().map(usize::to_string).collect();
        Checkpoint::new(self.store.clone())
            .with_meta("model_kind", MODEL_KIND)
            .with_meta("image_size", a.image_size)
            .with_meta("conv_channels", chans.join(","))
            .with_meta("kernel", a.kernel)
            .with_meta("latent_dim", a.latent_dim)
            .with_meta("residual_blocks", a.residual_blocks)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let kind = ckpt.meta("model_kind")?;
        if kind != MODEL_KIND {
            return Err(Error::CheckpointFormat(format!("expected model_kind={MODEL_KIND}, found {kind}")));
        }
        let num = |key: &str| -> Result<usize> {
            ckpt.meta(key)?
                .parse()
                .map_err(|_| Error::CheckpointFormat(format!("bad `{key}`")))
        };
        let conv_channels = ckpt
            .meta("conv_channels")?
            .split(',')
            .map(|c| c.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::CheckpointFormat("bad `conv_channels`".into()))?;
        let arch = VaeArch {
            image_size: num("image_size")?,
            conv_channels,
            kernel: num("kernel")?,
            latent_dim: num("latent_dim")?,
            residual_blocks: num("residual_blocks")?,
        };
        let reference = VaeParams::init(arch.clone(), &mut rng::seeded(0))?;
        check_same_layout(&reference.store, &ckpt.store)?;
        Ok(VaeParams { arch, store: ckpt.store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    fn check_images(&self, images: &Tensor) -> Result<usize> {
        let s = self.arch.image_size;
        match images.shape() {
            &[n, 3, h, w] if h == s && w == s => Ok(n),
            other => Err(Error::shape("vae", format!("[N, 3, {s}, {s}]"), format!("{other:?}"))),
        }
    }

    /// Records the encoder; returns `(μ, log σ²)`, each `[N, latent_dim]`.
    pub fn encoder(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let s = &self.store;
        let l = self.arch.latent_dim;
        let n = g.value(x).shape()[0];
        let mut h = x;
        for i in 0..self.arch.conv_channels.len() {
            let w = g.param(s, &format!("enc.conv{i}.w"))?;
            let b = g.param(s, &format!("enc.conv{i}.b"))?;
            let c = g.conv2d(h, w, b, STRIDE, PAD)?;
            h = g.relu(c);
        }
        let h = g.reshape(h, &[n, self.arch.flat()])?;
        let (w, b) = (g.param(s, "enc.fc.w")?, g.param(s, "enc.fc.b")?);
        let h = g.dense(h, w, b)?;
        let mut h = g.relu(h);
        for j in 0..self.arch.residual_blocks {
            h = residual_block(g, s, &format!("enc.res{j}"), h)?;
        }
        let (w, b) = (g.param(s, "enc.head.w")?, g.param(s, "enc.head.b")?);
        let out = g.dense(h, w, b)?;
        let mu = g.slice_cols(out, 0, l)?;
        let raw_log_var = g.slice_cols(out, l, l)?;
        let log_var = g.clamp(raw_log_var, LOG_VAR_RANGE.0, LOG_VAR_RANGE.1);
        Ok((mu, log_var))
    }

    /// Records the decoder for `z: [N, latent_dim]`; output is `[N, 3, S, S]`
    /// in `(0, 1)`.
    pub fn decoder(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let s = &self.store;
        let n = g.value(z).shape()[0];
        let (c, side) = self.arch.bottleneck();
        let (w, b) = (g.param(s, "dec.fc.w")?, g.param(s, "dec.fc.b")?);
        let h = g.dense(z, w, b)?;
        let h = g.relu(h);
        let mut h = g.reshape(h, &[n, c, side, side])?;
        let layers = self.arch.conv_channels.len();
        for i in 0..layers {
            let w = g.param(s, &format!("dec.deconv{i}.w"))?;
            let b = g.param(s, &format!("dec.deconv{i}.b"))?;
            let y = g.conv_transpose2d(h, w, b, STRIDE, PAD)?;
            h = if i + 1 == layers { g.sigmoid(y) } else { g.relu(y) };
        }
        Ok(h)
    }

    /// Posterior parameters for a `[N, 3, S, S]` batch.
    pub fn encode_tensor(&self, images: &Tensor) -> Result<Vec<LatentCode>> {
        let n = self.check_images(images)?;
        let mut g = Graph::eval();
        let x = g.input(images.clone());
        let (mu, lv) = self.encoder(&mut g, x)?;
        let (mu, lv) = (g.value(mu), g.value(lv));
        mu.ensure_finite("latent mean")?;
        lv.ensure_finite("latent log-variance")?;
        let l = self.arch.latent_dim;
        Ok((0..n)
            .map(|i| LatentCode {
                mu: mu.data()[i * l..(i + 1) * l].to_vec(),
                log_var: lv.data()[i * l..(i + 1) * l].to_vec(),
            })
            .collect())
    }

    /// Deterministic posterior for one image.
    pub fn encode(&self, image: &Image) -> Result<LatentCode> {
        Ok(self.encode_tensor(&image.to_tensor())?.remove(0))
    }

    /// Encodes many images in fixed chunks of [`ENCODE_CHUNK`], in parallel
    /// across chunks when workers are available.
    pub fn encode_all(&self, images: &[&Image]) -> Result<Vec<LatentCode>> {
        let chunks: Vec<&[&Image]> = images.chunks(ENCODE_CHUNK).collect();
        let out = exec::try_map(&chunks, |chunk| self.encode_tensor(&Image::batch(chunk)?))?;
        Ok(out.into_iter().flatten().collect())
    }
}

/// Chunk size used by [`VaeParams::encode_all`].
pub const ENCODE_CHUNK: usize = 16;

fn check_same_layout(reference: &ParamStore, found: &ParamStore) -> Result<()> {
    let names_ref: Vec<&str> = reference.names().collect();
    let names_found: Vec<&str> = found.names().collect();
    if names_ref != names_found {
        return Err(Error::CheckpointFormat(format!(
            "parameter names {names_found:?} do not match the architecture {names_ref:?}"
        )));
    }
    for (name, p) in reference.iter() {
        let got = found.value(name)?.shape();
        if got != p.value.shape() {
            return Err(Error::CheckpointFormat(format!(
                "`{name}` has shape {got:?}, architecture expects {:?}",
                p.value.shape()
            )));
        }
    }
    Ok(())
}

/// `h + W₂·relu(W₁·h + b₁) + b₂` using parameters `<prefix>.{w1,b1,w2,b2}`.
pub fn residual_block(g: &mut Graph, store: &ParamStore, prefix: &str, h: Var) -> Result<Var> {
    let width = g.value(h).shape().get(1).copied().unwrap_or(0);
    let w1 = g.param(store, &format!("{prefix}.w1"))?;
    if g.value(w1).shape() != [width, width] {
        return Err(Error::shape(
            "residual_block",
            format!("[{width}, {width}] weights"),
            format!("{:?}", g.value(w1).shape()),
        ));
    }
    let b1 = g.param(store, &format!("{prefix}.b1"))?;
    let w2 = g.param(store, &format!("{prefix}.w2"))?;
    let b2 = g.param(store, &format!("{prefix}.b2"))?;
    let a = g.dense(h, w1, b1)?;
    let a = g.relu(a);
    let f = g.dense(a, w2, b2)?;
    g.add(h, f)
}

/// `z = μ + exp(½·log σ²) ⊙ ε` with `ε ~ N(0, I)` drawn in dimension order.
///
/// `log σ²` is clamped to [`LOG_VAR_RANGE`] first.
pub fn reparameterize(code: &LatentCode, rng: &mut Rng) -> Vec<f32> {
    code.mu
        .iter()
        .zip(&code.log_var)
        .map(|(&m, &lv)| {
            let eps: f32 = StandardNormal.sample(rng);
            m + (0.5 * lv.clamp(LOG_VAR_RANGE.0, LOG_VAR_RANGE.1)).exp() * eps
        })
        .collect()
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − log σ²)`,
/// accumulated in f64.
pub fn kl_divergence(code: &LatentCode) -> f64 {
    0.5 * code
        .mu
        .iter()
        .zip(&code.log_var)
        .map(|(&m, &lv)| crate::numerics::graph::kl_element(m as f64, lv as f64))
        .sum::<f64>()
}

/// A recorded loss evaluation, ready for [`Graph::backward`].
pub struct ElboEval {
    pub graph: Graph,
    pub loss: Var,
    pub terms: ElboTerms,
}

fn standard_normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Negative ELBO for a `[N, 3, S, S]` batch with the reparameterization noise
/// drawn from `rng` (`[N, latent_dim]`, row-major).
pub fn elbo_loss(params: &VaeParams, images: &Tensor, beta: f32, rng: &mut Rng) -> Result<ElboEval> {
    let n = params.check_images(images)?;
    let eps = standard_normal(rng, &[n, params.arch.latent_dim]);
    elbo_loss_with_noise(params, images, beta, &eps)
}

/// [`elbo_loss`] with explicit noise, for reproducible gradient checks.
pub fn elbo_loss_with_noise(params: &VaeParams, images: &Tensor, beta: f32, eps: &Tensor) -> Result<ElboEval> {
    if !(beta >= 0.0) {
        return Err(Error::Precondition(format!("beta must be non-negative, got {beta}")));
    }
    let n = params.check_images(images)?;
    if eps.shape() != [n, params.arch.latent_dim] {
        return Err(Error::shape(
            "elbo_loss",
            format!("noise [{n}, {}]", params.arch.latent_dim),
            format!("{:?}", eps.shape()),
        ));
    }
    let mut g = Graph::training();
    let x = g.input(images.clone());
    let (mu, log_var) = params.encoder(&mut g, x)?;
    let half = g.scale(log_var, 0.5);
    let std = g.exp(half);
    let e = g.input(eps.clone());
    let noise = g.mul(std, e)?;
    let z = g.add(mu, noise)?;
    let recon = params.decoder(&mut g, z)?;
    let rec = g.half_squared_error(recon, x)?;
    let kl = g.gaussian_kl(mu, log_var)?;
    let terms = ElboTerms {
        reconstruction_term: g.value(rec).item().expect("scalar"),
        kl_term: g.value(kl).item().expect("scalar"),
        beta,
    };
    if !terms.reconstruction_term.is_finite() {
        return Err(Error::NonFinite("reconstruction_term".into()));
    }
    if !terms.kl_term.is_finite() {
        return Err(Error::NonFinite("kl_term".into()));
    }
    let loss = if beta == 0.0 {
        rec
    } else {
        let weighted = g.scale(kl, beta);
        g.add(rec, weighted)?
    };
    Ok(ElboEval { graph: g, loss, terms })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub arch: VaeArch,
    pub epochs: usize,
    pub batch_size: usize,
    /// Batches are split into micro-batches of this size whose gradients are
    /// computed independently (in parallel when workers are available) and
    /// summed in order.
    pub micro_batch: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub learning_rate: f32,
    pub beta: f32,
    /// Photometric augmentation of training images;
    /// [`AugmentConfig::identity`] disables it.
    pub augment: AugmentConfig,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            arch: VaeArch::default(),
            epochs: 200,
            batch_size: 32,
            micro_batch: 8,
            patience: 20,
            learning_rate: 3e-4,
            beta: 1.0,
            augment: AugmentConfig::default(),
        }
    }
}

/// One row of the training log. Epoch 0 evaluates the initial parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeEpochLog {
    pub epoch: usize,
    pub train: ElboTerms,
    pub val: ElboTerms,
}

#[derive(Clone, Debug)]
pub struct TrainedVae {
    pub params: VaeParams,
    pub log: Vec<VaeEpochLog>,
    pub best_epoch: usize,
}

/// `epoch,train_recon,train_kl,val_recon,val_kl` rows.
pub fn training_log_csv(log: &[VaeEpochLog]) -> String {
    let mut out = String::from("epoch,train_recon,train_kl,val_recon,val_kl\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train.reconstruction_term, r.train.kl_term, r.val.reconstruction_term, r.val.kl_term
        ));
    }
    out
}

/// Gradient of the mean loss over `images` (all rows share one update),
/// computed per micro-batch and accumulated in order into `params`.
fn accumulate_batch_grads(
    params: &mut VaeParams,
    images: &[Image],
    eps: &Tensor,
    beta: f32,
    micro: usize,
) -> Result<ElboTerms> {
    let n = images.len();
    let l = params.arch.latent_dim;
    let ranges: Vec<(usize, usize)> = (0..n).step_by(micro).map(|s| (s, (s + micro).min(n))).collect();
    let shared = &*params;
    let parts = exec::try_map(&ranges, |&(s, e)| {
        let refs: Vec<&Image> = images[s..e].iter().collect();
        let x = Image::batch(&refs)?;
        let noise = Tensor::new(vec![e - s, l], eps.data()[s * l..e * l].to_vec())?;
        let eval = elbo_loss_with_noise(shared, &x, beta, &noise)?;
        let grads = eval.graph.backward(eval.loss)?;
        let grads: Vec<(String, Tensor)> = eval
            .graph
            .param_grads(&grads)
            .into_iter()
            .map(|(name, g)| (name.to_string(), g.clone()))
            .collect();
        Ok::<_, Error>((e - s, eval.terms, grads))
    })?;

    params.store.zero_grads();
    let mut terms = ElboTerms {
        beta,
        ..ElboTerms::default()
    };
    for (count, t, grads) in parts {
        let w = count as f32 / n as f32;
        terms.reconstruction_term += w * t.reconstruction_term;
        terms.kl_term += w * t.kl_term;
        for (name, mut g) in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= w);
            params.store.accumulate_grad(&name, &g)?;
        }
    }
    Ok(terms)
}

/// Mean loss terms over `images` without updating anything.
pub fn evaluate_elbo(params: &VaeParams, images: &[&Image], beta: f32, rng: &mut Rng) -> Result<ElboTerms> {
    let l = params.arch.latent_dim;
    let chunks: Vec<(&[&Image], Tensor)> = images
        .chunks(ENCODE_CHUNK)
        .map(|c| (c, standard_normal(rng, &[c.len(), l])))
        .collect();
    let parts = exec::try_map(&chunks, |(c, eps)| {
        let x = Image::batch(c)?;
        Ok::<_, Error>((c.len(), elbo_loss_with_noise(params, &x, beta, eps)?.terms))
    })?;
    let n = images.len().max(1) as f32;
    let mut terms = ElboTerms {
        beta,
        ..ElboTerms::default()
    };
    for (count, t) in parts {
        terms.reconstruction_term += count as f32 / n * t.reconstruction_term;
        terms.kl_term += count as f32 / n * t.kl_term;
    }
    Ok(terms)
}

fn shuffle(order: &mut [usize], rng: &mut Rng) {
    use rand::seq::SliceRandom;
    order.shuffle(rng);
}

/// Trains on every image of the training split and keeps the parameters of
/// the epoch with the lowest validation loss (training loss when the
/// validation split is empty).
///
/// Randomness: initialization uses stream `VAE_INIT` of `seed`; shuffling,
/// augmentation and reparameterization noise use stream `VAE_TRAIN` in that
/// order per batch; validation noise restarts stream `VAE_VALID` every epoch.
pub fn train_vae(split: &DatasetSplit, cfg: &VaeTrainConfig, seed: u64) -> Result<TrainedVae> {
    train_vae_checkpointed(split, cfg, seed, None)
}

/// [`train_vae`] that also writes the best parameters so far to `checkpoint`
/// whenever they improve, so a diverging run leaves the last good model.
pub fn train_vae_checkpointed(
    split: &DatasetSplit,
    cfg: &VaeTrainConfig,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<TrainedVae> {
    let train: Vec<&Image> = split.train.iter().flat_map(|s| &s.images).collect();
    let val: Vec<&Image> = split.validation.iter().flat_map(|s| &s.images).collect();
    if train.is_empty() {
        return Err(Error::Precondition("VAE training needs at least one training image".into()));
    }
    if cfg.batch_size == 0 || cfg.micro_batch == 0 {
        return Err(Error::InvalidConfig("batch sizes must be positive".into()));
    }
    let adam = AdamConfig::with_learning_rate(cfg.learning_rate)?;
    cfg.augment.validate()?;
    let mut params = VaeParams::init(cfg.arch.clone(), &mut rng::stream(seed, streams::VAE_INIT))?;
    let mut rng = rng::stream(seed, streams::VAE_TRAIN);
    let l = cfg.arch.latent_dim;

    let val_terms = |p: &VaeParams| -> Result<Option<ElboTerms>> {
        if val.is_empty() {
            return Ok(None);
        }
        evaluate_elbo(p, &val, cfg.beta, &mut rng::stream(seed, streams::VAE_VALID)).map(Some)
    };

    let initial_train = evaluate_elbo(&params, &train, cfg.beta, &mut rng::stream(seed, streams::VAE_VALID))?;
    let initial_val = val_terms(&params)?;
    let mut log = vec![VaeEpochLog {
        epoch: 0,
        train: initial_train,
        val: initial_val.unwrap_or(initial_train),
    }];
    let mut best_loss = initial_val.unwrap_or(initial_train).loss();
    let mut best = (params.clone(), 0usize);
    if let Some(path) = checkpoint {
        params.save(path)?;
    }

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_terms = ElboTerms {
            beta: cfg.beta,
            ..ElboTerms::default()
        };
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<Image> = batch
                .iter()
                .map(|&i| augment(train[i], &cfg.augment, &mut rng))
                .collect();
            let eps = standard_normal(&mut rng, &[images.len(), l]);
            let terms = accumulate_batch_grads(&mut params, &images, &eps, cfg.beta, cfg.micro_batch)?;
            if !terms.reconstruction_term.is_finite() {
                return Err(Error::Diverged { epoch, term: "reconstruction_term" });
            }
            if !terms.kl_term.is_finite() {
                return Err(Error::Diverged { epoch, term: "kl_term" });
            }
            params.store.adam_step(&adam).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, term: "gradient" },
                other => other,
            })?;
            let w = batch.len() as f32 / train.len() as f32;
            epoch_terms.reconstruction_term += w * terms.reconstruction_term;
            epoch_terms.kl_term += w * terms.kl_term;
        }
        let v = val_terms(&params).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { epoch, term: "validation loss" },
            other => other,
        })?;
        log.push(VaeEpochLog {
            epoch,
            train: epoch_terms,
            val: v.unwrap_or(epoch_terms),
        });
        let score = v.unwrap_or(epoch_terms).loss();
        if score < best_loss {
            best_loss = score;
            best = (params.clone(), epoch);
            if let Some(path) = checkpoint {
                params.save(path)?;
            }
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    let (mut params, best_epoch) = best;
    params.store.clear_grads();
    Ok(TrainedVae {
        params,
        log,
        best_epoch,
    })
}
