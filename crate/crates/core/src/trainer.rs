//! Two-stage training: matching-loss pretraining of the encoders, then
//! adversarial training of the generator/discriminator with the encoders
//! and the perceptual module frozen. Plus checkpoint-backed state assembly
//! and evaluation.
//!
//! All training-time randomness (batch order, flips) is a pure function of
//! `(seed, epoch)`, so a fixed seed reproduces the loss trajectory exactly
//! and an epoch-boundary resume continues identically.

use crate::checkpoint::{config_hash, Checkpoint, CheckpointMeta, OptimState};
use crate::data::{batch_order, epoch_rng, prepare_pair, DatasetManifest};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::encoders::{
    Caption, ImageEncoder, ImageEncoderConfig, TextEncoder, TextEncoderConfig, TextFeatures,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::image::ImageTensor;
use crate::jpeg::{QualityFactor, Subsampling};
use crate::losses::{
    contrastive_loss_var, damsm_loss_var, gan_d_loss_var, gan_g_loss_var,
    reconstruction_loss_var, total_loss, total_loss_var, DamsmGammas, ImageFeatureVars,
    LossReport, LossWeights, TextFeatureVars,
};
use crate::metrics::{psnr, PerceptualConfig, PerceptualExtractor};
use crate::nn::graph::{Graph, Var};
use crate::nn::{Adam, ParamStore};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Parameter-leaf tags distinguishing the stores on a shared graph.
pub const TAG_GENERATOR: u32 = 1;
pub const TAG_DISCRIMINATOR: u32 = 2;
pub const TAG_TEXT_ENCODER: u32 = 3;
pub const TAG_IMAGE_ENCODER: u32 = 4;
pub const TAG_PERCEPTUAL: u32 = 5;

/// Training stage selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Damsm,
    Adversarial,
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "damsm" => Ok(Stage::Damsm),
            "adv" | "adversarial" => Ok(Stage::Adversarial),
            other => Err(Error::domain(format!(
                "stage must be `damsm` or `adv`, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub qf: u8,
    pub subsampling: Subsampling,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Learning rate is multiplied by `lr_decay_factor` every
    /// `lr_decay_every` epochs until it reaches `lr_end`.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub seed: u64,
    pub image_size: usize,
    pub max_caption_len: usize,
    pub weights: LossWeights,
    pub gammas: DamsmGammas,
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            qf: 5,
            subsampling: Subsampling::S420,
            batch_size: 4,
            lr_start: 1e-4,
            lr_end: 1e-8,
            lr_decay_every: 20,
            lr_decay_factor: 0.1,
            epochs: 100,
            seed: 0,
            image_size: 64,
            max_caption_len: 18,
            weights: LossWeights::default(),
            gammas: DamsmGammas::default(),
            flip_augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::domain("batch_size must be ≥ 1"));
        }
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(Error::domain("need lr_start ≥ lr_end > 0"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::domain("lr_decay_every must be ≥ 1"));
        }
        QualityFactor::new(self.qf)?;
        self.weights.validate()
    }
}

/// Stepped decade decay: `lr_start · factor^⌊epoch/interval⌋`, floored at
/// `lr_end`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: u64) -> f64 {
    let steps = (epoch as usize / cfg.lr_decay_every) as i32;
    (cfg.lr_start * cfg.lr_decay_factor.powi(steps)).max(cfg.lr_end)
}

/// Every model and training hyperparameter; hashed into checkpoints.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SystemConfig {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub text_encoder: TextEncoderConfig,
    pub image_encoder: ImageEncoderConfig,
    pub perceptual: PerceptualConfig,
}

impl SystemConfig {
    /// CPU-scale defaults: 64×64 images, common dimension 128.
    pub fn desk_scale(vocab_size: usize) -> Self {
        let train = TrainConfig::default();
        let generator = GeneratorConfig::desk_scale();
        let mut text_encoder = TextEncoderConfig::with_vocab(vocab_size, generator.text_dim);
        text_encoder.max_caption_len = train.max_caption_len;
        let image_encoder = ImageEncoderConfig {
            common_dim: generator.text_dim,
            region_grid: 8,
            channels: [16, 32, 64],
            min_side: 64,
        };
        SystemConfig {
            train,
            generator,
            discriminator: DiscriminatorConfig::desk_scale(),
            text_encoder,
            image_encoder,
            perceptual: PerceptualConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generator.validate()?;
        let d = self.generator.text_dim;
        if self.text_encoder.common_dim != d || self.image_encoder.common_dim != d {
            return Err(Error::domain(format!(
                "common dimension mismatch: generator {d}, text {}, image {}",
                self.text_encoder.common_dim, self.image_encoder.common_dim
            )));
        }
        if self.train.image_size != self.generator.input_size {
            return Err(Error::domain(format!(
                "train image_size {} ≠ generator input_size {}",
                self.train.image_size, self.generator.input_size
            )));
        }
        if self.train.max_caption_len != self.text_encoder.max_caption_len {
            return Err(Error::domain("max caption length mismatch"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// JSON-lines training log; kept in memory and optionally mirrored to disk.
#[derive(Default)]
pub struct TrainLog {
    pub lines: Vec<String>,
    writer: Option<Box<dyn Write + Send>>,
}

impl TrainLog {
    pub fn memory() -> Self {
        TrainLog::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path)?;
        Ok(TrainLog {
            lines: Vec::new(),
            writer: Some(Box::new(std::io::BufWriter::new(file))),
        })
    }

    pub fn record(&mut self, value: &impl serde::Serialize) {
        let line = serde_json::to_string(value).expect("log serialization");
        if let Some(w) = self.writer.as_mut() {
            let _ = writeln!(w, "{line}");
        }
        self.lines.push(line);
    }

    pub fn flush(&mut self) {
        if let Some(w) = self.writer.as_mut() {
            let _ = w.flush();
        }
    }
}

#[derive(serde::Serialize)]
struct DamsmTrace {
    stage: &'static str,
    epoch: u64,
    step: u64,
    lr: f64,
    l_word: f64,
    l_sentence: f64,
    l_it: f64,
}

#[derive(serde::Serialize)]
struct AdvTrace {
    stage: &'static str,
    epoch: u64,
    step: u64,
    lr: f64,
    d_loss: f64,
    l_c: f64,
    l_r: f64,
    l_g: f64,
    l_it: f64,
    total: f64,
}

/// All stores, optimizers and model definitions of one training run.
pub struct TrainState<F: Scalar> {
    pub config: SystemConfig,
    pub vocab: Vocabulary,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub text_encoder: TextEncoder,
    pub image_encoder: ImageEncoder,
    pub perceptual: PerceptualExtractor<F>,
    pub gen_store: ParamStore<F>,
    pub disc_store: ParamStore<F>,
    pub text_store: ParamStore<F>,
    pub image_store: ParamStore<F>,
    pub adam_gen: Adam<F>,
    pub adam_disc: Adam<F>,
    pub adam_text: Adam<F>,
    pub adam_image: Adam<F>,
    /// Epochs completed in the current stage.
    pub epoch: u64,
    step: u64,
}

impl<F: Scalar> TrainState<F> {
    /// Resets the per-stage progress counters, e.g. when moving from the
    /// pretraining stage to the adversarial stage.
    pub fn reset_stage_progress(&mut self) {
        self.epoch = 0;
        self.step = 0;
    }
}

impl<F: Scalar> TrainState<F> {
    /// Fresh state with seeded initialization (per-network seed offsets).
    pub fn new(config: SystemConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if vocab.size() != config.text_encoder.vocab_size {
            return Err(Error::domain(format!(
                "vocabulary size {} ≠ configured {}",
                vocab.size(),
                config.text_encoder.vocab_size
            )));
        }
        let seed = config.train.seed;
        let generator = Generator::new(config.generator.clone())?;
        let discriminator = Discriminator::new(config.discriminator.clone());
        let text_encoder = TextEncoder::new(config.text_encoder.clone())?;
        let image_encoder = ImageEncoder::new(config.image_encoder.clone());
        let perceptual = PerceptualExtractor::new(config.perceptual.clone());
        let lr = config.train.lr_start;
        Ok(TrainState {
            gen_store: generator.init_params(seed),
            disc_store: discriminator.init_params(seed.wrapping_add(1)),
            text_store: text_encoder.init_params(seed.wrapping_add(2)),
            image_store: image_encoder.init_params(seed.wrapping_add(3)),
            adam_gen: Adam::new(lr),
            adam_disc: Adam::new(lr),
            adam_text: Adam::new(lr),
            adam_image: Adam::new(lr),
            config,
            vocab,
            generator,
            discriminator,
            text_encoder,
            image_encoder,
            perceptual,
            epoch: 0,
            step: 0,
        })
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn to_checkpoint(&self) -> Checkpoint<F> {
        let mut stores = BTreeMap::new();
        stores.insert("generator".to_string(), self.gen_store.clone());
        stores.insert("discriminator".to_string(), self.disc_store.clone());
        stores.insert("text_encoder".to_string(), self.text_store.clone());
        stores.insert("image_encoder".to_string(), self.image_store.clone());
        stores.insert("perceptual".to_string(), self.perceptual.store().clone());
        let mut optimizers = BTreeMap::new();
        for (name, adam) in [
            ("generator", &self.adam_gen),
            ("discriminator", &self.adam_disc),
            ("text_encoder", &self.adam_text),
            ("image_encoder", &self.adam_image),
        ] {
            let (t, m, v) = adam.export_state();
            optimizers.insert(
                name.to_string(),
                OptimState {
                    t,
                    m: m.clone(),
                    v: v.clone(),
                },
            );
        }
        let vocab_tokens: Vec<String> = (0..self.vocab.size())
            .map(|i| self.vocab.token_of(i).unwrap().to_string())
            .collect();
        Checkpoint {
            meta: CheckpointMeta {
                config_hash: self.config.hash(),
                config_json: serde_json::to_string(&self.config).expect("config json"),
                vocab_tokens,
                epoch: self.epoch,
                step: self.step,
                rng_seed: self.config.train.seed,
            },
            stores,
            optimizers,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint<F>) -> Result<Self> {
        let config: SystemConfig = serde_json::from_str(&ckpt.meta.config_json)
            .map_err(|e| Error::Checkpoint(format!("config parse: {e}")))?;
        let stored_hash = config.hash();
        if stored_hash != ckpt.meta.config_hash {
            return Err(Error::ConfigMismatch {
                expected: ckpt.meta.config_hash.clone(),
                found: stored_hash,
            });
        }
        let tokens = ckpt.meta.vocab_tokens.clone();
        if tokens.len() < 2 {
            return Err(Error::Checkpoint("vocabulary missing from checkpoint".into()));
        }
        let vocab = Vocabulary::from_tokens(tokens.into_iter().skip(2));
        let mut state = TrainState::new(config, vocab)?;
        let mut stores = ckpt.stores;
        let mut take = |name: &str| -> Result<ParamStore<F>> {
            stores
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("store `{name}` missing")))
        };
        state.gen_store = take("generator")?;
        state.disc_store = take("discriminator")?;
        state.text_store = take("text_encoder")?;
        state.image_store = take("image_encoder")?;
        state.perceptual =
            PerceptualExtractor::from_store(state.config.perceptual.clone(), take("perceptual")?)?;
        for (name, adam) in [
            ("generator", &mut state.adam_gen),
            ("discriminator", &mut state.adam_disc),
            ("text_encoder", &mut state.adam_text),
            ("image_encoder", &mut state.adam_image),
        ] {
            if let Some(opt) = ckpt.optimizers.get(name) {
                adam.import_state(opt.t, opt.m.clone(), opt.v.clone());
            }
        }
        state.epoch = ckpt.meta.epoch;
        state.step = ckpt.meta.step;
        Ok(state)
    }

    /// Tokenizes with the model vocabulary.
    pub fn encode_caption(&self, text: &str) -> Result<Caption> {
        self.vocab.encode(text, self.config.train.max_caption_len)
    }

    /// Text features via the (possibly frozen) text encoder.
    pub fn text_features(&self, caption: &Caption) -> Result<TextFeatures<F>> {
        self.text_encoder.encode(&self.text_store, caption)
    }

    /// Deblocks one compressed image under a caption (eval mode).
    pub fn deblock(&self, compressed: &ImageTensor<F>, caption: &Caption) -> Result<ImageTensor<F>> {
        let feats = self.text_features(caption)?;
        self.generator
            .generate(&self.gen_store, compressed, &feats.words, &feats.sentence)
    }

    /// Like [`TrainState::deblock`] but also returns each fusion scale's
    /// word-attention map as `(height, width, [T, H·W])`.
    #[allow(clippy::type_complexity)]
    pub fn deblock_with_attention(
        &self,
        compressed: &ImageTensor<F>,
        caption: &Caption,
    ) -> Result<(ImageTensor<F>, Vec<(usize, usize, Tensor<F>)>)> {
        let feats = self.text_features(caption)?;
        let mut g = Graph::new();
        let ic = g.input(compressed.tensor().clone());
        let w = g.input(feats.words.clone());
        let s = g.input(feats.sentence.clone());
        let out = self
            .generator
            .generate_graph(&mut g, TAG_GENERATOR, &self.gen_store, ic, w, s)?;
        let image = ImageTensor::from_tensor_clamped(g.value(out.image).clone())?;
        let (h, wd) = (compressed.height(), compressed.width());
        let scales = [(h / 8, wd / 8), (h / 4, wd / 4), (h / 2, wd / 2)];
        let attns = out
            .attentions
            .iter()
            .zip(scales)
            .map(|(&a, (sh, sw))| (sh, sw, g.value(a).clone()))
            .collect();
        Ok((image, attns))
    }
}

fn epoch_flips(seed: u64, epoch: u64, n: usize, enabled: bool) -> Vec<bool> {
    let mut rng = epoch_rng(seed, epoch);
    (0..n)
        .map(|_| enabled && rng.random_bool(0.5))
        .collect()
}

/// Stage 1: train both encoders under the matching loss on clean images.
pub fn pretrain_damsm<F: Scalar>(
    state: &mut TrainState<F>,
    manifest: &DatasetManifest,
    log: &mut TrainLog,
) -> Result<()> {
    if manifest.pairs.is_empty() {
        return Err(Error::data("dataset has no training pairs"));
    }
    let cfg = state.config.train.clone();
    let qf = QualityFactor::new(cfg.qf)?;
    for epoch in state.epoch..cfg.epochs as u64 {
        let lr = lr_at_epoch(&cfg, epoch);
        state.adam_text.lr = lr;
        state.adam_image.lr = lr;
        let order = batch_order(manifest.pairs.len(), cfg.seed, epoch);
        let flips = epoch_flips(cfg.seed, epoch, order.len(), cfg.flip_augment);
        for (chunk_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let mut image_feats = Vec::with_capacity(chunk.len());
            let mut text_feats = Vec::with_capacity(chunk.len());
            for (slot, &pair_idx) in chunk.iter().enumerate() {
                let pair = prepare_pair::<F>(
                    manifest,
                    manifest.pairs[pair_idx],
                    &state.vocab,
                    cfg.image_size,
                    cfg.max_caption_len,
                    qf,
                    cfg.subsampling,
                    flips[chunk_idx * cfg.batch_size + slot],
                )?;
                let img = g.input(pair.clean.tensor().clone());
                let (regions, global) = state.image_encoder.encode_graph(
                    &mut g,
                    TAG_IMAGE_ENCODER,
                    &state.image_store,
                    img,
                )?;
                image_feats.push(ImageFeatureVars { regions, global });
                let (words, sentence) = state.text_encoder.encode_graph(
                    &mut g,
                    TAG_TEXT_ENCODER,
                    &state.text_store,
                    &pair.caption,
                )?;
                text_feats.push(TextFeatureVars { words, sentence });
            }
            let (lw, ls) = damsm_loss_var(&mut g, &image_feats, &text_feats, &cfg.gammas)?;
            let l_it = g.add(lw, ls);
            g.backward(l_it);
            state.text_store.zero_grads();
            state.image_store.zero_grads();
            g.grads_into(TAG_TEXT_ENCODER, &mut state.text_store);
            g.grads_into(TAG_IMAGE_ENCODER, &mut state.image_store);
            state
                .adam_text
                .step(&mut state.text_store)
                .map_err(|e| Error::numeric(format!("step {}: {e}", state.step)))?;
            state
                .adam_image
                .step(&mut state.image_store)
                .map_err(|e| Error::numeric(format!("step {}: {e}", state.step)))?;
            log.record(&DamsmTrace {
                stage: "damsm",
                epoch,
                step: state.step,
                lr,
                l_word: g.value(lw).item().to_f64c(),
                l_sentence: g.value(ls).item().to_f64c(),
                l_it: g.value(l_it).item().to_f64c(),
            });
            state.step += 1;
        }
        state.epoch = epoch + 1;
    }
    log.flush();
    Ok(())
}

/// Stage 2: adversarial training of generator and discriminator; encoders
/// and the perceptual module stay frozen.
pub fn train_adversarial<F: Scalar>(
    state: &mut TrainState<F>,
    manifest: &DatasetManifest,
    log: &mut TrainLog,
) -> Result<()> {
    train_adversarial_until(state, manifest, log, |_| false)
}

/// [`train_adversarial`] with an early-stop predicate evaluated after every
/// step on the latest loss report.
pub fn train_adversarial_until<F: Scalar>(
    state: &mut TrainState<F>,
    manifest: &DatasetManifest,
    log: &mut TrainLog,
    mut stop: impl FnMut(&LossReport) -> bool,
) -> Result<()> {
    if manifest.pairs.is_empty() {
        return Err(Error::data("dataset has no training pairs"));
    }
    state.text_store.set_frozen_all(true);
    state.image_store.set_frozen_all(true);
    let cfg = state.config.train.clone();
    let qf = QualityFactor::new(cfg.qf)?;

    'outer: for epoch in state.epoch..cfg.epochs as u64 {
        let lr = lr_at_epoch(&cfg, epoch);
        state.adam_gen.lr = lr;
        state.adam_disc.lr = lr;
        let order = batch_order(manifest.pairs.len(), cfg.seed, epoch);
        let flips = epoch_flips(cfg.seed, epoch, order.len(), cfg.flip_augment);

        for (chunk_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // Forward all generator samples on one graph.
            let mut g = Graph::new();
            let mut cleans = Vec::with_capacity(chunk.len());
            let mut compresseds = Vec::with_capacity(chunk.len());
            let mut gen_outs = Vec::with_capacity(chunk.len());
            let mut text_vars = Vec::with_capacity(chunk.len());
            for (slot, &pair_idx) in chunk.iter().enumerate() {
                let pair = prepare_pair::<F>(
                    manifest,
                    manifest.pairs[pair_idx],
                    &state.vocab,
                    cfg.image_size,
                    cfg.max_caption_len,
                    qf,
                    cfg.subsampling,
                    flips[chunk_idx * cfg.batch_size + slot],
                )?;
                // Encoders are frozen: text features enter as constants.
                let feats = state.text_features(&pair.caption)?;
                let clean = g.input(pair.clean.tensor().clone());
                let compressed = g.input(pair.compressed.tensor().clone());
                let words = g.input(feats.words.clone());
                let sentence = g.input(feats.sentence.clone());
                let out = state.generator.generate_graph(
                    &mut g,
                    TAG_GENERATOR,
                    &state.gen_store,
                    compressed,
                    words,
                    sentence,
                )?;
                cleans.push(clean);
                compresseds.push(compressed);
                gen_outs.push(out.image);
                text_vars.push(TextFeatureVars { words, sentence });
            }

            // Discriminator step on detached fakes.
            let mut dg = Graph::new();
            let mut d_losses = Vec::with_capacity(chunk.len());
            for (i, &out) in gen_outs.iter().enumerate() {
                let real = dg.input(g.value(cleans[i]).clone());
                let fake = dg.input(g.value(out).clone());
                let p_real = state.discriminator.discriminate_graph(
                    &mut dg,
                    TAG_DISCRIMINATOR,
                    &mut state.disc_store,
                    real,
                    true,
                )?;
                let p_fake = state.discriminator.discriminate_graph(
                    &mut dg,
                    TAG_DISCRIMINATOR,
                    &mut state.disc_store,
                    fake,
                    true,
                )?;
                d_losses.push(gan_d_loss_var(&mut dg, p_real, p_fake));
            }
            let d_cat = dg.concat(&d_losses);
            let d_loss = dg.mean(d_cat);
            dg.backward(d_loss);
            state.disc_store.zero_grads();
            dg.grads_into(TAG_DISCRIMINATOR, &mut state.disc_store);
            state
                .adam_disc
                .step(&mut state.disc_store)
                .map_err(|e| Error::numeric(format!("step {} (d_loss): {e}", state.step)))?;

            // Generator step against the updated discriminator.
            let mut g_losses = Vec::with_capacity(chunk.len());
            let mut r_losses = Vec::with_capacity(chunk.len());
            let mut c_losses = Vec::with_capacity(chunk.len());
            let mut image_feats = Vec::with_capacity(chunk.len());
            for i in 0..gen_outs.len() {
                let p_fake = state.discriminator.discriminate_graph(
                    &mut g,
                    TAG_DISCRIMINATOR,
                    &mut state.disc_store,
                    gen_outs[i],
                    true,
                )?;
                g_losses.push(gan_g_loss_var(&mut g, p_fake));
                r_losses.push(reconstruction_loss_var(&mut g, gen_outs[i], cleans[i]));
                c_losses.push(contrastive_loss_var(
                    &mut g,
                    TAG_PERCEPTUAL,
                    &state.perceptual,
                    gen_outs[i],
                    cleans[i],
                    compresseds[i],
                    cfg.weights.c,
                ));
                let (regions, global) = state.image_encoder.encode_graph(
                    &mut g,
                    TAG_IMAGE_ENCODER,
                    &state.image_store,
                    gen_outs[i],
                )?;
                image_feats.push(ImageFeatureVars { regions, global });
            }
            let mean_of = |g: &mut Graph<F>, items: &[Var]| {
                let cat = g.concat(items);
                g.mean(cat)
            };
            let l_g = mean_of(&mut g, &g_losses);
            let l_r = mean_of(&mut g, &r_losses);
            let l_c = mean_of(&mut g, &c_losses);
            let (lw, ls) = damsm_loss_var(&mut g, &image_feats, &text_vars, &cfg.gammas)?;
            let l_it = g.add(lw, ls);
            let total = total_loss_var(&mut g, l_c, l_r, l_g, l_it, &cfg.weights);

            let report = total_loss(
                g.value(l_c).item().to_f64c(),
                g.value(l_r).item().to_f64c(),
                g.value(l_g).item().to_f64c(),
                g.value(l_it).item().to_f64c(),
                &cfg.weights,
            )
            .map_err(|e| Error::numeric(format!("step {}: {e}", state.step)))?;

            g.backward(total);
            state.gen_store.zero_grads();
            g.grads_into(TAG_GENERATOR, &mut state.gen_store);
            state
                .adam_gen
                .step(&mut state.gen_store)
                .map_err(|e| Error::numeric(format!("step {} (total): {e}", state.step)))?;

            log.record(&AdvTrace {
                stage: "adv",
                epoch,
                step: state.step,
                lr,
                d_loss: dg.value(d_loss).item().to_f64c(),
                l_c: report.l_c,
                l_r: report.l_r,
                l_g: report.l_g,
                l_it: report.l_it,
                total: report.total,
            });
            state.step += 1;
            if stop(&report) {
                state.epoch = epoch + 1;
                break 'outer;
            }
        }
        state.epoch = epoch + 1;
    }
    log.flush();
    Ok(())
}

/// Mean diagonal (matched-pair) probability of the sentence-similarity
/// softmax over the first `batch` dataset pairs.
pub fn matched_pair_probability<F: Scalar>(
    state: &TrainState<F>,
    manifest: &DatasetManifest,
    batch: usize,
) -> Result<f64> {
    let cfg = &state.config.train;
    let qf = QualityFactor::new(cfg.qf)?;
    let n = batch.min(manifest.pairs.len());
    if n < 2 {
        return Err(Error::domain("need at least 2 pairs"));
    }
    let mut globals = Vec::with_capacity(n);
    let mut sentences = Vec::with_capacity(n);
    for &pair in manifest.pairs.iter().take(n) {
        let p = prepare_pair::<F>(
            manifest,
            pair,
            &state.vocab,
            cfg.image_size,
            cfg.max_caption_len,
            qf,
            cfg.subsampling,
            false,
        )?;
        let img_feats = state.image_encoder.encode(&state.image_store, &p.clean)?;
        let txt_feats = state.text_features(&p.caption)?;
        globals.push(img_feats.global);
        sentences.push(txt_feats.sentence);
    }
    let cos = |a: &Tensor<F>, b: &Tensor<F>| {
        let dot: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x.to_f64c() * y.to_f64c())
            .sum();
        dot / (a.l2_norm().to_f64c() * b.l2_norm().to_f64c()).max(1e-12)
    };
    let mut mean_prob = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| state.config.train.gammas.gamma3 * cos(&globals[i], &sentences[j]))
            .collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        mean_prob += exps[i] / exps.iter().sum::<f64>();
    }
    Ok(mean_prob / n as f64)
}

/// Mean metrics of one split.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct SplitMetrics {
    pub psnr: f64,
    pub perceptual: f64,
    pub fid_small: f64,
}

/// Evaluation result over a dataset at one quality factor.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub qf: u8,
    pub n_images: usize,
    pub compressed: SplitMetrics,
    pub deblocked: SplitMetrics,
}

/// Deblocks every dataset image (first caption line) and reports mean PSNR,
/// perceptual distance and the set-level Fréchet distance for both the
/// compressed and the deblocked split.
pub fn evaluate<F: Scalar>(
    state: &TrainState<F>,
    manifest: &DatasetManifest,
    qf: QualityFactor,
) -> Result<EvalReport> {
    if manifest.entries.is_empty() {
        return Err(Error::data("dataset has no images"));
    }
    let cfg = &state.config.train;
    let mut cleans = Vec::new();
    let mut compresseds = Vec::new();
    let mut deblockeds = Vec::new();
    for (idx, _) in manifest.entries.iter().enumerate() {
        let p = prepare_pair::<F>(
            manifest,
            (idx, 0),
            &state.vocab,
            cfg.image_size,
            cfg.max_caption_len,
            qf,
            cfg.subsampling,
            false,
        )?;
        let deblocked = state.deblock(&p.compressed, &p.caption)?;
        cleans.push(p.clean);
        compresseds.push(p.compressed);
        deblockeds.push(deblocked);
    }
    let n = cleans.len();
    let mean_metrics = |outs: &[ImageTensor<F>]| -> Result<(f64, f64)> {
        let mut psnr_sum = 0.0;
        let mut perc_sum = 0.0;
        for (clean, out) in cleans.iter().zip(outs) {
            psnr_sum += psnr(clean, out)?;
            perc_sum += state.perceptual.perceptual_distance(out, clean)?.value();
        }
        Ok((psnr_sum / n as f64, perc_sum / n as f64))
    };
    let (psnr_c, perc_c) = mean_metrics(&compresseds)?;
    let (psnr_d, perc_d) = mean_metrics(&deblockeds)?;
    let (fid_c, fid_d) = if n >= 2 {
        (
            state.perceptual.fid_small(&cleans, &compresseds)?,
            state.perceptual.fid_small(&cleans, &deblockeds)?,
        )
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(EvalReport {
        qf: qf.value(),
        n_images: n,
        compressed: SplitMetrics {
            psnr: psnr_c,
            perceptual: perc_c,
            fid_small: fid_c,
        },
        deblocked: SplitMetrics {
            psnr: psnr_d,
            perceptual: perc_d,
            fid_small: fid_d,
        },
    })
}
