//! Trainer integration: pretraining makes the matching loss fall, the
//! adversarial stage respects freezes, checkpoints resume bit-exactly, and
//! evaluation honors the identity-generator contract.

use deblock_core::data::{build_vocab, load_dataset};
use deblock_core::discriminator::DiscriminatorConfig;
use deblock_core::encoders::ImageEncoderConfig;
use deblock_core::generator::GeneratorConfig;
use deblock_core::jpeg::QualityFactor;
use deblock_core::metrics::PerceptualConfig;
use deblock_core::synth::write_synthetic_dataset;
use deblock_core::tensor::Tensor;
use deblock_core::trainer::{
    evaluate, matched_pair_probability, pretrain_damsm, train_adversarial, SystemConfig,
    TrainConfig, TrainLog, TrainState,
};

fn tiny_config(vocab_size: usize, epochs: usize, seed: u64) -> SystemConfig {
    SystemConfig {
        train: TrainConfig {
            qf: 5,
            batch_size: 4,
            epochs,
            seed,
            image_size: 32,
            lr_decay_every: 10_000,
            flip_augment: false,
            ..TrainConfig::default()
        },
        generator: GeneratorConfig {
            base_channels: 8,
            bottleneck_channels: 16,
            n_resblocks: 3,
            input_size: 32,
            use_global_residual: true,
            text_dim: 16,
        },
        discriminator: DiscriminatorConfig {
            channel_plan: [8, 8, 8, 8],
            eps_clamp: 1e-6,
        },
        text_encoder: deblock_core::encoders::TextEncoderConfig {
            vocab_size,
            word_embed_dim: 8,
            common_dim: 16,
            max_caption_len: 18,
        },
        image_encoder: ImageEncoderConfig {
            common_dim: 16,
            region_grid: 2,
            channels: [8, 8, 16],
            min_side: 32,
        },
        perceptual: PerceptualConfig {
            seed: 77,
            stage_channels: [4, 4, 8],
        },
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    manifest: deblock_core::data::DatasetManifest,
    vocab: deblock_core::encoders::Vocabulary,
}

fn fixture(n: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), n, 32, 500).unwrap();
    let manifest = load_dataset(dir.path()).unwrap();
    let vocab = build_vocab(&manifest, 1).unwrap();
    Fixture {
        _dir: dir,
        manifest,
        vocab,
    }
}

#[test]
fn damsm_pretraining_reduces_matching_loss() {
    let fx = fixture(8);
    // 8 pairs, batch 4 → 2 steps per epoch; 250 epochs = 500 steps.
    let config = tiny_config(fx.vocab.size(), 250, 3);
    let mut state: TrainState<f32> = TrainState::new(config, fx.vocab.clone()).unwrap();
    let mut log = TrainLog::memory();
    pretrain_damsm(&mut state, &fx.manifest, &mut log).unwrap();
    assert_eq!(log.lines.len(), 500);

    let first: serde_json::Value = serde_json::from_str(&log.lines[0]).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines.last().unwrap()).unwrap();
    let l0 = first["l_it"].as_f64().unwrap();
    let l1 = last["l_it"].as_f64().unwrap();
    assert!(
        l1 < l0,
        "matching loss did not fall over 500 steps: {l0} → {l1}"
    );

    // Matched pairs beat chance level within a batch of 8.
    let prob = matched_pair_probability(&state, &fx.manifest, 8).unwrap();
    assert!(prob > 1.0 / 8.0, "matched-pair probability {prob} ≤ chance");
}

#[test]
fn adversarial_stage_freezes_encoders_and_perceptual() {
    let fx = fixture(8);
    let config = tiny_config(fx.vocab.size(), 2, 5);
    let mut state: TrainState<f32> = TrainState::new(config.clone(), fx.vocab.clone()).unwrap();
    let mut log = TrainLog::memory();
    pretrain_damsm(&mut state, &fx.manifest, &mut log).unwrap();
    state.reset_stage_progress();

    let text_before = state.text_store.clone();
    let image_before = state.image_store.clone();
    let perc_before = state.perceptual.store().clone();
    let gen_before = state.gen_store.clone();

    state.config.train.epochs = 13; // 26 steps
    let mut log = TrainLog::memory();
    train_adversarial(&mut state, &fx.manifest, &mut log).unwrap();
    assert_eq!(log.lines.len(), 26);

    assert!(state.text_store.values_identical(&text_before));
    assert!(state.image_store.values_identical(&image_before));
    assert!(state.perceptual.store().values_identical(&perc_before));
    assert!(
        !state.gen_store.values_identical(&gen_before),
        "generator did not move"
    );

    // Every logged report satisfies the weighted-sum identity.
    for line in &log.lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let w = &state.config.train.weights;
        let total = v["total"].as_f64().unwrap();
        let expect = w.lambda1 * v["l_c"].as_f64().unwrap()
            + w.lambda2 * v["l_r"].as_f64().unwrap()
            + w.lambda3 * v["l_g"].as_f64().unwrap()
            + w.lambda4 * v["l_it"].as_f64().unwrap();
        assert!((total - expect).abs() < 1e-9);
    }
}

#[test]
fn fixed_seed_reproduces_loss_log_exactly() {
    let fx = fixture(8);
    let run = || {
        let config = tiny_config(fx.vocab.size(), 4, 7);
        let mut state: TrainState<f32> = TrainState::new(config, fx.vocab.clone()).unwrap();
        let mut log = TrainLog::memory();
        train_adversarial(&mut state, &fx.manifest, &mut log).unwrap();
        log.lines
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "two identically seeded runs diverged");
}

#[test]
fn checkpoint_resume_continues_identically() {
    let fx = fixture(8);

    // Uninterrupted run: 6 epochs.
    let config = tiny_config(fx.vocab.size(), 6, 11);
    let mut full: TrainState<f32> = TrainState::new(config.clone(), fx.vocab.clone()).unwrap();
    let mut full_log = TrainLog::memory();
    train_adversarial(&mut full, &fx.manifest, &mut full_log).unwrap();

    // Interrupted run: 3 epochs, checkpoint, reload, 3 more.
    let mut half_cfg = config.clone();
    half_cfg.train.epochs = 3;
    let mut half: TrainState<f32> = TrainState::new(half_cfg, fx.vocab.clone()).unwrap();
    let mut first_log = TrainLog::memory();
    train_adversarial(&mut half, &fx.manifest, &mut first_log).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    half.to_checkpoint().save(&path).unwrap();
    let ckpt = deblock_core::checkpoint::Checkpoint::<f32>::load(&path).unwrap();
    let mut resumed = TrainState::from_checkpoint(ckpt).unwrap();
    resumed.config.train.epochs = 6;
    let mut resume_log = TrainLog::memory();
    train_adversarial(&mut resumed, &fx.manifest, &mut resume_log).unwrap();

    let mut joined = first_log.lines.clone();
    joined.extend(resume_log.lines.clone());
    assert_eq!(
        joined, full_log.lines,
        "resumed run does not match uninterrupted run"
    );
    assert!(full.gen_store.values_identical(&resumed.gen_store));
    assert!(full.disc_store.values_identical(&resumed.disc_store));
}

#[test]
fn evaluate_identity_generator_matches_compressed_metrics() {
    let fx = fixture(4);
    let config = tiny_config(fx.vocab.size(), 1, 13);
    let mut state: TrainState<f32> = TrainState::new(config, fx.vocab.clone()).unwrap();
    for name in ["head.w", "head.b"] {
        let shape = state.gen_store.get(name).shape().to_vec();
        *state.gen_store.get_mut(name) = Tensor::zeros(&shape);
    }
    let report = evaluate(&state, &fx.manifest, QualityFactor::new(5).unwrap()).unwrap();
    assert_eq!(report.compressed.psnr, report.deblocked.psnr);
    assert_eq!(report.compressed.perceptual, report.deblocked.perceptual);
    assert_eq!(report.compressed.fid_small, report.deblocked.fid_small);
}

#[test]
fn evaluate_is_deterministic() {
    let fx = fixture(4);
    let config = tiny_config(fx.vocab.size(), 1, 17);
    let state: TrainState<f32> = TrainState::new(config, fx.vocab.clone()).unwrap();
    let qf = QualityFactor::new(5).unwrap();
    let a = evaluate(&state, &fx.manifest, qf).unwrap();
    let b = evaluate(&state, &fx.manifest, qf).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn checkpoint_next_damsm_step_matches_uninterrupted() {
    let fx = fixture(8);
    let config = tiny_config(fx.vocab.size(), 2, 19);
    let mut full: TrainState<f32> = TrainState::new(config.clone(), fx.vocab.clone()).unwrap();
    let mut full_log = TrainLog::memory();
    pretrain_damsm(&mut full, &fx.manifest, &mut full_log).unwrap();

    let mut half_cfg = config.clone();
    half_cfg.train.epochs = 1;
    let mut half: TrainState<f32> = TrainState::new(half_cfg, fx.vocab.clone()).unwrap();
    let mut log1 = TrainLog::memory();
    pretrain_damsm(&mut half, &fx.manifest, &mut log1).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("damsm.ckpt");
    half.to_checkpoint().save(&path).unwrap();
    let mut resumed: TrainState<f32> =
        TrainState::from_checkpoint(deblock_core::checkpoint::Checkpoint::load(&path).unwrap())
            .unwrap();
    resumed.config.train.epochs = 2;
    let mut log2 = TrainLog::memory();
    pretrain_damsm(&mut resumed, &fx.manifest, &mut log2).unwrap();

    let mut joined = log1.lines.clone();
    joined.extend(log2.lines.clone());
    assert_eq!(joined, full_log.lines);
}
