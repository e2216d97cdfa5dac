//! Acceptance gate: every shipping criterion, one test per criterion, each
//! printing a `ACCEPTANCE <name>: PASS` line (visible with
//! `cargo test --test acceptance -- --nocapture`).
//!
//! The overfit smoke run is shared by the criteria that need a trained
//! model; it is executed once and memoized for the whole test process.

use deblock_core::data::{build_vocab, load_dataset, DatasetManifest};
use deblock_core::encoders::Vocabulary;
use deblock_core::fusion::{Gfm, GfmConfig, Lfm, LfmConfig};
use deblock_core::generator::{Generator, GeneratorConfig};
use deblock_core::image::ImageTensor;
use deblock_core::jpeg::{
    degrade, dct8x8, idct8x8, luma_base_table, scale_quant_table, QualityFactor, Subsampling,
};
use deblock_core::losses::{
    contrastive_loss, damsm_loss, gan_losses, total_loss, DamsmGammas, LossWeights,
};
use deblock_core::metrics::{frechet_distance_sets, psnr, PerceptualConfig, PerceptualExtractor};
use deblock_core::nn::graph::{Graph, Var};
use deblock_core::nn::{grad_check, ops, BiLstm, Initializer, ParamStore};
use deblock_core::synth::{synthetic_image, write_synthetic_dataset};
use deblock_core::tensor::Tensor;
use deblock_core::trainer::{
    evaluate, pretrain_damsm, train_adversarial, SystemConfig, TrainLog, TrainState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::Digest;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

fn pass(name: &str) {
    println!("ACCEPTANCE {name}: PASS");
}

// ---------------------------------------------------------------------------
// Codec correctness
// ---------------------------------------------------------------------------

#[test]
fn codec_correctness() {
    let started = Instant::now();

    // DCT round trip below 1e-10.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let block: [f64; 64] = std::array::from_fn(|_| rng.random_range(-128.0..128.0));
    let back = idct8x8(&dct8x8(&block));
    let rt_err = block
        .iter()
        .zip(back.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(rt_err < 1e-10, "dct round trip {rt_err}");

    // The three worked quant-table scalings.
    let luma = luma_base_table();
    assert_eq!(
        scale_quant_table(&luma, QualityFactor::new(50).unwrap()).at(0, 0),
        16
    );
    assert_eq!(
        scale_quant_table(&luma, QualityFactor::new(1).unwrap()).at(0, 0),
        255
    );
    assert!(scale_quant_table(&luma, QualityFactor::new(100).unwrap())
        .entries()
        .iter()
        .all(|&e| e == 1));

    // Near-lossless mode.
    let mut lossless_psnr = 0.0;
    for seed in 0..8 {
        let img = synthetic_image::<f64>(seed, 64, 64);
        let out = degrade(&img, QualityFactor::new(100).unwrap(), Subsampling::S444);
        lossless_psnr += psnr(&img, &out).unwrap();
    }
    lossless_psnr /= 8.0;
    assert!(lossless_psnr >= 45.0, "qf=100 4:4:4 PSNR {lossless_psnr}");

    // Mean PSNR strictly increasing over QF ∈ {1, 5, 10} on 16 images.
    let mut means = Vec::new();
    for qf in [1u8, 5, 10] {
        let mut total = 0.0;
        for seed in 0..16 {
            let img = synthetic_image::<f64>(100 + seed, 64, 64);
            let out = degrade(&img, QualityFactor::new(qf).unwrap(), Subsampling::S420);
            total += psnr(&img, &out).unwrap();
        }
        means.push(total / 16.0);
    }
    assert!(
        means[0] < means[1] && means[1] < means[2],
        "PSNR not monotone over QF: {means:?}"
    );

    assert!(
        started.elapsed() < Duration::from_secs(10),
        "codec suite took {:?}",
        started.elapsed()
    );
    pass("codec correctness");
}

// ---------------------------------------------------------------------------
// Differentiability suite
// ---------------------------------------------------------------------------

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let w = g.input(rand_tensor(&shape, seed, -1.0, 1.0));
    let prod = g.mul(out, w);
    g.sum(prod)
}

#[test]
fn differentiability_suite() {
    let started = Instant::now();
    const PRIM: f64 = 1e-4;
    const COMP: f64 = 1e-3;
    let mut check = |name: &str,
                     tol: f64,
                     h: f64,
                     inputs: &[Tensor<f64>],
                     f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var| {
        let report = grad_check(f, inputs, h, 40, 9).unwrap();
        assert!(
            report.max_rel_err < tol,
            "{name}: rel err {} ≥ {tol}",
            report.max_rel_err
        );
    };

    // Primitives.
    check(
        "conv2d",
        PRIM,
        1e-4,
        &[
            rand_tensor(&[3, 6, 6], 1, -1.0, 1.0),
            rand_tensor(&[4, 3, 3, 3], 2, -0.5, 0.5),
            rand_tensor(&[4], 3, -0.5, 0.5),
        ],
        &|g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 1);
            weighted_sum(g, y, 201)
        },
    );
    check(
        "fc",
        PRIM,
        1e-4,
        &[
            rand_tensor(&[5], 4, -1.0, 1.0),
            rand_tensor(&[4, 5], 5, -0.5, 0.5),
            rand_tensor(&[4], 6, -0.5, 0.5),
        ],
        &|g, v| {
            let y = g.fc(v[0], v[1], v[2]);
            weighted_sum(g, y, 202)
        },
    );
    let mixed = {
        // Magnitudes in [0.1, 1] with alternating signs: away from the kink.
        let mut t = rand_tensor(&[3, 4, 4], 7, 0.1, 1.0);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        t
    };
    check(
        "prelu",
        PRIM,
        1e-4,
        &[mixed, rand_tensor(&[3], 8, 0.1, 0.5)],
        &|g, v| {
            let y = g.prelu(v[0], v[1]);
            weighted_sum(g, y, 203)
        },
    );
    check(
        "batchnorm",
        PRIM,
        1e-4,
        &[
            rand_tensor(&[2, 4, 4], 10, -1.0, 1.0),
            rand_tensor(&[2], 11, 0.5, 1.5),
            rand_tensor(&[2], 12, -0.5, 0.5),
        ],
        &|g, v| {
            let (mean, var) = ops::spatial_stats(g.value(v[0]));
            let y = g.batchnorm_with_stats(v[0], v[1], v[2], mean, var, 1e-5);
            weighted_sum(g, y, 204)
        },
    );
    check(
        "softmax",
        PRIM,
        1e-4,
        &[rand_tensor(&[6], 13, -2.0, 2.0)],
        &|g, v| {
            let y = g.softmax_vec(v[0]);
            weighted_sum(g, y, 205)
        },
    );
    check(
        "gap",
        PRIM,
        1e-4,
        &[rand_tensor(&[3, 4, 4], 14, -1.0, 1.0)],
        &|g, v| {
            let y = g.gap(v[0]);
            weighted_sum(g, y, 206)
        },
    );
    check(
        "upsample_nearest2x",
        PRIM,
        1e-4,
        &[rand_tensor(&[3, 4, 4], 15, -1.0, 1.0)],
        &|g, v| {
            let y = g.upsample_nearest2x(v[0]);
            weighted_sum(g, y, 207)
        },
    );
    {
        let lstm = BiLstm::new("lstm", 3, 4);
        let mut store = ParamStore::<f64>::new();
        lstm.init_params(&mut store, &mut Initializer::new(16));
        check(
            "bilstm",
            PRIM,
            1e-4,
            &[
                rand_tensor(&[3], 17, -1.0, 1.0),
                rand_tensor(&[3], 18, -1.0, 1.0),
                rand_tensor(&[3], 19, -1.0, 1.0),
            ],
            &|g, v| {
                let (steps, _) = lstm.forward(g, 0, &store, v).unwrap();
                let stacked = g.stack(&steps);
                weighted_sum(g, stacked, 208)
            },
        );
    }

    // Composites.
    {
        let gfm = Gfm::new(GfmConfig {
            channels: 6,
            text_dim: 5,
        });
        let mut store = ParamStore::<f64>::new();
        gfm.init_params(&mut store, &mut Initializer::new(20), "gfm");
        check(
            "gfm",
            COMP,
            1e-4,
            &[rand_tensor(&[6, 4, 4], 21, -1.0, 1.0), rand_tensor(&[5], 22, -1.0, 1.0)],
            &|g, v| {
                let y = gfm.forward(g, 0, &store, "gfm", v[0], v[1]).unwrap();
                weighted_sum(g, y, 209)
            },
        );
    }
    {
        let lfm = Lfm::new(LfmConfig {
            channels: 5,
            text_dim: 4,
        });
        let mut store = ParamStore::<f64>::new();
        lfm.init_params(&mut store, &mut Initializer::new(23), "lfm");
        check(
            "lfm",
            COMP,
            1e-4,
            &[rand_tensor(&[5, 3, 3], 24, -1.0, 1.0), rand_tensor(&[4, 3], 25, -1.0, 1.0)],
            &|g, v| {
                let y = lfm.forward(g, 0, &store, "lfm", v[0], v[1]).unwrap();
                weighted_sum(g, y, 210)
            },
        );
    }
    {
        let extractor = PerceptualExtractor::<f64>::new(PerceptualConfig {
            seed: 321,
            stage_channels: [4, 6, 8],
        });
        check(
            "perceptual_distance",
            COMP,
            1e-4,
            &[rand_tensor(&[3, 8, 8], 26, 0.1, 0.9), rand_tensor(&[3, 8, 8], 27, 0.1, 0.9)],
            &|g, v| extractor.distance_var(g, 0, v[0], v[1]),
        );
    }
    {
        let gen = Generator::new(GeneratorConfig {
            base_channels: 4,
            bottleneck_channels: 6,
            n_resblocks: 3,
            input_size: 16,
            use_global_residual: true,
            text_dim: 5,
        })
        .unwrap();
        let store = gen.init_params::<f64>(28);
        check(
            "tiny generator end-to-end",
            COMP,
            1e-5,
            &[
                rand_tensor(&[3, 16, 16], 29, 0.15, 0.85),
                rand_tensor(&[5, 3], 30, -0.5, 0.5),
                rand_tensor(&[5], 31, -0.5, 0.5),
            ],
            &|g, v| {
                let out = gen.generate_graph(g, 0, &store, v[0], v[1], v[2]).unwrap();
                weighted_sum(g, out.image, 211)
            },
        );
    }

    assert!(
        started.elapsed() < Duration::from_secs(120),
        "differentiability suite took {:?}",
        started.elapsed()
    );
    pass("differentiability suite");
}

// ---------------------------------------------------------------------------
// Loss identities
// ---------------------------------------------------------------------------

#[test]
fn loss_identities() {
    let extractor = PerceptualExtractor::<f64>::new(PerceptualConfig::default());
    let clean = synthetic_image(31, 32, 32);
    let compressed = degrade(&clean, QualityFactor::new(5).unwrap(), Subsampling::S420);

    // contrastive(I, I, I^c) = 0 exactly.
    assert_eq!(
        contrastive_loss(&extractor, &clean, &clean, &compressed, 0.1).unwrap(),
        0.0
    );
    // contrastive(I^c, I, I^c) = F(I^c, I)/0.1 exactly.
    let lhs = contrastive_loss(&extractor, &compressed, &clean, &compressed, 0.1).unwrap();
    let rhs = extractor
        .perceptual_distance(&compressed, &clean)
        .unwrap()
        .value()
        / 0.1;
    assert!((lhs - rhs).abs() < 1e-15, "{lhs} vs {rhs}");

    // Weighted total with the configured λ.
    let w = LossWeights::default();
    assert_eq!((w.lambda1, w.lambda2, w.lambda3, w.lambda4), (0.01, 1.0, 0.001, 0.0005));
    let report = total_loss(0.3, 0.7, 1.9, 4.2, &w).unwrap();
    let expect = 0.01 * 0.3 + 1.0 * 0.7 + 0.001 * 1.9 + 0.0005 * 4.2;
    assert!((report.total - expect).abs() < 1e-9);

    // Matching loss on a batch of one is exactly zero.
    let regions = Tensor::<f64>::from_vec(&[2, 3], vec![0.4; 6]).unwrap();
    let global = Tensor::from_vec(&[2], vec![0.1, 0.7]).unwrap();
    let words = Tensor::from_vec(&[2, 4], vec![0.3; 8]).unwrap();
    let sentence = Tensor::from_vec(&[2], vec![0.6, 0.2]).unwrap();
    let (lw, ls) = damsm_loss(
        &[(regions, global)],
        &[(words, sentence)],
        &DamsmGammas::default(),
    )
    .unwrap();
    assert_eq!((lw, ls), (0.0, 0.0));

    // Adversarial losses at D = 0.5.
    let (d, g) = gan_losses(0.5, 0.5);
    assert!((d - 2.0 * 2.0f64.ln()).abs() < 1e-12);
    assert!((g - 2.0f64.ln()).abs() < 1e-12);

    pass("loss identities");
}

// ---------------------------------------------------------------------------
// Fusion contracts
// ---------------------------------------------------------------------------

#[test]
fn fusion_contracts() {
    // GFM preserves the full-scale 128×32×32 feature map.
    let gfm = Gfm::new(GfmConfig {
        channels: 128,
        text_dim: 256,
    });
    let mut store = ParamStore::<f32>::new();
    gfm.init_params(&mut store, &mut Initializer::new(40), "gfm");
    let mut g = Graph::new();
    let x = g.input(Tensor::<f32>::filled(&[128, 32, 32], 0.1));
    let s = g.input(Tensor::filled(&[256], 0.2));
    let y = gfm.forward(&mut g, 0, &store, "gfm", x, s).unwrap();
    assert_eq!(g.value(y).shape(), &[128, 32, 32]);

    // LFM attention columns are probability distributions over words.
    let lfm = Lfm::new(LfmConfig {
        channels: 6,
        text_dim: 8,
    });
    let mut store = ParamStore::<f64>::new();
    lfm.init_params(&mut store, &mut Initializer::new(41), "lfm");
    let mut g = Graph::new();
    let x = g.input(rand_tensor(&[6, 4, 4], 42, -1.0, 1.0));
    let w = g.input(rand_tensor(&[8, 5], 43, -1.0, 1.0));
    let (_, attn) = lfm
        .forward_with_attention(&mut g, 0, &store, "lfm", x, w)
        .unwrap();
    let a = g.value(attn);
    let (t, cols) = a.dims2();
    for c in 0..cols {
        let sum: f64 = (0..t).map(|r| a.at2(r, c)).sum();
        assert!((sum - 1.0).abs() <= 1e-6, "column {c} sums to {sum}");
    }

    // Single word → uniform attention of exactly one.
    let mut g = Graph::new();
    let x = g.input(rand_tensor(&[6, 4, 4], 44, -1.0, 1.0));
    let w1 = g.input(rand_tensor(&[8, 1], 45, -1.0, 1.0));
    let (_, attn) = lfm
        .forward_with_attention(&mut g, 0, &store, "lfm", x, w1)
        .unwrap();
    assert!(g
        .value(attn)
        .data()
        .iter()
        .all(|&v| (v - 1.0).abs() < 1e-12));

    // Word permutation leaves the output unchanged.
    let x_t = rand_tensor(&[6, 4, 4], 46, -1.0, 1.0);
    let w_t = rand_tensor(&[8, 4], 47, -1.0, 1.0);
    let perm = [3usize, 1, 0, 2];
    let mut w_p = Tensor::<f64>::zeros(&[8, 4]);
    for r in 0..8 {
        for (dst, &src) in perm.iter().enumerate() {
            w_p.data_mut()[r * 4 + dst] = w_t.at2(r, src);
        }
    }
    let run = |wt: Tensor<f64>| {
        let mut g = Graph::new();
        let x = g.input(x_t.clone());
        let w = g.input(wt);
        let out = lfm.forward(&mut g, 0, &store, "lfm", x, w).unwrap();
        g.value(out).clone()
    };
    let out_a = run(w_t);
    let out_b = run(w_p);
    let max_diff = out_a
        .data()
        .iter()
        .zip(out_b.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_diff < 1e-12, "permutation changed output by {max_diff}");

    pass("fusion contracts");
}

// ---------------------------------------------------------------------------
// Metrics closed forms and degradation ranking
// ---------------------------------------------------------------------------

#[test]
fn metrics_closed_forms_and_ranking() {
    // PSNR closed form: uniform 1/255 difference → 20·log10(255).
    let a = ImageTensor::<f64>::filled(16, 16, 0.5).unwrap();
    let b = ImageTensor::new(a.tensor().map(|v| v + 1.0 / 255.0)).unwrap();
    let expect = 20.0 * 255.0f64.log10();
    assert!(
        (psnr(&a, &b).unwrap() - 48.1308).abs() < 1e-3,
        "psnr {}",
        psnr(&a, &b).unwrap()
    );
    assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-3);

    let extractor = PerceptualExtractor::<f64>::new(PerceptualConfig::default());

    // fid(X, X) = 0 ± 1e-6.
    let set: Vec<ImageTensor<f64>> = (0..8).map(|i| synthetic_image(i, 32, 32)).collect();
    assert!(extractor.fid_small(&set, &set).unwrap().abs() < 1e-6);

    // Mean-shift closed form on raw feature sets.
    let base: Vec<Vec<f64>> = (0..24)
        .map(|i| (0..6).map(|j| ((i * 6 + j) as f64 * 0.73).sin()).collect())
        .collect();
    let d = [0.25, -0.4, 0.1, 0.0, 0.3, -0.2];
    let shifted: Vec<Vec<f64>> = base
        .iter()
        .map(|f| f.iter().zip(d.iter()).map(|(a, b)| a + b).collect())
        .collect();
    let expect: f64 = d.iter().map(|v| v * v).sum();
    let got = frechet_distance_sets(&base, &shifted).unwrap();
    assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");

    // Both metrics rank QF=1 worse than QF=10 on 32 images.
    let mut originals = Vec::new();
    let mut harsh = Vec::new();
    let mut mild = Vec::new();
    let mut perc_harsh = 0.0;
    let mut perc_mild = 0.0;
    for seed in 0..32 {
        let img = synthetic_image::<f64>(400 + seed, 64, 64);
        let q1 = degrade(&img, QualityFactor::new(1).unwrap(), Subsampling::S420);
        let q10 = degrade(&img, QualityFactor::new(10).unwrap(), Subsampling::S420);
        perc_harsh += extractor.perceptual_distance(&img, &q1).unwrap().value();
        perc_mild += extractor.perceptual_distance(&img, &q10).unwrap().value();
        originals.push(img);
        harsh.push(q1);
        mild.push(q10);
    }
    assert!(
        perc_harsh > perc_mild,
        "perceptual ranking failed: {perc_harsh} ≤ {perc_mild}"
    );
    let fid_harsh = extractor.fid_small(&originals, &harsh).unwrap();
    let fid_mild = extractor.fid_small(&originals, &mild).unwrap();
    assert!(
        fid_harsh > fid_mild,
        "fid ranking failed: {fid_harsh} ≤ {fid_mild}"
    );

    pass("metrics");
}

// ---------------------------------------------------------------------------
// Overfit smoke run (shared fixture)
// ---------------------------------------------------------------------------

const ROUND_EPOCHS: usize = 25; // 50 steps per round at 8 pairs, batch 4
const MAX_STEPS: usize = 2000;

struct OverfitFixture {
    _dir: tempfile::TempDir,
    manifest: DatasetManifest,
    vocab: Vocabulary,
    config: SystemConfig,
    state: TrainState<f32>,
    log_lines: Vec<String>,
    epochs_used: usize,
    l_r_first: f64,
    l_r_last: f64,
    psnr_compressed: f64,
    psnr_deblocked: f64,
    frozen_identical: bool,
    elapsed: Duration,
}

fn overfit_config(vocab_size: usize) -> SystemConfig {
    let mut config = SystemConfig::desk_scale(vocab_size);
    config.train.seed = 7;
    config.train.qf = 5;
    config.train.image_size = 64;
    config.train.batch_size = 4;
    // Short run: hold the learning rate at its starting value throughout.
    config.train.lr_decay_every = 10_000;
    config.train.flip_augment = false;
    config
}

fn overfit_fixture() -> &'static OverfitFixture {
    static FIXTURE: OnceLock<OverfitFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 8, 64, 42).unwrap();
        let manifest = load_dataset(dir.path()).unwrap();
        let vocab = build_vocab(&manifest, 1).unwrap();
        let config = overfit_config(vocab.size());
        let started = Instant::now();

        // Stage 1: brief encoder pretraining (100 steps).
        let mut state: TrainState<f32> = {
            let mut cfg = config.clone();
            cfg.train.epochs = 50;
            TrainState::new(cfg, vocab.clone()).unwrap()
        };
        let mut damsm_log = TrainLog::memory();
        pretrain_damsm(&mut state, &manifest, &mut damsm_log).unwrap();
        state.reset_stage_progress();

        let frozen_text = state.text_store.clone();
        let frozen_image = state.image_store.clone();
        let frozen_perc = state.perceptual.store().clone();

        let qf = QualityFactor::new(config.train.qf).unwrap();
        let baseline = evaluate(&state, &manifest, qf).unwrap();

        // Stage 2 in rounds, stopping once both criteria hold.
        let mut log = TrainLog::memory();
        let mut epochs_used = 0usize;
        let mut psnr_deblocked = baseline.deblocked.psnr;
        while epochs_used * 2 < MAX_STEPS {
            epochs_used += ROUND_EPOCHS;
            state.config.train.epochs = epochs_used;
            train_adversarial(&mut state, &manifest, &mut log).unwrap();
            let report = evaluate(&state, &manifest, qf).unwrap();
            psnr_deblocked = report.deblocked.psnr;
            let l_r_first: f64 = serde_json::from_str::<serde_json::Value>(&log.lines[0])
                .unwrap()["l_r"]
                .as_f64()
                .unwrap();
            let l_r_last: f64 =
                serde_json::from_str::<serde_json::Value>(log.lines.last().unwrap()).unwrap()
                    ["l_r"]
                    .as_f64()
                    .unwrap();
            let halved = l_r_last <= 0.5 * l_r_first;
            let gained = psnr_deblocked >= baseline.compressed.psnr + 0.5;
            if halved && gained {
                break;
            }
        }
        let elapsed = started.elapsed();

        let l_r_first: f64 = serde_json::from_str::<serde_json::Value>(&log.lines[0]).unwrap()
            ["l_r"]
            .as_f64()
            .unwrap();
        let l_r_last: f64 = serde_json::from_str::<serde_json::Value>(log.lines.last().unwrap())
            .unwrap()["l_r"]
            .as_f64()
            .unwrap();
        let frozen_identical = state.text_store.values_identical(&frozen_text)
            && state.image_store.values_identical(&frozen_image)
            && state.perceptual.store().values_identical(&frozen_perc);

        OverfitFixture {
            _dir: dir,
            manifest,
            vocab,
            config,
            state,
            log_lines: log.lines,
            epochs_used,
            l_r_first,
            l_r_last,
            psnr_compressed: baseline.compressed.psnr,
            psnr_deblocked,
            frozen_identical,
            elapsed,
        }
    })
}

#[test]
fn overfit_smoke() {
    let fx = overfit_fixture();
    assert!(
        fx.log_lines.len() <= MAX_STEPS,
        "used {} steps",
        fx.log_lines.len()
    );
    assert!(
        fx.l_r_last <= 0.5 * fx.l_r_first,
        "reconstruction loss fell only {:.1}% ({} → {})",
        100.0 * (1.0 - fx.l_r_last / fx.l_r_first),
        fx.l_r_first,
        fx.l_r_last
    );
    assert!(
        fx.psnr_deblocked >= fx.psnr_compressed + 0.5,
        "PSNR gain {:.3} dB < 0.5 dB",
        fx.psnr_deblocked - fx.psnr_compressed
    );
    assert!(fx.frozen_identical, "frozen stores changed during stage 2");
    assert!(
        fx.elapsed < Duration::from_secs(30 * 60),
        "overfit run took {:?}",
        fx.elapsed
    );
    println!(
        "  overfit: {} steps, L_R {:.4}→{:.4}, PSNR {:.2}→{:.2} dB, {:?}",
        fx.log_lines.len(),
        fx.l_r_first,
        fx.l_r_last,
        fx.psnr_compressed,
        fx.psnr_deblocked,
        fx.elapsed
    );
    pass("overfit smoke");
}

// ---------------------------------------------------------------------------
// Text sensitivity on the trained model
// ---------------------------------------------------------------------------

#[test]
fn text_sensitivity() {
    let fx = overfit_fixture();
    let qf = QualityFactor::new(fx.config.train.qf).unwrap();
    let clean = synthetic_image::<f32>(977, 64, 64);
    let compressed = degrade(&clean, qf, fx.config.train.subsampling);

    let cap_red = fx.state.encode_caption("a red bird with a small beak").unwrap();
    let cap_blue = fx.state.encode_caption("a blue bird with a small beak").unwrap();
    let out_red = fx.state.deblock(&compressed, &cap_red).unwrap();
    let out_blue = fx.state.deblock(&compressed, &cap_blue).unwrap();

    let dist = fx
        .state
        .perceptual
        .perceptual_distance(&out_red, &out_blue)
        .unwrap()
        .value();
    assert!(dist > 0.0, "caption change left output perceptually identical");

    let hash = |img: &ImageTensor<f32>| {
        let mut bytes = Vec::new();
        img.to_rgb8()
            .write_to(
                &mut std::io::Cursor::new(&mut bytes),
                image::ImageFormat::Png,
            )
            .unwrap();
        sha2::Sha256::digest(&bytes)
    };
    assert_ne!(
        hash(&out_red),
        hash(&out_blue),
        "payload hashes identical across captions"
    );
    pass("text sensitivity");
}

// ---------------------------------------------------------------------------
// Determinism
// ---------------------------------------------------------------------------

#[test]
fn determinism() {
    let fx = overfit_fixture();

    // A second run of the identical schedule reproduces the loss log.
    let mut cfg = fx.config.clone();
    cfg.train.epochs = 50;
    let mut replay: TrainState<f32> = TrainState::new(cfg, fx.vocab.clone()).unwrap();
    let mut damsm_log = TrainLog::memory();
    pretrain_damsm(&mut replay, &fx.manifest, &mut damsm_log).unwrap();
    replay.reset_stage_progress();
    replay.config.train.epochs = fx.epochs_used;
    let mut replay_log = TrainLog::memory();
    train_adversarial(&mut replay, &fx.manifest, &mut replay_log).unwrap();
    assert_eq!(
        replay_log.lines, fx.log_lines,
        "identically seeded overfit runs diverged"
    );

    // Mid-run checkpoint reload continues identically.
    let half_epochs = (fx.epochs_used / 2).max(1);
    let mut half_cfg = fx.config.clone();
    half_cfg.train.epochs = 50;
    let mut half: TrainState<f32> = TrainState::new(half_cfg, fx.vocab.clone()).unwrap();
    let mut tmp = TrainLog::memory();
    pretrain_damsm(&mut half, &fx.manifest, &mut tmp).unwrap();
    half.reset_stage_progress();
    half.config.train.epochs = half_epochs;
    let mut first_log = TrainLog::memory();
    train_adversarial(&mut half, &fx.manifest, &mut first_log).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    half.to_checkpoint().save(&path).unwrap();
    let mut resumed: TrainState<f32> =
        TrainState::from_checkpoint(deblock_core::checkpoint::Checkpoint::load(&path).unwrap())
            .unwrap();
    resumed.config.train.epochs = fx.epochs_used;
    let mut resume_log = TrainLog::memory();
    train_adversarial(&mut resumed, &fx.manifest, &mut resume_log).unwrap();

    let mut joined = first_log.lines.clone();
    joined.extend(resume_log.lines);
    assert_eq!(
        joined, fx.log_lines,
        "checkpoint resume diverged from the uninterrupted run"
    );
    pass("determinism");
}
