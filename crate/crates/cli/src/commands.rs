//! Subcommand implementations shared by the binary and its tests.

use crate::with_aligned;
use deblock_core::checkpoint::{file_hash, Checkpoint};
use deblock_core::data::{build_vocab, load_dataset};
use deblock_core::encoders::tokenize;
use deblock_core::fusion::attention_row_to_gray;
use deblock_core::jpeg::{degrade, QualityFactor, Subsampling};
use deblock_core::trainer::{
    evaluate, pretrain_damsm, train_adversarial, Stage, SystemConfig, TrainLog, TrainState,
};
use deblock_core::{Error, Result};
use std::path::{Path, PathBuf};

pub struct DegradeArgs {
    pub qf: u8,
    pub subsampling: Subsampling,
    pub input: PathBuf,
    pub output: PathBuf,
}

pub fn degrade_cmd(args: &DegradeArgs) -> Result<()> {
    let qf = QualityFactor::new(args.qf)?;
    let rgb = deblock_core::image::decode_rgb8(&args.input)?;
    let out = with_aligned(&rgb, |img| Ok(degrade(img, qf, args.subsampling)))?;
    out.save_with_format(&args.output, image::ImageFormat::Png)?;
    Ok(())
}

pub struct TrainArgs {
    pub stage: Stage,
    pub data: PathBuf,
    pub out: PathBuf,
    pub qf: u8,
    pub epochs: usize,
    pub seed: u64,
    pub image_size: usize,
    pub batch_size: usize,
    pub lr_decay_every: usize,
    pub flip_augment: bool,
    pub encoders_ckpt: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    let manifest = load_dataset(&args.data)?;
    let mut log = match &args.log {
        Some(path) => TrainLog::to_file(path)?,
        None => TrainLog::memory(),
    };

    let mut state: TrainState<f32> = if let Some(resume) = &args.resume {
        TrainState::from_checkpoint(Checkpoint::load(resume)?)?
    } else {
        match (args.stage, &args.encoders_ckpt) {
            (Stage::Adversarial, Some(path)) => {
                let mut st = TrainState::from_checkpoint(Checkpoint::load(path)?)?;
                st.reset_stage_progress();
                st
            }
            (Stage::Adversarial, None) => {
                return Err(Error::domain(
                    "adversarial stage needs --encoders-ckpt (or --resume)",
                ));
            }
            (Stage::Damsm, _) => {
                let vocab = build_vocab(&manifest, 1)?;
                let mut config = SystemConfig::desk_scale(vocab.size());
                config.train.image_size = args.image_size;
                config.generator.input_size = args.image_size;
                config.image_encoder.min_side = args.image_size.min(64);
                TrainState::new(config, vocab)?
            }
        }
    };

    state.config.train.qf = args.qf;
    state.config.train.epochs = args.epochs;
    state.config.train.seed = args.seed;
    state.config.train.batch_size = args.batch_size;
    state.config.train.lr_decay_every = args.lr_decay_every;
    state.config.train.flip_augment = args.flip_augment;
    if state.config.train.image_size != args.image_size {
        return Err(Error::domain(format!(
            "checkpoint was trained at image size {}, requested {}",
            state.config.train.image_size, args.image_size
        )));
    }

    match args.stage {
        Stage::Damsm => pretrain_damsm(&mut state, &manifest, &mut log)?,
        Stage::Adversarial => train_adversarial(&mut state, &manifest, &mut log)?,
    }
    state.to_checkpoint().save(&args.out)?;
    eprintln!(
        "saved checkpoint to {} (config hash {})",
        args.out.display(),
        state.config_hash()
    );
    Ok(())
}

pub struct DeblockArgs {
    pub ckpt: PathBuf,
    pub input: PathBuf,
    pub caption: String,
    pub qf: Option<u8>,
    pub output: PathBuf,
    pub attention_dir: Option<PathBuf>,
}

pub fn deblock_cmd(args: &DeblockArgs) -> Result<()> {
    let state: TrainState<f32> = TrainState::from_checkpoint(Checkpoint::load(&args.ckpt)?)?;
    let caption = state.encode_caption(&args.caption)?;
    let rgb = deblock_core::image::decode_rgb8(&args.input)?;

    let out = with_aligned(&rgb, |img| {
        let compressed = match args.qf {
            Some(qf) => degrade(img, QualityFactor::new(qf)?, state.config.train.subsampling),
            None => img.clone(),
        };
        if let Some(dir) = &args.attention_dir {
            std::fs::create_dir_all(dir)?;
            let (deblocked, attentions) = state.deblock_with_attention(&compressed, &caption)?;
            dump_attention(dir, &args.caption, &attentions)?;
            Ok(deblocked)
        } else {
            state.deblock(&compressed, &caption)
        }
    })?;
    out.save_with_format(&args.output, image::ImageFormat::Png)?;
    Ok(())
}

fn dump_attention(
    dir: &Path,
    caption: &str,
    attentions: &[(usize, usize, deblock_core::Tensor<f32>)],
) -> Result<()> {
    let words = tokenize(caption);
    for (scale, (h, w, map)) in attentions.iter().enumerate() {
        let (t, _) = map.dims2();
        for word_idx in 0..t {
            let row: Vec<f64> = (0..h * w)
                .map(|i| map.at2(word_idx, i) as f64)
                .collect();
            let gray = attention_row_to_gray(&row, *h, *w);
            let label = words
                .get(word_idx)
                .map(String::as_str)
                .unwrap_or("pad");
            gray.save_with_format(
                dir.join(format!("scale{scale}_word{word_idx}_{label}.png")),
                image::ImageFormat::Png,
            )?;
        }
    }
    Ok(())
}

pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub qf: u8,
    pub expect_config_hash: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let state: TrainState<f32> = TrainState::from_checkpoint(Checkpoint::load(&args.ckpt)?)?;
    if let Some(expected) = &args.expect_config_hash {
        let found = state.config_hash();
        if *expected != found {
            return Err(Error::ConfigMismatch {
                expected: expected.clone(),
                found,
            });
        }
    }
    let manifest = load_dataset(&args.data)?;
    let report = evaluate(&state, &manifest, QualityFactor::new(args.qf)?)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::data(format!("report serialization: {e}")))?;
    match &args.out {
        Some(path) => std::fs::write(path, &json)?,
        None => println!("{json}"),
    }
    Ok(())
}

pub struct ServeArgs {
    pub ckpt: PathBuf,
    pub port: u16,
}

pub fn serve_cmd(args: &ServeArgs) -> Result<()> {
    let app_state = crate::service::AppState::from_checkpoint_file(&args.ckpt)?;
    eprintln!(
        "serving checkpoint {} (hash {}) on port {}",
        args.ckpt.display(),
        app_state.checkpoint_hash,
        args.port
    );
    let router = crate::service::build_router(std::sync::Arc::new(app_state));
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(Error::Io)?;
    rt.block_on(async move {
        let addr = std::net::SocketAddr::from(([0, 0, 0, 0], args.port));
        let listener = tokio::net::TcpListener::bind(addr).await?;
        axum::serve(listener, router).await?;
        Ok::<(), std::io::Error>(())
    })
    .map_err(Error::Io)?;
    Ok(())
}

/// Convenience used by tests: SHA-256 of a checkpoint file.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    file_hash(path)
}
