use deblock_core::data::{build_vocab, load_dataset};
use deblock_core::jpeg::QualityFactor;
use deblock_core::synth::write_synthetic_dataset;
use deblock_core::trainer::*;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), 8, 64, 42).unwrap();
    let manifest = load_dataset(dir.path()).unwrap();
    let vocab = build_vocab(&manifest, 1).unwrap();
    let mut config = SystemConfig::desk_scale(vocab.size());
    config.train.lr_decay_every = 10_000;
    config.train.flip_augment = false;
    config.train.seed = 7;

    // Short encoder pretrain.
    config.train.epochs = 50; // 100 steps
    let mut state: TrainState<f32> = TrainState::new(config, vocab).unwrap();
    let mut log = TrainLog::memory();
    let t0 = std::time::Instant::now();
    pretrain_damsm(&mut state, &manifest, &mut log).unwrap();
    println!("damsm 100 steps: {:.1?}", t0.elapsed());
    state.reset_stage_progress();

    let qf = QualityFactor::new(5).unwrap();
    let base = evaluate(&state, &manifest, qf).unwrap();
    println!("compressed psnr {:.3}", base.compressed.psnr);

    let mut l_r0 = None;
    for round in 1..=12 {
        state.config.train.epochs = (round * 25) as usize; // +50 steps per round
        let mut log = TrainLog::memory();
        train_adversarial(&mut state, &manifest, &mut log).unwrap();
        if l_r0.is_none() {
            let v: serde_json::Value = serde_json::from_str(&log.lines[0]).unwrap();
            l_r0 = Some(v["l_r"].as_f64().unwrap());
        }
        let v: serde_json::Value = serde_json::from_str(log.lines.last().unwrap()).unwrap();
        let report = evaluate(&state, &manifest, qf).unwrap();
        println!(
            "steps {:4}: l_r {:.4} (start {:.4}) | psnr deblocked {:.3} vs compressed {:.3} (gain {:+.3} dB) | {:.0?}",
            round * 50,
            v["l_r"].as_f64().unwrap(),
            l_r0.unwrap(),
            report.deblocked.psnr,
            report.compressed.psnr,
            report.deblocked.psnr - report.compressed.psnr,
            t0.elapsed()
        );
    }
}
