//! Dataset ingestion and deterministic batch assembly.
//!
//! A dataset root holds `images/` and `captions/` with matching file stems;
//! each caption file contributes one training pair per line.

use crate::encoders::{tokenize, Caption, Vocabulary};
use crate::error::{Error, Result};
use crate::image::{crop_resize_square, decode_rgb8, flip_horizontal, ImageTensor};
use crate::jpeg::{degrade, QualityFactor, Subsampling};
use crate::tensor::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

/// One image with its caption lines.
#[derive(Clone, Debug)]
pub struct DatasetEntry {
    pub stem: String,
    pub image_path: PathBuf,
    pub captions: Vec<String>,
}

/// Deterministically ordered dataset description.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
    /// Flattened (entry index, caption line) training pairs.
    pub pairs: Vec<(usize, usize)>,
}

const IMAGE_EXTS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Scans `root/images` and `root/captions`, pairing by stem. Every image
/// must have a caption file with at least one non-empty line.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    let images_dir = root.join("images");
    let captions_dir = root.join("captions");
    if !images_dir.is_dir() || !captions_dir.is_dir() {
        return Err(Error::data(format!(
            "dataset root {} must contain images/ and captions/",
            root.display()
        )));
    }
    let mut stems: Vec<(String, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(&images_dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_lowercase());
        if ext.as_deref().is_some_and(|e| IMAGE_EXTS.contains(&e)) {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::data(format!("unusable file name {}", path.display())))?
                .to_string();
            stems.push((stem, path));
        }
    }
    if stems.is_empty() {
        return Err(Error::data(format!(
            "no images found under {}",
            images_dir.display()
        )));
    }
    stems.sort_by(|a, b| a.0.cmp(&b.0));

    let mut entries = Vec::with_capacity(stems.len());
    let mut pairs = Vec::new();
    for (idx, (stem, image_path)) in stems.into_iter().enumerate() {
        let caption_path = captions_dir.join(format!("{stem}.txt"));
        if !caption_path.is_file() {
            return Err(Error::data(format!(
                "image `{stem}` has no caption file {}",
                caption_path.display()
            )));
        }
        let text = std::fs::read_to_string(&caption_path)?;
        let captions: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if captions.is_empty() {
            return Err(Error::data(format!("caption file for `{stem}` is empty")));
        }
        for line in 0..captions.len() {
            pairs.push((idx, line));
        }
        entries.push(DatasetEntry {
            stem,
            image_path,
            captions,
        });
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
        pairs,
    })
}

/// Builds a vocabulary from all caption lines: ids by descending frequency,
/// ties broken lexicographically; tokens below `min_freq` are dropped.
pub fn build_vocab(manifest: &DatasetManifest, min_freq: usize) -> Result<Vocabulary> {
    let mut freq: HashMap<String, usize> = HashMap::new();
    for entry in &manifest.entries {
        for caption in &entry.captions {
            for token in tokenize(caption) {
                *freq.entry(token).or_insert(0) += 1;
            }
        }
    }
    if freq.is_empty() {
        return Err(Error::data("caption corpus produced no tokens"));
    }
    let mut tokens: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(_, n)| *n >= min_freq.max(1))
        .collect();
    tokens.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocabulary::from_tokens(tokens.into_iter().map(|(t, _)| t)))
}

/// A ready training sample: clean image, its degraded counterpart, caption.
pub struct PreparedPair<F> {
    pub clean: ImageTensor<F>,
    pub compressed: ImageTensor<F>,
    pub caption: Caption,
}

/// Center-crops to a square, resizes to `image_size`, optionally mirrors,
/// degrades at `qf`, and tokenizes the chosen caption line.
#[allow(clippy::too_many_arguments)]
pub fn prepare_pair<F: Scalar>(
    manifest: &DatasetManifest,
    pair: (usize, usize),
    vocab: &Vocabulary,
    image_size: usize,
    max_caption_len: usize,
    qf: QualityFactor,
    subsampling: Subsampling,
    flip: bool,
) -> Result<PreparedPair<F>> {
    let entry = manifest
        .entries
        .get(pair.0)
        .ok_or_else(|| Error::data(format!("pair entry {} out of range", pair.0)))?;
    let caption_text = entry
        .captions
        .get(pair.1)
        .ok_or_else(|| Error::data(format!("caption line {} out of range", pair.1)))?;
    let rgb = decode_rgb8(&entry.image_path)?;
    let mut clean = crop_resize_square::<F>(&rgb, image_size)?;
    if flip {
        clean = flip_horizontal(&clean);
    }
    let compressed = degrade(&clean, qf, subsampling);
    let caption = vocab.encode(caption_text, max_caption_len)?;
    Ok(PreparedPair {
        clean,
        compressed,
        caption,
    })
}

/// Seeded RNG stream for one epoch; all training-time randomness derives
/// from it, making batch assembly a pure function of (seed, epoch).
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    rng
}

/// Pair order for one epoch: a seeded Fisher-Yates shuffle.
pub fn batch_order(n_pairs: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = epoch_rng(seed, epoch);
    let mut order: Vec<usize> = (0..n_pairs).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use crate::synth::write_synthetic_dataset;

    fn temp_dataset(n: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), n, 64, 99).unwrap();
        dir
    }

    #[test]
    fn empty_dir_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).is_err());
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("captions")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn manifest_is_sorted_and_complete() {
        let dir = temp_dataset(8);
        let manifest = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 8);
        assert_eq!(manifest.pairs.len(), 8);
        let stems: Vec<&str> = manifest.entries.iter().map(|e| e.stem.as_str()).collect();
        let mut sorted = stems.clone();
        sorted.sort();
        assert_eq!(stems, sorted);
    }

    #[test]
    fn missing_caption_names_stem() {
        let dir = temp_dataset(3);
        std::fs::remove_file(dir.path().join("captions/sample_001.txt")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("sample_001"), "{err}");
    }

    #[test]
    fn multi_line_captions_make_multiple_pairs() {
        let dir = temp_dataset(2);
        std::fs::write(
            dir.path().join("captions/sample_000.txt"),
            "a red bird\na crimson bird\na small red bird\n",
        )
        .unwrap();
        let manifest = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.pairs.len(), 3 + 1);
        assert_eq!(manifest.entries[0].captions.len(), 3);
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographic() {
        let dir = temp_dataset(2);
        std::fs::write(dir.path().join("captions/sample_000.txt"), "a red bird\n").unwrap();
        std::fs::write(dir.path().join("captions/sample_001.txt"), "a red flower\n").unwrap();
        let manifest = load_dataset(dir.path()).unwrap();
        let vocab = build_vocab(&manifest, 1).unwrap();
        // "a" and "red" (freq 2) take the two lowest non-reserved ids,
        // lexicographically ordered; then "bird", "flower".
        assert_eq!(vocab.id_of("a"), 2);
        assert_eq!(vocab.id_of("red"), 3);
        assert_eq!(vocab.id_of("bird"), 4);
        assert_eq!(vocab.id_of("flower"), 5);
        assert_eq!(vocab.id_of("zebra"), crate::encoders::UNK_ID);
    }

    #[test]
    fn vocab_id_token_round_trip() {
        let dir = temp_dataset(4);
        let manifest = load_dataset(dir.path()).unwrap();
        let vocab = build_vocab(&manifest, 1).unwrap();
        for id in 2..vocab.size() {
            let tok = vocab.token_of(id).unwrap().to_string();
            assert_eq!(vocab.id_of(&tok), id);
        }
    }

    #[test]
    fn prepare_pair_shapes_and_determinism() {
        let dir = temp_dataset(2);
        let manifest = load_dataset(dir.path()).unwrap();
        let vocab = build_vocab(&manifest, 1).unwrap();
        let qf = QualityFactor::new(5).unwrap();
        let a: PreparedPair<f32> = prepare_pair(
            &manifest,
            (0, 0),
            &vocab,
            64,
            18,
            qf,
            Subsampling::S420,
            false,
        )
        .unwrap();
        assert_eq!(a.clean.tensor().shape(), &[3, 64, 64]);
        let b: PreparedPair<f32> = prepare_pair(
            &manifest,
            (0, 0),
            &vocab,
            64,
            18,
            qf,
            Subsampling::S420,
            false,
        )
        .unwrap();
        assert_eq!(a.clean.tensor().data(), b.clean.tensor().data());
        assert_eq!(a.compressed.tensor().data(), b.compressed.tensor().data());
    }

    #[test]
    fn harsher_qf_hurts_psnr() {
        let dir = temp_dataset(1);
        let manifest = load_dataset(dir.path()).unwrap();
        let vocab = build_vocab(&manifest, 1).unwrap();
        let mk = |qf: u8| {
            let p: PreparedPair<f64> = prepare_pair(
                &manifest,
                (0, 0),
                &vocab,
                64,
                18,
                QualityFactor::new(qf).unwrap(),
                Subsampling::S420,
                false,
            )
            .unwrap();
            psnr(&p.clean, &p.compressed).unwrap()
        };
        assert!(mk(1) < mk(10));
    }

    #[test]
    fn batch_order_is_pure_function_of_seed_epoch() {
        let a = batch_order(100, 7, 3);
        let b = batch_order(100, 7, 3);
        assert_eq!(a, b);
        assert_ne!(batch_order(100, 7, 4), a);
        assert_ne!(batch_order(100, 8, 3), a);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }
}
