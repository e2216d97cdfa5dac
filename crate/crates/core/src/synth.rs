//! Seeded synthetic images and captioned datasets.
//!
//! Stand-ins for natural photographs in tests, benchmarks and demos: smooth
//! multi-frequency color fields with mild texture, so block-transform
//! degradation behaves the way it does on real photos.

use crate::error::Result;
use crate::image::ImageTensor;
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;
use std::path::Path;

/// Smooth random image: per-channel sum of low-frequency cosine waves plus a
/// faint high-frequency component, squeezed into [0.02, 0.98].
pub fn synthetic_image<F: Scalar>(seed: u64, height: usize, width: usize) -> ImageTensor<F> {
    synthetic_image_tinted(seed, height, width, None)
}

/// Like [`synthetic_image`] but blended toward a dominant color.
pub fn synthetic_image_tinted<F: Scalar>(
    seed: u64,
    height: usize,
    width: usize,
    tint: Option<[f64; 3]>,
) -> ImageTensor<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![F::zero(); 3 * height * width];
    for c in 0..3 {
        let waves: Vec<(f64, f64, f64, f64)> = (0..5)
            .map(|_| {
                let fx = rng.random_range(0.5..5.0) / width as f64;
                let fy = rng.random_range(0.5..5.0) / height as f64;
                let phase = rng.random_range(0.0..TAU);
                let amp = rng.random_range(0.05..0.22);
                (fx, fy, phase, amp)
            })
            .collect();
        // High-frequency shimmer keeps near-lossless settings honest.
        let hf_fx = rng.random_range(0.15..0.45);
        let hf_fy = rng.random_range(0.15..0.45);
        let hf_phase = rng.random_range(0.0..TAU);
        for y in 0..height {
            for x in 0..width {
                let mut v = 0.5;
                for &(fx, fy, phase, amp) in &waves {
                    v += amp * (TAU * (fx * x as f64 + fy * y as f64) + phase).cos();
                }
                v += 0.015 * (TAU * (hf_fx * x as f64 + hf_fy * y as f64) + hf_phase).cos();
                let mut v = 0.5 + 0.48 * (v - 0.5).clamp(-1.0, 1.0);
                if let Some(t) = tint {
                    v = 0.45 * v + 0.55 * t[c];
                }
                data[(c * height + y) * width + x] = F::from_f64c(v.clamp(0.02, 0.98));
            }
        }
    }
    ImageTensor::new(Tensor::from_vec(&[3, height, width], data).unwrap()).unwrap()
}

const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.8, 0.2]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.9, 0.85, 0.15]),
    ("purple", [0.6, 0.2, 0.75]),
    ("orange", [0.9, 0.55, 0.1]),
    ("white", [0.92, 0.92, 0.92]),
    ("black", [0.1, 0.1, 0.1]),
];

const SUBJECTS: [&str; 4] = ["bird", "flower", "boat", "house"];
const DETAILS: [&str; 4] = [
    "with a small beak",
    "with soft petals",
    "near the water",
    "under a clear sky",
];

/// Color name and RGB tint for palette entry `i`.
pub fn palette_color(i: usize) -> (&'static str, [f64; 3]) {
    PALETTE[i % PALETTE.len()]
}

/// Deterministic caption like "a red bird with a small beak".
pub fn synthetic_caption(i: usize) -> String {
    let (color, _) = palette_color(i);
    format!(
        "a {} {} {}",
        color,
        SUBJECTS[i % SUBJECTS.len()],
        DETAILS[(i / 2) % DETAILS.len()]
    )
}

/// Writes `n` tinted images plus matching single-line caption files in the
/// `images/` + `captions/` layout the dataset loader expects.
pub fn write_synthetic_dataset(root: &Path, n: usize, size: usize, seed: u64) -> Result<()> {
    let images = root.join("images");
    let captions = root.join("captions");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&captions)?;
    for i in 0..n {
        let (_, tint) = palette_color(i);
        let img: ImageTensor<f32> =
            synthetic_image_tinted(seed.wrapping_add(i as u64), size, size, Some(tint));
        img.save_png(&images.join(format!("sample_{i:03}.png")))?;
        std::fs::write(
            captions.join(format!("sample_{i:03}.txt")),
            synthetic_caption(i) + "\n",
        )?;
    }
    Ok(())
}
