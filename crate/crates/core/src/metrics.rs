//! Quality measures: a differentiable perceptual distance over a fixed
//! seeded feature extractor, PSNR, and a small-extractor Fréchet distance
//! between image sets.
//!
//! The extractor weights are drawn once from a recorded seed and never
//! trained. That preserves everything the losses rely on — differentiability,
//! distance zero on identical inputs, reference-based scoring — without
//! pretrained weights. A checkpoint-based import hook can swap in external
//! extractor weights.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{Initializer, ParamStore};
use crate::nn::{conv_layer, init_conv};
use crate::tensor::Scalar;
use nalgebra::{DMatrix, DVector};

/// Channel-normalization epsilon inside the extractor.
const NORM_EPS: f64 = 1e-10;

/// Reference-based quality score; zero means perceptually identical.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QualityScore(f64);

impl QualityScore {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::numeric(format!(
                "quality score must be finite and ≥ 0, got {value}"
            )));
        }
        Ok(QualityScore(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Configuration of the fixed extractor; the seed is part of the recorded
/// training configuration.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerceptualConfig {
    pub seed: u64,
    pub stage_channels: [usize; 3],
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            seed: 0x9E37_79B9,
            stage_channels: [16, 32, 64],
        }
    }
}

/// Three-stage conv pyramid with frozen seeded weights and channel-unit
/// normalized features at every stage.
pub struct PerceptualExtractor<F> {
    config: PerceptualConfig,
    store: ParamStore<F>,
}

impl<F: Scalar> PerceptualExtractor<F> {
    pub fn new(config: PerceptualConfig) -> Self {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(config.seed);
        let [c1, c2, c3] = config.stage_channels;
        init_conv(&mut store, &mut init, "stage1", c1, 3, 3);
        init_conv(&mut store, &mut init, "stage2", c2, c1, 3);
        init_conv(&mut store, &mut init, "stage3", c3, c2, 3);
        store.set_frozen_all(true);
        PerceptualExtractor { config, store }
    }

    /// Import hook for externally supplied extractor weights; shapes must
    /// match the configuration.
    pub fn from_store(config: PerceptualConfig, store: ParamStore<F>) -> Result<Self> {
        let fresh = PerceptualExtractor::<F>::new(config.clone());
        for (name, entry) in fresh.store.iter() {
            let Some(t) = store.try_get(name) else {
                return Err(Error::Checkpoint(format!(
                    "perceptual store missing `{name}`"
                )));
            };
            if t.shape() != entry.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "perceptual `{name}` shape {:?} ≠ expected {:?}",
                    t.shape(),
                    entry.value.shape()
                )));
            }
        }
        let mut store = store;
        store.set_frozen_all(true);
        Ok(PerceptualExtractor { config, store })
    }

    pub fn config(&self) -> &PerceptualConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    /// Normalized feature maps of the three stages, on an autodiff graph.
    pub fn features(&self, g: &mut Graph<F>, tag: u32, x: Var) -> [Var; 3] {
        let s1 = conv_layer(g, tag, &self.store, "stage1", x, 1, 1);
        let s1a = g.tanh(s1);
        let s2 = conv_layer(g, tag, &self.store, "stage2", s1a, 2, 1);
        let s2a = g.tanh(s2);
        let s3 = conv_layer(g, tag, &self.store, "stage3", s2a, 2, 1);
        let s3a = g.tanh(s3);
        [
            g.normalize_channels(s1a, NORM_EPS),
            g.normalize_channels(s2a, NORM_EPS),
            g.normalize_channels(s3a, NORM_EPS),
        ]
    }

    /// Differentiable perceptual distance between two image vars: per stage,
    /// mean squared difference of unit-normalized features, summed.
    pub fn distance_var(&self, g: &mut Graph<F>, tag: u32, a: Var, b: Var) -> Var {
        let fa = self.features(g, tag, a);
        let fb = self.features(g, tag, b);
        self.distance_from_features(g, &fa, &fb)
    }

    /// Distance from already-extracted stage features, so callers comparing
    /// one image against several references extract it only once.
    pub fn distance_from_features(&self, g: &mut Graph<F>, fa: &[Var; 3], fb: &[Var; 3]) -> Var {
        let mut total: Option<Var> = None;
        for (&va, &vb) in fa.iter().zip(fb.iter()) {
            let diff = g.sub(va, vb);
            let sq = g.square(diff);
            let m = g.mean(sq);
            total = Some(match total {
                Some(t) => g.add(t, m),
                None => m,
            });
        }
        total.unwrap()
    }

    /// Perceptual distance between two images of identical shape.
    pub fn perceptual_distance(
        &self,
        a: &ImageTensor<F>,
        b: &ImageTensor<F>,
    ) -> Result<QualityScore> {
        if a.tensor().shape() != b.tensor().shape() {
            return Err(Error::shape(format!(
                "perceptual_distance shapes {:?} vs {:?}",
                a.tensor().shape(),
                b.tensor().shape()
            )));
        }
        let mut g = Graph::new();
        let va = g.input(a.tensor().clone());
        let vb = g.input(b.tensor().clone());
        let d = self.distance_var(&mut g, 0, va, vb);
        QualityScore::new(g.value(d).item().to_f64c().max(0.0))
    }

    /// Per-image embedding for set statistics: each stage's normalized
    /// features globally averaged, concatenated.
    pub fn pooled_features(&self, img: &ImageTensor<F>) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.input(img.tensor().clone());
        let stages = self.features(&mut g, 0, x);
        let mut out = Vec::new();
        for s in stages {
            let pooled = g.gap(s);
            out.extend(g.value(pooled).data().iter().map(|v| v.to_f64c()));
        }
        out
    }

    /// Fréchet distance between Gaussian fits of pooled features of two
    /// image sets. Each set needs at least two images.
    pub fn fid_small(&self, set_a: &[ImageTensor<F>], set_b: &[ImageTensor<F>]) -> Result<f64> {
        let fa: Vec<Vec<f64>> = set_a.iter().map(|i| self.pooled_features(i)).collect();
        let fb: Vec<Vec<f64>> = set_b.iter().map(|i| self.pooled_features(i)).collect();
        frechet_distance_sets(&fa, &fb)
    }
}

/// PSNR report value for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB on the [0,1] scale, capped at 100 dB.
pub fn psnr<F: Scalar>(a: &ImageTensor<F>, b: &ImageTensor<F>) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shape(format!(
            "psnr shapes {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    let n = a.tensor().len() as f64;
    let mse: f64 = a
        .tensor()
        .data()
        .iter()
        .zip(b.tensor().data())
        .map(|(&x, &y)| {
            let d = x.to_f64c() - y.to_f64c();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Negative-eigenvalue tolerance in the matrix square root.
const PSD_TOL: f64 = 1e-8;

/// Mean and sample covariance of a feature set.
fn fit_gaussian(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if features.len() < 2 {
        return Err(Error::domain(format!(
            "need at least 2 samples to fit a Gaussian, got {}",
            features.len()
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::shape("inconsistent feature dimensions"));
    }
    let n = features.len() as f64;
    let mut mean = DVector::zeros(d);
    for f in features {
        mean += DVector::from_column_slice(f);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(f) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    Ok((mean, cov))
}

/// Symmetric PSD square root via eigendecomposition.
fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -PSD_TOL {
            return Err(Error::numeric(format!(
                "covariance not PSD: eigenvalue {v}"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let d = DMatrix::from_diagonal(&vals);
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussians fit to two feature sets:
/// `||μ₁−μ₂||² + Tr(Σ₁+Σ₂−2·(Σ₁Σ₂)^½)`.
pub fn frechet_distance_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu1, cov1) = fit_gaussian(a)?;
    let (mu2, cov2) = fit_gaussian(b)?;
    if mu1.len() != mu2.len() {
        return Err(Error::shape("feature dimensions differ between sets"));
    }
    let diff = &mu1 - &mu2;
    let mean_term = diff.dot(&diff);

    // Tr((Σ₁Σ₂)^½) through the symmetrized product √Σ₁·Σ₂·√Σ₁.
    let s1 = sqrtm_psd(&cov1)?;
    let inner = &s1 * &cov2 * &s1;
    let inner_sym = (&inner + inner.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(inner_sym);
    let mut tr_sqrt = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -PSD_TOL {
            return Err(Error::numeric(format!(
                "product matrix not PSD: eigenvalue {v}"
            )));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let value = mean_term + cov1.trace() + cov2.trace() - 2.0 * tr_sqrt;
    // Exact-zero cases land at tiny negatives through roundoff.
    Ok(value.max(0.0))
}
