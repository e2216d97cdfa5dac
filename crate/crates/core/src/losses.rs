//! Training losses: contrastive (perceptual-quality space), L1
//! reconstruction, adversarial, and the batch-softmax image-text matching
//! loss — plus their weighted combination.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics::PerceptualExtractor;
use crate::nn::graph::{Graph, Var};
use crate::tensor::Scalar;

/// Weights of the combined objective and the contrastive constant `c`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.01,
            lambda2: 1.0,
            lambda3: 0.001,
            lambda4: 0.0005,
            c: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::domain("loss weights must be finite and ≥ 0"));
        }
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::domain("contrastive constant c must be > 0"));
        }
        Ok(())
    }
}

/// Smoothing factors of the image-text matching loss.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DamsmGammas {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl Default for DamsmGammas {
    fn default() -> Self {
        DamsmGammas {
            gamma1: 5.0,
            gamma2: 5.0,
            gamma3: 10.0,
        }
    }
}

/// Per-step loss components and their weighted total.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_r: f64,
    pub l_g: f64,
    pub l_it: f64,
    pub total: f64,
}

/// Combines components with the configured weights. Errors (naming the
/// component) on non-finite values; the returned total satisfies the linear
/// identity to 1e-9 by construction.
pub fn total_loss(
    l_c: f64,
    l_r: f64,
    l_g: f64,
    l_it: f64,
    weights: &LossWeights,
) -> Result<LossReport> {
    for (name, v) in [("l_c", l_c), ("l_r", l_r), ("l_g", l_g), ("l_it", l_it)] {
        if !v.is_finite() {
            return Err(Error::numeric(format!(
                "loss component {name} is non-finite: {v}"
            )));
        }
    }
    let total = weights.lambda1 * l_c
        + weights.lambda2 * l_r
        + weights.lambda3 * l_g
        + weights.lambda4 * l_it;
    Ok(LossReport {
        l_c,
        l_r,
        l_g,
        l_it,
        total,
    })
}

/// Weighted total on the graph (for backprop); mirrors [`total_loss`].
pub fn total_loss_var<F: Scalar>(
    g: &mut Graph<F>,
    l_c: Var,
    l_r: Var,
    l_g_: Var,
    l_it: Var,
    weights: &LossWeights,
) -> Var {
    let a = g.scale(l_c, weights.lambda1);
    let b = g.scale(l_r, weights.lambda2);
    let c = g.scale(l_g_, weights.lambda3);
    let d = g.scale(l_it, weights.lambda4);
    let ab = g.add(a, b);
    let cd = g.add(c, d);
    g.add(ab, cd)
}

/// Contrastive loss in perceptual-quality space:
/// `F(deblocked, clean) / (F(deblocked, compressed) + c)`.
///
/// Pulls the restoration toward the clean positive and away from the
/// compressed negative.
pub fn contrastive_loss<F: Scalar>(
    extractor: &PerceptualExtractor<F>,
    deblocked: &ImageTensor<F>,
    clean: &ImageTensor<F>,
    compressed: &ImageTensor<F>,
    c: f64,
) -> Result<f64> {
    if c <= 0.0 {
        return Err(Error::domain("contrastive constant c must be > 0"));
    }
    let num = extractor.perceptual_distance(deblocked, clean)?.value();
    let den = extractor.perceptual_distance(deblocked, compressed)?.value() + c;
    Ok(num / den)
}

/// Graph version of [`contrastive_loss`], differentiable w.r.t. `deblocked`.
pub fn contrastive_loss_var<F: Scalar>(
    g: &mut Graph<F>,
    tag: u32,
    extractor: &PerceptualExtractor<F>,
    deblocked: Var,
    clean: Var,
    compressed: Var,
    c: f64,
) -> Var {
    // The deblocked features feed both distances; extract once.
    let f_deblocked = extractor.features(g, tag, deblocked);
    let f_clean = extractor.features(g, tag, clean);
    let f_compressed = extractor.features(g, tag, compressed);
    let num = extractor.distance_from_features(g, &f_deblocked, &f_clean);
    let den = extractor.distance_from_features(g, &f_deblocked, &f_compressed);
    let den_c = g.add_const(den, c);
    let inv = g.recip(den_c);
    g.mul(num, inv)
}

/// Unsimplified ratio form with the distance difference in the denominator.
/// Retained for experimentation only — the simplified form above trains far
/// more stably and is the one the trainer uses.
pub fn contrastive_loss_unsimplified<F: Scalar>(
    extractor: &PerceptualExtractor<F>,
    deblocked: &ImageTensor<F>,
    clean: &ImageTensor<F>,
    compressed: &ImageTensor<F>,
) -> Result<f64> {
    let d_clean = extractor.perceptual_distance(deblocked, clean)?.value();
    let d_neg = extractor.perceptual_distance(compressed, clean)?.value();
    let den = d_clean - d_neg;
    if den == 0.0 {
        return Err(Error::numeric(
            "degenerate denominator in unsimplified contrastive loss",
        ));
    }
    Ok((d_clean / den).abs())
}

/// Mean absolute difference per pixel-channel.
pub fn reconstruction_loss<F: Scalar>(
    deblocked: &ImageTensor<F>,
    clean: &ImageTensor<F>,
) -> Result<f64> {
    if deblocked.tensor().shape() != clean.tensor().shape() {
        return Err(Error::shape("reconstruction_loss shape mismatch"));
    }
    let n = deblocked.tensor().len() as f64;
    Ok(deblocked
        .tensor()
        .data()
        .iter()
        .zip(clean.tensor().data())
        .map(|(&a, &b)| (a.to_f64c() - b.to_f64c()).abs())
        .sum::<f64>()
        / n)
}

/// Graph version of [`reconstruction_loss`].
pub fn reconstruction_loss_var<F: Scalar>(g: &mut Graph<F>, deblocked: Var, clean: Var) -> Var {
    let diff = g.sub(deblocked, clean);
    let a = g.abs(diff);
    g.mean(a)
}

/// Probability clamp used before taking logs.
pub const PROB_EPS: f64 = 1e-6;

/// Discriminator and generator objectives from clamped probabilities.
///
/// `d_loss = −[log D(real) + log(1−D(fake))]`; the generator uses the
/// non-saturating form `−log D(fake)`.
pub fn gan_losses(d_real: f64, d_fake: f64) -> (f64, f64) {
    let r = d_real.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let f = d_fake.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let d_loss = -(r.ln() + (1.0 - f).ln());
    let g_loss = -f.ln();
    (d_loss, g_loss)
}

/// Discriminator loss on the graph: `−[log d_real + log(1−d_fake)]`.
pub fn gan_d_loss_var<F: Scalar>(g: &mut Graph<F>, d_real: Var, d_fake: Var) -> Var {
    let log_r = g.log(d_real);
    let neg_f = g.scale(d_fake, -1.0);
    let one_minus_f = g.add_const(neg_f, 1.0);
    let log_omf = g.log(one_minus_f);
    let s = g.add(log_r, log_omf);
    g.scale(s, -1.0)
}

/// Non-saturating generator loss on the graph: `−log d_fake`.
pub fn gan_g_loss_var<F: Scalar>(g: &mut Graph<F>, d_fake: Var) -> Var {
    let l = g.log(d_fake);
    g.scale(l, -1.0)
}

/// Image-side features of one sample for the matching loss.
pub struct ImageFeatureVars {
    /// `[D, R]` region features.
    pub regions: Var,
    /// `[D]` global feature.
    pub global: Var,
}

/// Text-side features of one sample for the matching loss.
pub struct TextFeatureVars {
    /// `[D, T]` word features.
    pub words: Var,
    /// `[D]` sentence feature.
    pub sentence: Var,
}

/// Batch-softmax image-text matching loss (word and sentence terms) on the
/// graph. Features are matched by index. Returns `(l_word, l_sentence)`.
pub fn damsm_loss_var<F: Scalar>(
    g: &mut Graph<F>,
    images: &[ImageFeatureVars],
    texts: &[TextFeatureVars],
    gammas: &DamsmGammas,
) -> Result<(Var, Var)> {
    if images.is_empty() || images.len() != texts.len() {
        return Err(Error::domain(format!(
            "matching loss needs equal nonempty batches, got {} vs {}",
            images.len(),
            texts.len()
        )));
    }
    let b = images.len();

    // Sentence term: cosine similarity of every (image, sentence) pair.
    let img_mat = {
        let vars: Vec<Var> = images.iter().map(|i| i.global).collect();
        let m = g.stack(&vars); // [B, D]
        g.normalize_rows(m, 1e-10)
    };
    let txt_mat = {
        let vars: Vec<Var> = texts.iter().map(|t| t.sentence).collect();
        let m = g.stack(&vars);
        g.normalize_rows(m, 1e-10)
    };
    let txt_t = g.transpose(txt_mat);
    let cos = g.matmul(img_mat, txt_t); // [B, B] rows: images, cols: sentences
    let logits = g.scale(cos, gammas.gamma3);
    let l_sentence = bidirectional_ce(g, logits, b);

    // Word term: attention-pooled region/word relevance per pair.
    let mut scores = Vec::with_capacity(b * b);
    for img in images {
        for txt in texts {
            scores.push(pair_word_score(g, img, txt, gammas));
        }
    }
    let rows: Vec<Var> = (0..b)
        .map(|i| {
            let row: Vec<Var> = (0..b).map(|j| scores[i * b + j]).collect();
            g.concat(&row)
        })
        .collect();
    let word_mat = g.stack(&rows); // [B, B]
    let word_logits = g.scale(word_mat, gammas.gamma3);
    let l_word = bidirectional_ce(g, word_logits, b);

    Ok((l_word, l_sentence))
}

/// Attention-weighted relevance of one (image, text) pair: word-region
/// correlation, double softmax (over words per region, then γ₁-smoothed over
/// regions per word), cosine of contexts to words, γ₂ log-sum-exp pooling.
fn pair_word_score<F: Scalar>(
    g: &mut Graph<F>,
    img: &ImageFeatureVars,
    txt: &TextFeatureVars,
    gammas: &DamsmGammas,
) -> Var {
    let words_t = g.transpose(txt.words); // [T, D]
    let s = g.matmul(words_t, img.regions); // [T, R]
    let s_norm = g.softmax_cols(s); // over words per region
    let s_scaled = g.scale(s_norm, gammas.gamma1);
    let attn = g.softmax_rows(s_scaled); // over regions per word
    let attn_t = g.transpose(attn); // [R, T]
    let context = g.matmul(img.regions, attn_t); // [D, T]
    let rel = g.cos_columns(context, txt.words, 1e-10); // [T]
    // (1/γ₂)·log Σ exp(γ₂·r_t)
    let scaled = g.scale(rel, gammas.gamma2);
    let e = g.exp(scaled);
    let sum = g.sum(e);
    let l = g.log(sum);
    g.scale(l, 1.0 / gammas.gamma2)
}

/// Mean of the two diagonal cross-entropies (rows and columns) of a square
/// logit matrix.
fn bidirectional_ce<F: Scalar>(g: &mut Graph<F>, logits: Var, b: usize) -> Var {
    let lr = g.log_softmax_rows(logits);
    let dr = g.take_diag(lr);
    let lc = g.log_softmax_cols(logits);
    let dc = g.take_diag(lc);
    let s = g.add(dr, dc);
    let total = g.sum(s);
    g.scale(total, -1.0 / b as f64)
}

/// Non-graph wrapper of [`damsm_loss_var`] over plain feature tensors:
/// `(regions, global)` per image and `(words, sentence)` per caption.
#[allow(clippy::type_complexity)]
pub fn damsm_loss<F: Scalar>(
    images: &[(crate::tensor::Tensor<F>, crate::tensor::Tensor<F>)],
    texts: &[(crate::tensor::Tensor<F>, crate::tensor::Tensor<F>)],
    gammas: &DamsmGammas,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let image_vars: Vec<ImageFeatureVars> = images
        .iter()
        .map(|(r, gl)| ImageFeatureVars {
            regions: g.input(r.clone()),
            global: g.input(gl.clone()),
        })
        .collect();
    let text_vars: Vec<TextFeatureVars> = texts
        .iter()
        .map(|(w, s)| TextFeatureVars {
            words: g.input(w.clone()),
            sentence: g.input(s.clone()),
        })
        .collect();
    let (lw, ls) = damsm_loss_var(&mut g, &image_vars, &text_vars, gammas)?;
    Ok((g.value(lw).item().to_f64c(), g.value(ls).item().to_f64c()))
}
