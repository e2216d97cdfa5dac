//! Image-text fusion: a global module conditioning bottleneck features on
//! the sentence vector, and a local module attending over word features.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{Initializer, ParamStore};
use crate::nn::{conv_layer, fc_layer, init_conv, init_fc};
use crate::tensor::{Scalar, Tensor};

/// Global fusion module configuration.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GfmConfig {
    /// Feature-map channels (and the width of both FC layers).
    pub channels: usize,
    /// Sentence-feature dimension D.
    pub text_dim: usize,
}

/// Global fusion module: pools the feature map, fuses with the sentence
/// vector through two FC layers, re-broadcasts, and fuses by convolution.
/// Shape preserving.
pub struct Gfm {
    pub config: GfmConfig,
}

impl Gfm {
    pub fn new(config: GfmConfig) -> Self {
        Gfm { config }
    }

    pub fn init_params<F: Scalar>(&self, store: &mut ParamStore<F>, init: &mut Initializer, prefix: &str) {
        let c = self.config.channels;
        init_conv(store, init, &format!("{prefix}.conv_in"), c, c, 3);
        init_fc(store, init, &format!("{prefix}.fc1"), c, c + self.config.text_dim);
        init_fc(store, init, &format!("{prefix}.fc2"), c, c);
        init_conv(store, init, &format!("{prefix}.conv_out"), c, 2 * c, 3);
    }

    /// `x: [C,H,W]`, `sentence: [D]` → `[C,H,W]`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        tag: u32,
        store: &ParamStore<F>,
        prefix: &str,
        x: Var,
        sentence: Var,
    ) -> Result<Var> {
        let (c, h, w) = {
            let t = g.value(x);
            if t.rank() != 3 {
                return Err(Error::shape("gfm expects a C×H×W feature map"));
            }
            t.dims3()
        };
        if c != self.config.channels {
            return Err(Error::shape(format!(
                "gfm expects {} channels, got {c}",
                self.config.channels
            )));
        }
        if g.value(sentence).shape() != [self.config.text_dim] {
            return Err(Error::shape(format!(
                "gfm sentence features must be [{}], got {:?}",
                self.config.text_dim,
                g.value(sentence).shape()
            )));
        }
        let conv = conv_layer(g, tag, store, &format!("{prefix}.conv_in"), x, 1, 1);
        let pooled = g.gap(conv);
        let fused_in = g.concat(&[pooled, sentence]);
        let h1 = fc_layer(g, tag, store, &format!("{prefix}.fc1"), fused_in);
        let h2 = fc_layer(g, tag, store, &format!("{prefix}.fc2"), h1);
        let repeated = g.broadcast_chw(h2, h, w);
        let cat = g.concat(&[x, repeated]);
        Ok(conv_layer(g, tag, store, &format!("{prefix}.conv_out"), cat, 1, 1))
    }
}

/// Local fusion module configuration.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LfmConfig {
    /// Feature-map channels C (word features are mapped D→C).
    pub channels: usize,
    /// Word-feature dimension D.
    pub text_dim: usize,
}

/// Local fusion module: maps word features to the image channel width,
/// scores each word against each spatial location, softmaxes over words per
/// location, and returns the attention-weighted word context upsampled ×2.
pub struct Lfm {
    pub config: LfmConfig,
}

impl Lfm {
    pub fn new(config: LfmConfig) -> Self {
        Lfm { config }
    }

    pub fn init_params<F: Scalar>(&self, store: &mut ParamStore<F>, init: &mut Initializer, prefix: &str) {
        store.insert(
            format!("{prefix}.wordmap.w"),
            init.kaiming(&[self.config.channels, self.config.text_dim], self.config.text_dim),
        );
        store.insert(
            format!("{prefix}.wordmap.b"),
            Tensor::zeros(&[self.config.channels]),
        );
    }

    /// `x: [C,H,W]`, `words: [D,T]` → `([C,2H,2W], attention [T,H·W])`.
    ///
    /// Every attention column is a probability distribution over the T words.
    pub fn forward_with_attention<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        tag: u32,
        store: &ParamStore<F>,
        prefix: &str,
        x: Var,
        words: Var,
    ) -> Result<(Var, Var)> {
        let (c, h, w) = {
            let t = g.value(x);
            if t.rank() != 3 {
                return Err(Error::shape("lfm expects a C×H×W feature map"));
            }
            t.dims3()
        };
        if c != self.config.channels {
            return Err(Error::shape(format!(
                "lfm expects {} channels, got {c}",
                self.config.channels
            )));
        }
        let (d, t_len) = {
            let t = g.value(words);
            if t.rank() != 2 {
                return Err(Error::shape("lfm word features must be D×T"));
            }
            t.dims2()
        };
        if d != self.config.text_dim {
            return Err(Error::shape(format!(
                "lfm words must have {} rows, got {d}",
                self.config.text_dim
            )));
        }
        if t_len == 0 {
            return Err(Error::domain("lfm needs at least one word"));
        }

        // 1×1 word mapping D→C as a matmul plus per-channel bias.
        let wmap = g.param(tag, store, &format!("{prefix}.wordmap.w"));
        let bias = g.param(tag, store, &format!("{prefix}.wordmap.b"));
        let mapped = g.matmul(wmap, words); // [C, T]
        let mapped_t = g.transpose(mapped); // [T, C]
        let mapped_tb = g.add_row_vec(mapped_t, bias);
        let wprime = g.transpose(mapped_tb); // [C, T]

        let x_flat = g.reshape(x, &[c, h * w]);
        let wprime_t = g.transpose(wprime); // [T, C]
        let scores = g.matmul(wprime_t, x_flat); // [T, H·W]
        let attention = g.softmax_cols(scores); // distribution over words per location
        let context = g.matmul(wprime, attention); // [C, H·W]
        let context_map = g.reshape(context, &[c, h, w]);
        let out = g.upsample_nearest2x(context_map);
        Ok((out, attention))
    }

    /// [`Lfm::forward_with_attention`] without the attention handle.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        tag: u32,
        store: &ParamStore<F>,
        prefix: &str,
        x: Var,
        words: Var,
    ) -> Result<Var> {
        Ok(self.forward_with_attention(g, tag, store, prefix, x, words)?.0)
    }
}

/// Renders one attention row (`[H·W]` slice of the `[T,H·W]` map) as a
/// grayscale image, normalized to the row maximum.
pub fn attention_row_to_gray(row: &[f64], h: usize, w: usize) -> image::GrayImage {
    assert_eq!(row.len(), h * w);
    let max = row.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (row[y * w + x] / max * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img
}
