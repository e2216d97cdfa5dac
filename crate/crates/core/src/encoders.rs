//! Caption and image encoders mapping both modalities into a common
//! semantic dimension D.
//!
//! The text side is an embedding lookup into a bi-directional LSTM: per-word
//! features are the per-step hidden states (D×T), the sentence feature is
//! the concatenation of the two directions' final states. The image side is
//! a small strided conv backbone producing a region feature grid and a
//! pooled global vector, each mapped to D.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{Initializer, ParamStore};
use crate::nn::{conv_layer, fc_layer, init_conv, init_fc, init_prelu, prelu_layer, BiLstm};
use crate::tensor::{Scalar, Tensor};
use std::collections::HashMap;
use std::path::Path;

/// Reserved id for out-of-vocabulary tokens.
pub const UNK_ID: usize = 0;
/// Reserved id for padding.
pub const PAD_ID: usize = 1;

/// Lowercases and strips punctuation, splitting on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(String::from)
        .collect()
}

/// Token table; line number = id in the on-disk format, with `<unk>` at 0
/// and `<pad>` at 1.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from non-reserved tokens in their id order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all = vec!["<unk>".to_string(), "<pad>".to_string()];
        all.extend(tokens);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens: all,
            index,
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(String::from).collect();
        if tokens.len() < 2 || tokens[0] != "<unk>" || tokens[1] != "<pad>" {
            return Err(Error::data(
                "vocabulary file must start with <unk> and <pad>",
            ));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary { tokens, index })
    }

    /// Tokenizes and encodes, truncating to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Caption> {
        let ids: Vec<usize> = tokenize(text)
            .iter()
            .take(max_len)
            .map(|t| self.id_of(t))
            .collect();
        Caption::new(ids, text.to_string(), self.size(), max_len)
    }
}

/// A tokenized caption; non-empty, ids within vocabulary, length ≤ max_len.
#[derive(Clone, Debug, PartialEq)]
pub struct Caption {
    tokens: Vec<usize>,
    raw: String,
}

impl Caption {
    pub fn new(tokens: Vec<usize>, raw: String, vocab_size: usize, max_len: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::domain("caption must contain at least one token"));
        }
        if tokens.len() > max_len {
            return Err(Error::domain(format!(
                "caption length {} exceeds max {}",
                tokens.len(),
                max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::domain(format!(
                "token id {bad} outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(Caption { tokens, raw })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Word features `[D,T]` and sentence features `[D]` of one caption.
#[derive(Clone, Debug)]
pub struct TextFeatures<F> {
    pub words: Tensor<F>,
    pub sentence: Tensor<F>,
}

/// Region features `[D,R]` and global feature `[D]` of one image.
#[derive(Clone, Debug)]
pub struct ImageSemanticFeatures<F> {
    pub regions: Tensor<F>,
    pub global: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub word_embed_dim: usize,
    /// Common semantic dimension D; must be even (two LSTM directions).
    pub common_dim: usize,
    pub max_caption_len: usize,
}

impl TextEncoderConfig {
    pub fn with_vocab(vocab_size: usize, common_dim: usize) -> Self {
        TextEncoderConfig {
            vocab_size,
            word_embed_dim: 128,
            common_dim,
            max_caption_len: 18,
        }
    }
}

/// Embedding + BiLSTM caption encoder.
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    lstm: BiLstm,
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig) -> Result<Self> {
        if config.common_dim % 2 != 0 {
            return Err(Error::domain("common_dim must be even"));
        }
        if config.vocab_size <= PAD_ID {
            return Err(Error::domain("vocabulary too small"));
        }
        let lstm = BiLstm::new("lstm", config.word_embed_dim, config.common_dim / 2);
        Ok(TextEncoder { config, lstm })
    }

    pub fn init_params<F: Scalar>(&self, seed: u64) -> ParamStore<F> {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        store.insert(
            "embed.table",
            init.embedding(&[self.config.vocab_size, self.config.word_embed_dim]),
        );
        self.lstm.init_params(&mut store, &mut init);
        store
    }

    /// Word (`[D,T]`) and sentence (`[D]`) feature vars.
    pub fn encode_graph<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        tag: u32,
        store: &ParamStore<F>,
        caption: &Caption,
    ) -> Result<(Var, Var)> {
        if caption.is_empty() {
            return Err(Error::domain("cannot encode an empty caption"));
        }
        if let Some(&bad) = caption.tokens().iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::domain(format!(
                "token id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        let table = g.param(tag, store, "embed.table");
        let emb = g.embed(table, caption.tokens()); // [T, De]
        let steps: Vec<Var> = (0..caption.len())
            .map(|t| {
                let row = g.slice_axis0(emb, t, 1);
                g.reshape(row, &[self.config.word_embed_dim])
            })
            .collect();
        let (hidden, final_state) = self.lstm.forward(g, tag, store, &steps)?;
        let stacked = g.stack(&hidden); // [T, D]
        let words = g.transpose(stacked); // [D, T]
        Ok((words, final_state))
    }

    pub fn encode<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        caption: &Caption,
    ) -> Result<TextFeatures<F>> {
        let mut g = Graph::new();
        let (w, s) = self.encode_graph(&mut g, 0, store, caption)?;
        Ok(TextFeatures {
            words: g.value(w).clone(),
            sentence: g.value(s).clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImageEncoderConfig {
    pub common_dim: usize,
    /// Side length of the region grid (R = grid²).
    pub region_grid: usize,
    pub channels: [usize; 3],
    pub min_side: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            common_dim: 256,
            region_grid: 17,
            channels: [32, 64, 128],
            min_side: 64,
        }
    }
}

/// Strided conv backbone with region and global mappings into D.
pub struct ImageEncoder {
    pub config: ImageEncoderConfig,
}

impl ImageEncoder {
    pub fn new(config: ImageEncoderConfig) -> Self {
        ImageEncoder { config }
    }

    pub fn init_params<F: Scalar>(&self, seed: u64) -> ParamStore<F> {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let [c1, c2, c3] = self.config.channels;
        init_conv(&mut store, &mut init, "b1", c1, 3, 3);
        init_prelu::<F>(&mut store, "b1.act", c1);
        init_conv(&mut store, &mut init, "b2", c2, c1, 3);
        init_prelu::<F>(&mut store, "b2.act", c2);
        init_conv(&mut store, &mut init, "b3", c3, c2, 3);
        init_prelu::<F>(&mut store, "b3.act", c3);
        init_conv(&mut store, &mut init, "b4", c3, c3, 3);
        init_prelu::<F>(&mut store, "b4.act", c3);
        init_conv(&mut store, &mut init, "b5", c3, c3, 3);
        init_prelu::<F>(&mut store, "b5.act", c3);
        init_conv(&mut store, &mut init, "regions", self.config.common_dim, c3, 1);
        init_fc(&mut store, &mut init, "global", self.config.common_dim, c3);
        store
    }

    /// Region (`[D,R]`) and global (`[D]`) feature vars.
    pub fn encode_graph<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        tag: u32,
        store: &ParamStore<F>,
        image: Var,
    ) -> Result<(Var, Var)> {
        let shape = g.value(image).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(format!("image encoder expects 3×H×W, got {shape:?}")));
        }
        if shape[1] < self.config.min_side || shape[2] < self.config.min_side {
            return Err(Error::shape(format!(
                "image {}×{} below encoder minimum side {}",
                shape[1], shape[2], self.config.min_side
            )));
        }
        let mut x = image;
        for (block, stride) in [("b1", 2), ("b2", 2), ("b3", 2), ("b4", 1), ("b5", 1)] {
            x = conv_layer(g, tag, store, block, x, stride, 1);
            x = prelu_layer(g, tag, store, &format!("{block}.act"), x);
        }
        let grid = self.config.region_grid;
        let pooled = g.adaptive_avg_pool(x, grid, grid);
        let mapped = conv_layer(g, tag, store, "regions", pooled, 1, 0); // [D, g, g]
        let regions = g.reshape(mapped, &[self.config.common_dim, grid * grid]);
        let pooled_vec = g.gap(x);
        let global = fc_layer(g, tag, store, "global", pooled_vec);
        Ok((regions, global))
    }

    pub fn encode<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        image: &ImageTensor<F>,
    ) -> Result<ImageSemanticFeatures<F>> {
        let mut g = Graph::new();
        let x = g.input(image.tensor().clone());
        let (r, gl) = self.encode_graph(&mut g, 0, store, x)?;
        Ok(ImageSemanticFeatures {
            regions: g.value(r).clone(),
            global: g.value(gl).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_image;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(
            ["a", "red", "blue", "bird", "flower", "small", "with", "beak"]
                .into_iter()
                .map(String::from),
        )
    }

    fn encoder(v: &Vocabulary) -> (TextEncoder, ParamStore<f64>) {
        let enc = TextEncoder::new(TextEncoderConfig {
            vocab_size: v.size(),
            word_embed_dim: 16,
            common_dim: 32,
            max_caption_len: 18,
        })
        .unwrap();
        let store = enc.init_params(7);
        (enc, store)
    }

    #[test]
    fn tokenize_strips_punctuation_and_case() {
        assert_eq!(tokenize("A red, BIRD!"), vec!["a", "red", "bird"]);
    }

    #[test]
    fn word_features_are_d_by_t() {
        let v = vocab();
        let (enc, store) = encoder(&v);
        let cap = v.encode("a red bird with beak", 18).unwrap();
        let f = enc.encode(&store, &cap).unwrap();
        assert_eq!(f.words.shape(), &[32, 5]);
        assert_eq!(f.sentence.shape(), &[32]);
    }

    #[test]
    fn identical_captions_identical_features() {
        let v = vocab();
        let (enc, store) = encoder(&v);
        let cap = v.encode("a blue flower", 18).unwrap();
        let f1 = enc.encode(&store, &cap).unwrap();
        let f2 = enc.encode(&store, &cap).unwrap();
        assert_eq!(f1.words.data(), f2.words.data());
        assert_eq!(f1.sentence.data(), f2.sentence.data());
    }

    #[test]
    fn color_word_changes_sentence_features() {
        let v = vocab();
        let (enc, store) = encoder(&v);
        let red = enc.encode(&store, &v.encode("a red bird", 18).unwrap()).unwrap();
        let blue = enc.encode(&store, &v.encode("a blue bird", 18).unwrap()).unwrap();
        let diff: f64 = red
            .sentence
            .data()
            .iter()
            .zip(blue.sentence.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff > 0.0);
    }

    #[test]
    fn empty_caption_rejected() {
        let v = vocab();
        assert!(v.encode("!!!", 18).is_err());
        assert!(Caption::new(vec![], String::new(), v.size(), 18).is_err());
    }

    #[test]
    fn out_of_vocab_id_rejected() {
        let v = vocab();
        assert!(Caption::new(vec![v.size()], "x".into(), v.size(), 18).is_err());
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let v = vocab();
        let cap = v.encode("a zebra", 18).unwrap();
        assert_eq!(cap.tokens(), &[v.id_of("a"), UNK_ID]);
    }

    #[test]
    fn caption_truncated_to_max_len() {
        let v = vocab();
        let cap = v.encode("a a a a a a a a a a", 4).unwrap();
        assert_eq!(cap.len(), 4);
    }

    #[test]
    fn vocab_round_trip() {
        let v = vocab();
        let dir = std::env::temp_dir().join("vocab_rt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        v.save(&path).unwrap();
        let v2 = Vocabulary::load(&path).unwrap();
        assert_eq!(v2.size(), v.size());
        for tok in ["a", "red", "beak"] {
            assert_eq!(v2.id_of(tok), v.id_of(tok));
            assert_eq!(v2.token_of(v.id_of(tok)).unwrap(), tok);
        }
    }

    #[test]
    fn image_encoder_region_grid_default_is_17x17() {
        let enc = ImageEncoder::new(ImageEncoderConfig {
            channels: [8, 8, 8],
            common_dim: 16,
            ..ImageEncoderConfig::default()
        });
        let store = enc.init_params::<f32>(3);
        let img = synthetic_image::<f32>(0, 256, 256);
        let f = enc.encode(&store, &img).unwrap();
        assert_eq!(f.regions.shape(), &[16, 289]);
        assert_eq!(f.global.shape(), &[16]);
    }

    #[test]
    fn image_encoder_deterministic_and_size_checked() {
        let enc = ImageEncoder::new(ImageEncoderConfig {
            common_dim: 16,
            region_grid: 4,
            channels: [4, 8, 8],
            min_side: 64,
        });
        let store = enc.init_params::<f64>(1);
        let img = synthetic_image::<f64>(5, 64, 64);
        let a = enc.encode(&store, &img).unwrap();
        let b = enc.encode(&store, &img).unwrap();
        assert_eq!(a.regions.data(), b.regions.data());
        let small = synthetic_image::<f64>(5, 32, 32);
        assert!(enc.encode(&store, &small).is_err());
    }
}
