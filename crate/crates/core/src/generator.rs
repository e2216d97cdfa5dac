//! The deblocking network: a U-Net with bottleneck residual blocks, global
//! text fusion at the bottleneck, and word-attention fusion at each of the
//! three decoder scales.

use crate::error::{Error, Result};
use crate::fusion::{Gfm, GfmConfig, Lfm, LfmConfig};
use crate::image::ImageTensor;
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{Initializer, ParamStore};
use crate::nn::{conv_layer, init_conv, init_prelu, init_residual_block, prelu_layer, residual_block};
use crate::tensor::Scalar;

/// Index of the residual block after which the global fusion runs.
const GFM_AFTER_BLOCK: usize = 3;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub bottleneck_channels: usize,
    pub n_resblocks: usize,
    /// Training/evaluation image side; inference accepts any 16-multiple.
    pub input_size: usize,
    pub use_global_residual: bool,
    /// Common semantic dimension D of the text features.
    pub text_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 64,
            bottleneck_channels: 128,
            n_resblocks: 6,
            input_size: 256,
            use_global_residual: true,
            text_dim: 256,
        }
    }
}

impl GeneratorConfig {
    /// Small configuration used for CPU-scale training runs.
    pub fn desk_scale() -> Self {
        GeneratorConfig {
            base_channels: 32,
            bottleneck_channels: 64,
            n_resblocks: 6,
            input_size: 64,
            use_global_residual: true,
            text_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(Error::domain(format!(
                "input_size {} must be a nonzero multiple of 16",
                self.input_size
            )));
        }
        if self.n_resblocks < GFM_AFTER_BLOCK {
            return Err(Error::domain(format!(
                "n_resblocks must be ≥ {GFM_AFTER_BLOCK} (global fusion sits after block {GFM_AFTER_BLOCK})"
            )));
        }
        if self.base_channels == 0 || self.bottleneck_channels == 0 || self.text_dim == 0 {
            return Err(Error::domain("channel plan entries must be positive"));
        }
        Ok(())
    }
}

/// Generator output plus the per-scale word attention maps, for inspection.
pub struct GeneratorOutput {
    pub image: Var,
    /// `[T, H·W]` attention of each local fusion, coarsest first.
    pub attentions: Vec<Var>,
}

pub struct Generator {
    pub config: GeneratorConfig,
    gfm: Gfm,
    lfm_deep: Lfm,
    lfm_shallow: Lfm,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let gfm = Gfm::new(GfmConfig {
            channels: config.bottleneck_channels,
            text_dim: config.text_dim,
        });
        let lfm_deep = Lfm::new(LfmConfig {
            channels: config.bottleneck_channels,
            text_dim: config.text_dim,
        });
        let lfm_shallow = Lfm::new(LfmConfig {
            channels: config.base_channels,
            text_dim: config.text_dim,
        });
        Ok(Generator {
            config,
            gfm,
            lfm_deep,
            lfm_shallow,
        })
    }

    pub fn init_params<F: Scalar>(&self, seed: u64) -> ParamStore<F> {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let b = self.config.base_channels;
        let n = self.config.bottleneck_channels;

        init_conv(&mut store, &mut init, "enc1", b, 3, 3);
        init_prelu::<F>(&mut store, "enc1.act", b);
        init_conv(&mut store, &mut init, "enc2", b, b, 3);
        init_prelu::<F>(&mut store, "enc2.act", b);
        init_conv(&mut store, &mut init, "enc3", n, b, 3);
        init_prelu::<F>(&mut store, "enc3.act", n);
        init_conv(&mut store, &mut init, "enc4", n, n, 3);
        init_prelu::<F>(&mut store, "enc4.act", n);

        for i in 1..=self.config.n_resblocks {
            init_residual_block(&mut store, &mut init, &format!("res{i}"), n);
        }
        self.gfm.init_params(&mut store, &mut init, "gfm");
        self.lfm_deep.init_params(&mut store, &mut init, "lfm1");
        self.lfm_deep.init_params(&mut store, &mut init, "lfm2");
        self.lfm_shallow.init_params(&mut store, &mut init, "lfm3");

        // Decoder stage i: upsample+conv, then fuse conv over
        // [upsampled ‖ word context ‖ encoder skip].
        init_conv(&mut store, &mut init, "dec1.up", n, n, 3);
        init_prelu::<F>(&mut store, "dec1.up.act", n);
        init_conv(&mut store, &mut init, "dec1.fuse", n, 3 * n, 3);
        init_prelu::<F>(&mut store, "dec1.fuse.act", n);
        init_conv(&mut store, &mut init, "dec2.up", b, n, 3);
        init_prelu::<F>(&mut store, "dec2.up.act", b);
        init_conv(&mut store, &mut init, "dec2.fuse", b, b + n + b, 3);
        init_prelu::<F>(&mut store, "dec2.fuse.act", b);
        init_conv(&mut store, &mut init, "dec3.up", b, b, 3);
        init_prelu::<F>(&mut store, "dec3.up.act", b);
        init_conv(&mut store, &mut init, "dec3.fuse", b, 3 * b, 3);
        init_prelu::<F>(&mut store, "dec3.fuse.act", b);
        init_conv(&mut store, &mut init, "head", 3, b, 3);
        store
    }

    /// Builds the full forward pass on the graph. `compressed` is `[3,H,W]`
    /// with H, W multiples of 16; `words` is `[D,T]`, `sentence` `[D]`.
    pub fn generate_graph<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        tag: u32,
        store: &ParamStore<F>,
        compressed: Var,
        words: Var,
        sentence: Var,
    ) -> Result<GeneratorOutput> {
        {
            let t = g.value(compressed);
            if t.rank() != 3 || t.shape()[0] != 3 {
                return Err(Error::shape(format!(
                    "generator input must be 3×H×W, got {:?}",
                    t.shape()
                )));
            }
            let (_, h, w) = t.dims3();
            if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
                return Err(Error::shape(format!(
                    "generator input {h}×{w} must be a nonzero multiple of 16"
                )));
            }
            if !t.all_finite() {
                return Err(Error::numeric("generator input contains non-finite values"));
            }
        }
        let conv_act = |g: &mut Graph<F>, prefix: &str, x: Var, stride: usize| {
            let c = conv_layer(g, tag, store, prefix, x, stride, 1);
            prelu_layer(g, tag, store, &format!("{prefix}.act"), c)
        };

        // Encoder.
        let e0 = conv_act(g, "enc1", compressed, 1);
        let e1 = conv_act(g, "enc2", e0, 2);
        let e2 = conv_act(g, "enc3", e1, 2);
        let e3 = conv_act(g, "enc4", e2, 2);

        // Bottleneck with global fusion after the third block.
        let mut x = e3;
        for i in 1..=self.config.n_resblocks {
            x = residual_block(g, tag, store, &format!("res{i}"), x);
            if i == GFM_AFTER_BLOCK {
                x = self.gfm.forward(g, tag, store, "gfm", x, sentence)?;
            }
        }

        let mut attentions = Vec::with_capacity(3);

        // Decoder stage 1: S/8 → S/4.
        let up1 = g.upsample_nearest2x(x);
        let u1 = conv_act(g, "dec1.up", up1, 1);
        let (l1, a1) = self
            .lfm_deep
            .forward_with_attention(g, tag, store, "lfm1", x, words)?;
        attentions.push(a1);
        let cat1 = g.concat(&[u1, l1, e2]);
        let d1 = conv_act(g, "dec1.fuse", cat1, 1);

        // Decoder stage 2: S/4 → S/2.
        let up2 = g.upsample_nearest2x(d1);
        let u2 = conv_act(g, "dec2.up", up2, 1);
        let (l2, a2) = self
            .lfm_deep
            .forward_with_attention(g, tag, store, "lfm2", d1, words)?;
        attentions.push(a2);
        let cat2 = g.concat(&[u2, l2, e1]);
        let d2 = conv_act(g, "dec2.fuse", cat2, 1);

        // Decoder stage 3: S/2 → S.
        let up3 = g.upsample_nearest2x(d2);
        let u3 = conv_act(g, "dec3.up", up3, 1);
        let (l3, a3) = self
            .lfm_shallow
            .forward_with_attention(g, tag, store, "lfm3", d2, words)?;
        attentions.push(a3);
        let cat3 = g.concat(&[u3, l3, e0]);
        let d3 = conv_act(g, "dec3.fuse", cat3, 1);

        let head = conv_layer(g, tag, store, "head", d3, 1, 1);
        let pre_clamp = if self.config.use_global_residual {
            g.add(compressed, head)
        } else {
            head
        };
        let image = g.clamp(pre_clamp, 0.0, 1.0);
        Ok(GeneratorOutput { image, attentions })
    }

    /// Deblocks one image given precomputed text features.
    pub fn generate<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        compressed: &ImageTensor<F>,
        words: &crate::tensor::Tensor<F>,
        sentence: &crate::tensor::Tensor<F>,
    ) -> Result<ImageTensor<F>> {
        let mut g = Graph::new();
        let ic = g.input(compressed.tensor().clone());
        let w = g.input(words.clone());
        let s = g.input(sentence.clone());
        let out = self.generate_graph(&mut g, 0, store, ic, w, s)?;
        let value = g.value(out.image).clone();
        if !value.all_finite() {
            return Err(Error::numeric("generator produced non-finite activations"));
        }
        ImageTensor::from_tensor_clamped(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{TextEncoder, TextEncoderConfig, Vocabulary};
    use crate::synth::synthetic_image;
    use crate::tensor::Tensor;

    fn tiny_config() -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 4,
            bottleneck_channels: 8,
            n_resblocks: 3,
            input_size: 16,
            use_global_residual: true,
            text_dim: 6,
        }
    }

    fn text_feats(seed: u64, d: usize, t: usize) -> (Tensor<f64>, Tensor<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let words =
            Tensor::from_vec(&[d, t], (0..d * t).map(|_| rng.random_range(-0.5..0.5)).collect())
                .unwrap();
        let sent =
            Tensor::from_vec(&[d], (0..d).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        (words, sent)
    }

    #[test]
    fn output_shape_equals_input_shape() {
        let gen = Generator::new(tiny_config()).unwrap();
        let store = gen.init_params::<f64>(3);
        let ic = synthetic_image(1, 16, 16);
        let (w, s) = text_feats(2, 6, 4);
        let out = gen.generate(&store, &ic, &w, &s).unwrap();
        assert_eq!(out.tensor().shape(), ic.tensor().shape());
    }

    #[test]
    fn zero_head_with_residual_is_identity() {
        let gen = Generator::new(tiny_config()).unwrap();
        let mut store = gen.init_params::<f64>(4);
        for name in ["head.w", "head.b"] {
            let shape = store.get(name).shape().to_vec();
            *store.get_mut(name) = Tensor::zeros(&shape);
        }
        let ic = synthetic_image(5, 16, 16);
        let (w, s) = text_feats(6, 6, 3);
        let out = gen.generate(&store, &ic, &w, &s).unwrap();
        assert_eq!(out.tensor().data(), ic.tensor().data());
    }

    #[test]
    fn caption_changes_output_under_random_init() {
        // Wire a real text encoder in front so the whole text path is live.
        let vocab = Vocabulary::from_tokens(
            ["a", "red", "yellow", "bird"].into_iter().map(String::from),
        );
        let tenc = TextEncoder::new(TextEncoderConfig {
            vocab_size: vocab.size(),
            word_embed_dim: 8,
            common_dim: 6,
            max_caption_len: 18,
        })
        .unwrap();
        let tstore = tenc.init_params::<f64>(11);
        let gen = Generator::new(tiny_config()).unwrap();
        let gstore = gen.init_params::<f64>(12);
        let ic = synthetic_image(7, 16, 16);
        let mut outs = Vec::new();
        for text in ["a red bird", "a yellow bird"] {
            let cap = vocab.encode(text, 18).unwrap();
            let f = tenc.encode(&tstore, &cap).unwrap();
            outs.push(gen.generate(&gstore, &ic, &f.words, &f.sentence).unwrap());
        }
        let l2: f64 = outs[0]
            .tensor()
            .data()
            .iter()
            .zip(outs[1].tensor().data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(l2 > 0.0, "text path is dead");
    }

    #[test]
    fn deterministic_generation() {
        let gen = Generator::new(tiny_config()).unwrap();
        let store = gen.init_params::<f64>(8);
        let ic = synthetic_image(9, 16, 16);
        let (w, s) = text_feats(10, 6, 5);
        let a = gen.generate(&store, &ic, &w, &s).unwrap();
        let b = gen.generate(&store, &ic, &w, &s).unwrap();
        assert_eq!(a.tensor().data(), b.tensor().data());
    }

    #[test]
    fn rejects_undersized_resblock_count() {
        let cfg = GeneratorConfig {
            n_resblocks: 2,
            ..tiny_config()
        };
        assert!(Generator::new(cfg).is_err());
    }

    #[test]
    fn paper_scale_parameter_count_within_2x_of_6_9m() {
        // Generator + text encoder trainable parameters, CUB-sized vocab.
        let gen = Generator::new(GeneratorConfig::default()).unwrap();
        let gstore = gen.init_params::<f32>(0);
        let tenc = TextEncoder::new(TextEncoderConfig {
            vocab_size: 5450,
            word_embed_dim: 128,
            common_dim: 256,
            max_caption_len: 18,
        })
        .unwrap();
        let tstore = tenc.init_params::<f32>(0);
        let total = gstore.count_parameters() + tstore.count_parameters();
        let target = 6_900_000.0;
        assert!(
            (total as f64) > target / 2.0 && (total as f64) < target * 2.0,
            "total {total} outside 2× band of {target}"
        );
    }
}
