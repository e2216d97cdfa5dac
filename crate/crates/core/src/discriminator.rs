//! Real-vs-deblocked classifier for the adversarial loss.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{Initializer, ParamStore};
use crate::nn::{batchnorm_layer, conv_layer, fc_layer, init_batchnorm, init_conv, init_fc, init_prelu, prelu_layer};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiscriminatorConfig {
    /// Output channels of the four stride-2 blocks.
    pub channel_plan: [usize; 4],
    /// Output probability clamp, keeping both GAN logs finite.
    pub eps_clamp: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            channel_plan: [64, 128, 256, 512],
            eps_clamp: 1e-6,
        }
    }
}

impl DiscriminatorConfig {
    pub fn desk_scale() -> Self {
        DiscriminatorConfig {
            channel_plan: [32, 64, 128, 128],
            eps_clamp: 1e-6,
        }
    }
}

/// Four stride-2 conv blocks (BN from the second block on), global average
/// pooling, FC, sigmoid. Input-size agnostic.
pub struct Discriminator {
    pub config: DiscriminatorConfig,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Self {
        Discriminator { config }
    }

    pub fn init_params<F: Scalar>(&self, seed: u64) -> ParamStore<F> {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let [c1, c2, c3, c4] = self.config.channel_plan;
        init_conv(&mut store, &mut init, "b1", c1, 3, 3);
        init_prelu::<F>(&mut store, "b1.act", c1);
        // First block skips BN.
        init_conv(&mut store, &mut init, "b2", c2, c1, 3);
        init_batchnorm(&mut store, "b2.bn", c2);
        init_prelu::<F>(&mut store, "b2.act", c2);
        init_conv(&mut store, &mut init, "b3", c3, c2, 3);
        init_batchnorm(&mut store, "b3.bn", c3);
        init_prelu::<F>(&mut store, "b3.act", c3);
        init_conv(&mut store, &mut init, "b4", c4, c3, 3);
        init_batchnorm(&mut store, "b4.bn", c4);
        init_prelu::<F>(&mut store, "b4.act", c4);
        init_fc(&mut store, &mut init, "head", 1, c4);
        store
    }

    /// Probability var (`[1]`, clamped into `[eps, 1−eps]`). Train mode uses
    /// batch statistics and updates the running ones in `store`.
    pub fn discriminate_graph<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        tag: u32,
        store: &mut ParamStore<F>,
        image: Var,
        train: bool,
    ) -> Result<Var> {
        {
            let t = g.value(image);
            if t.rank() != 3 || t.shape()[0] != 3 {
                return Err(Error::shape(format!(
                    "discriminator input must be 3×H×W, got {:?}",
                    t.shape()
                )));
            }
            let (_, h, w) = t.dims3();
            if h % 16 != 0 || w % 16 != 0 {
                return Err(Error::shape(format!(
                    "discriminator input {h}×{w} must be a multiple of 16"
                )));
            }
        }
        let mut x = conv_layer(g, tag, store, "b1", image, 2, 1);
        x = prelu_layer(g, tag, store, "b1.act", x);
        for block in ["b2", "b3", "b4"] {
            x = conv_layer(g, tag, store, block, x, 2, 1);
            x = batchnorm_layer(g, tag, store, &format!("{block}.bn"), x, train);
            x = prelu_layer(g, tag, store, &format!("{block}.act"), x);
        }
        let pooled = g.gap(x);
        let logit = fc_layer(g, tag, store, "head", pooled);
        let prob = g.sigmoid(logit);
        Ok(g.clamp(prob, self.config.eps_clamp, 1.0 - self.config.eps_clamp))
    }

    /// Eval-mode probability for one image.
    pub fn discriminate<F: Scalar>(&self, store: &ParamStore<F>, image: &ImageTensor<F>) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(image.tensor().clone());
        let mut store = store.clone();
        let p = self.discriminate_graph(&mut g, 0, &mut store, x, false)?;
        Ok(g.value(p).item().to_f64c())
    }
}
