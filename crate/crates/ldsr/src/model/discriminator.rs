//! Patch discriminator for the stage-1 adversarial term: strided 4x4
//! convs with leaky ReLU, scoring overlapping patches.

use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::nn::{scoped, Conv2d, Init, ParamStore};
use crate::tensor::{Elem, Graph, Tx};

pub struct PatchDiscriminator {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl PatchDiscriminator {
    /// `patch_side` selects the depth: 4 width-doubling layers for inputs
    /// that fit the full 70x70 receptive field, 3 below that.
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        cfg: &ModelConfig,
        patch_side: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n_layers = if cfg.disc_layers > 0 {
            cfg.disc_layers
        } else if patch_side >= 70 {
            4
        } else {
            3
        };
        let mut convs = Vec::new();
        let mut c_in = 3;
        let mut width = cfg.disc_base;
        for i in 0..n_layers {
            // Last feature layer uses stride 1, as in the 70x70 patch design.
            let stride = if i + 1 == n_layers { 1 } else { 2 };
            convs.push(Conv2d::new(
                store,
                &scoped(prefix, &format!("conv{i}")),
                c_in,
                width,
                4,
                stride,
                1,
                Init::Normal(0.02),
                rng,
            ));
            c_in = width;
            width = (width * 2).min(512);
        }
        let head = Conv2d::new(
            store,
            &scoped(prefix, "head"),
            c_in,
            1,
            4,
            1,
            1,
            Init::Normal(0.02),
            rng,
        );
        PatchDiscriminator { convs, head }
    }

    /// Patch score map [N, 1, h', w'].
    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Tx) -> Tx {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, store, h);
            h = g.leaky_relu(h, 0.2);
        }
        self.head.forward(g, store, h)
    }
}
