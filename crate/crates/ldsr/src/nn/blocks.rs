//! Residual blocks and the small composite modules shared by the encoder,
//! decoder and denoiser.

use rand_chacha::ChaCha8Rng;

use super::layers::{Conv2d, GroupNorm, Linear};
use super::{scoped, Init, ParamStore};
use crate::tensor::{Elem, Graph, Tx};

const W_INIT: Init = Init::Normal(0.02);

/// norm -> silu -> conv, twice, with identity or 1x1 skip. An optional
/// embedding input is injected between the convs as a learned per-channel
/// (scale, shift).
pub struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    emb_proj: Option<Linear>,
    c_out: usize,
}

impl ResBlock {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        emb_dim: Option<usize>,
        zero_last: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gn1 = GroupNorm::new(store, &scoped(prefix, "norm1"), c_in, rng);
        let conv1 = Conv2d::new(store, &scoped(prefix, "conv1"), c_in, c_out, 3, 1, 1, W_INIT, rng);
        let gn2 = GroupNorm::new(store, &scoped(prefix, "norm2"), c_out, rng);
        let conv2 = Conv2d::new(
            store,
            &scoped(prefix, "conv2"),
            c_out,
            c_out,
            3,
            1,
            1,
            if zero_last { Init::Zeros } else { W_INIT },
            rng,
        );
        let skip = (c_in != c_out)
            .then(|| Conv2d::new(store, &scoped(prefix, "skip"), c_in, c_out, 1, 1, 0, W_INIT, rng));
        let emb_proj =
            emb_dim.map(|d| Linear::new(store, &scoped(prefix, "emb"), d, 2 * c_out, W_INIT, rng));
        ResBlock {
            gn1,
            conv1,
            gn2,
            conv2,
            skip,
            emb_proj,
            c_out,
        }
    }

    /// `emb` is a [1, emb_dim] node when the block was built with one.
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        x: Tx,
        emb: Option<Tx>,
    ) -> Tx {
        let mut h = self.gn1.forward(g, store, x);
        h = g.silu(h);
        h = self.conv1.forward(g, store, h);
        h = self.gn2.forward(g, store, h);
        if let (Some(proj), Some(emb)) = (&self.emb_proj, emb) {
            let e = g.silu(emb);
            let e = proj.forward(g, store, e);
            let e = g.reshape(e, vec![2 * self.c_out]);
            let scale = g.slice_cols_of_vec(e, 0, self.c_out);
            let shift = g.slice_cols_of_vec(e, self.c_out, 2 * self.c_out);
            h = g.channel_affine(h, scale, shift);
        }
        h = g.silu(h);
        h = self.conv2.forward(g, store, h);
        let s = match &self.skip {
            Some(conv) => conv.forward(g, store, x),
            None => x,
        };
        g.add(h, s)
    }
}

/// A sequence of residual blocks at one width. The second conv of the last
/// block is zero-initialized so a fresh group starts as near-identity.
pub struct ResGroup {
    blocks: Vec<ResBlock>,
}

impl ResGroup {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        n_blocks: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let blocks = (0..n_blocks)
            .map(|i| {
                ResBlock::new(
                    store,
                    &scoped(prefix, &format!("block{i}")),
                    if i == 0 { c_in } else { c_out },
                    c_out,
                    None,
                    i + 1 == n_blocks,
                    rng,
                )
            })
            .collect();
        ResGroup { blocks }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, mut x: Tx) -> Tx {
        for b in &self.blocks {
            x = b.forward(g, store, x, None);
        }
        x
    }
}

/// Stride-2 conv downsampler.
pub struct Downsample {
    conv: Conv2d,
}

impl Downsample {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Downsample {
            conv: Conv2d::new(store, prefix, c_in, c_out, 3, 2, 1, W_INIT, rng),
        }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Tx) -> Tx {
        self.conv.forward(g, store, x)
    }
}

/// Nearest 2x upsample followed by a 3x3 conv.
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Upsample {
            conv: Conv2d::new(store, prefix, c_in, c_out, 3, 1, 1, W_INIT, rng),
        }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Tx) -> Tx {
        let up = g.nearest_up2(x);
        self.conv.forward(g, store, up)
    }
}

/// Plain fully-connected stack with ReLU between layers.
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        widths: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(widths.len() >= 2);
        let layers = (0..widths.len() - 1)
            .map(|i| {
                Linear::new(
                    store,
                    &scoped(prefix, &format!("fc{i}")),
                    widths[i],
                    widths[i + 1],
                    Init::HeNormal,
                    rng,
                )
            })
            .collect();
        Mlp { layers }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, mut x: Tx) -> Tx {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, store, x);
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        x
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }
}
