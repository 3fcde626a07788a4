//! Basic layers: convolution, linear, group normalization.

use rand_chacha::ChaCha8Rng;

use super::{scoped, Init, PId, ParamStore};
use crate::tensor::{Elem, Graph, Tx};

/// Standard group count: 32 capped by the channel width, reduced to the
/// nearest divisor for odd widths.
pub fn auto_groups(channels: usize) -> usize {
    let mut g = 32.min(channels).max(1);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

pub struct Conv2d {
    pub w: PId,
    pub b: Option<PId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(&scoped(prefix, "weight"), vec![c_out, c_in, k, k], init, rng);
        let b = Some(store.add(&scoped(prefix, "bias"), vec![c_out], Init::Zeros, rng));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Tx) -> Tx {
        let w = store.node(g, self.w);
        let b = self.b.map(|b| store.node(g, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub struct Linear {
    pub w: PId,
    pub b: PId,
}

impl Linear {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        f_in: usize,
        f_out: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(&scoped(prefix, "weight"), vec![f_in, f_out], init, rng);
        let b = store.add(&scoped(prefix, "bias"), vec![f_out], Init::Zeros, rng);
        Linear { w, b }
    }

    /// x: [R, f_in] -> [R, f_out].
    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Tx) -> Tx {
        let w = store.node(g, self.w);
        let b = store.node(g, self.b);
        let y = g.matmul(x, w);
        g.add_row_bias(y, b)
    }
}

pub struct GroupNorm {
    pub gamma: PId,
    pub beta: PId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gamma = store.add(&scoped(prefix, "gamma"), vec![channels], Init::Ones, rng);
        let beta = store.add(&scoped(prefix, "beta"), vec![channels], Init::Zeros, rng);
        GroupNorm {
            gamma,
            beta,
            groups: auto_groups(channels),
            eps: 1e-5,
        }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Tx) -> Tx {
        let gamma = store.node(g, self.gamma);
        let beta = store.node(g, self.beta);
        g.group_norm(x, self.groups, gamma, beta, self.eps)
    }
}
