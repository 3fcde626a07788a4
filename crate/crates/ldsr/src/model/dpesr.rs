//! The SR decoder: a prior-pyramid decoder, a scale-modulated feature
//! refinement branch built from information multi-distillation blocks, and
//! an implicit-function continuous-scale upsampler.

use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{scoped, Conv2d, Init, Linear, Mlp, ParamStore, ResGroup, Upsample};
use crate::tensor::{Elem, Graph, Tx, Value};

const W_INIT: Init = Init::Normal(0.02);
/// Stabilizer inside the coefficient normalization square root.
pub const MOD_EPS: f64 = 1e-8;
/// Number of refinement units (and pyramid levels feeding them).
pub const N_FRU: usize = 4;

/// Four decoded prior feature maps; `h[0]` is the finest (full HR
/// resolution), `h[3]` the coarsest (latent resolution).
pub struct PriorPyramid {
    pub h: [Tx; N_FRU],
}

/// Decoder symmetric to the encoder: one group at latent resolution, then
/// three (upsample, group) stages. Each level is tapped after its group,
/// before the next upsampler.
pub struct PriorDecoder {
    in_conv: Conv2d,
    groups: Vec<ResGroup>,
    ups: Vec<Upsample>,
}

impl PriorDecoder {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let c = cfg.prior_channels;
        let in_conv = Conv2d::new(
            store,
            &scoped(prefix, "in_conv"),
            cfg.latent_channels,
            c,
            3,
            1,
            1,
            W_INIT,
            rng,
        );
        let groups = (0..4)
            .map(|i| ResGroup::new(store, &scoped(prefix, &format!("group{i}")), c, c, 2, rng))
            .collect();
        let ups = (0..3)
            .map(|i| Upsample::new(store, &scoped(prefix, &format!("up{i}")), c, c, rng))
            .collect();
        PriorDecoder {
            in_conv,
            groups,
            ups,
        }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, z: Tx) -> PriorPyramid {
        let mut x = self.in_conv.forward(g, store, z);
        let mut levels = Vec::with_capacity(4);
        for i in 0..4 {
            x = self.groups[i].forward(g, store, x);
            levels.push(x);
            if i < 3 {
                x = self.ups[i].forward(g, store, x);
            }
        }
        // levels were produced coarse-to-fine: h4 first.
        PriorPyramid {
            h: [levels[3], levels[2], levels[1], levels[0]],
        }
    }
}

/// The modulation layer combination: alpha1 * f_prev + alpha2 * prior,
/// with both coefficients as scalar nodes.
pub fn modulate<E: Elem>(g: &mut Graph<E>, f_prev: Tx, prior: Tx, a1: Tx, a2: Tx) -> Tx {
    let left = g.scale_node(f_prev, a1);
    let right = g.scale_node(prior, a2);
    g.add(left, right)
}

/// Normalize one raw coefficient pair: |a| / sqrt(a1^2 + a2^2 + eps).
pub fn normalize_pair<E: Elem>(g: &mut Graph<E>, a1: Tx, a2: Tx) -> (Tx, Tx) {
    let s1 = g.square(a1);
    let s2 = g.square(a2);
    let sum = g.add(s1, s2);
    let sum = g.affine(sum, 1.0, MOD_EPS);
    let denom = g.sqrt(sum);
    let n1 = g.abs(a1);
    let n2 = g.abs(a2);
    (g.div(n1, denom), g.div(n2, denom))
}

/// Scalar nodes (alpha1, alpha2) per refinement unit; unit L2 norm and
/// non-negative by construction.
pub struct ModulationCoeffs {
    pub pairs: Vec<(Tx, Tx)>,
}

/// MLP from the scale factor to the 2 * N_FRU raw coefficients.
pub struct ModulationNet {
    mlp: Mlp,
}

impl ModulationNet {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = cfg.mod_mlp_width;
        let mlp = Mlp::new(store, prefix, &[1, w, w, 2 * N_FRU], rng);
        // Start the raw pairs near (1, 1): the stabilizer eps in the
        // normalization must stay negligible against a1^2 + a2^2, so the
        // normalized pairs are unit-length from the first step.
        let bias = store.get_mut(mlp.last().b);
        for v in bias.data_mut() {
            *v = E::ONE;
        }
        ModulationNet { mlp }
    }

    /// s >= 1 (the working scale range); fed to the MLP as s/8.
    pub fn coeffs<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        s: f64,
    ) -> Result<ModulationCoeffs> {
        if s < 1.0 {
            return Err(Error::Domain(format!("scale {s} < 1")));
        }
        let input = g.constant(Value::new(vec![1, 1], vec![E::from_f64(s / 8.0)]));
        let raw = self.mlp.forward(g, store, input);
        let raw = g.reshape(raw, vec![2 * N_FRU]);
        let pairs = (0..N_FRU)
            .map(|i| {
                let a1 = g.slice_cols_of_vec(raw, 2 * i, 2 * i + 1);
                let a2 = g.slice_cols_of_vec(raw, 2 * i + 1, 2 * i + 2);
                normalize_pair(g, a1, a2)
            })
            .collect();
        Ok(ModulationCoeffs { pairs })
    }
}

/// Information multi-distillation block: three split-distill steps at rate
/// 1/4, a final conv, 1x1 fusion, channel attention, residual add.
pub struct Imdb {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    c4: Conv2d,
    compress: Conv2d,
    att1: Linear,
    att2: Linear,
    channels: usize,
}

impl Imdb {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(channels % 4 == 0, "imdb needs channels divisible by 4");
        let cd = channels / 4;
        let cr = channels - cd;
        let conv = |store: &mut ParamStore<E>, name: &str, ci: usize, co: usize, k: usize, rng: &mut _| {
            Conv2d::new(store, &scoped(prefix, name), ci, co, k, 1, k / 2, W_INIT, rng)
        };
        Imdb {
            c1: conv(store, "conv1", channels, channels, 3, rng),
            c2: conv(store, "conv2", cr, channels, 3, rng),
            c3: conv(store, "conv3", cr, channels, 3, rng),
            c4: conv(store, "conv4", cr, cd, 3, rng),
            compress: conv(store, "compress", channels, channels, 1, rng),
            att1: Linear::new(store, &scoped(prefix, "att1"), channels, cd.max(1), Init::HeNormal, rng),
            att2: Linear::new(store, &scoped(prefix, "att2"), cd.max(1), channels, Init::HeNormal, rng),
            channels,
        }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Tx) -> Tx {
        let c = self.channels;
        let cd = c / 4;
        let slope = 0.05;
        let o1 = self.c1.forward(g, store, x);
        let o1 = g.leaky_relu(o1, slope);
        let d1 = g.slice_channels(o1, 0, cd);
        let r1 = g.slice_channels(o1, cd, c);
        let o2 = self.c2.forward(g, store, r1);
        let o2 = g.leaky_relu(o2, slope);
        let d2 = g.slice_channels(o2, 0, cd);
        let r2 = g.slice_channels(o2, cd, c);
        let o3 = self.c3.forward(g, store, r2);
        let o3 = g.leaky_relu(o3, slope);
        let d3 = g.slice_channels(o3, 0, cd);
        let r3 = g.slice_channels(o3, cd, c);
        let d4 = self.c4.forward(g, store, r3);
        let d4 = g.leaky_relu(d4, slope);
        let cat = g.concat_channels(&[d1, d2, d3, d4]);
        let f = self.compress.forward(g, store, cat);
        let pooled = g.global_avg_pool(f);
        let a = self.att1.forward(g, store, pooled);
        let a = g.relu(a);
        let a = self.att2.forward(g, store, a);
        let gate = g.sigmoid(a);
        let gated = g.mul_channels(f, gate);
        g.add(gated, x)
    }
}

/// Feature refinement unit: a chain of IMDBs whose outputs are concatenated
/// and compressed by a 1x1 conv, plus a residual connection.
pub struct Fru {
    imdbs: Vec<Imdb>,
    compress: Conv2d,
}

impl Fru {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
        n_imdb: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(n_imdb >= 1);
        let imdbs = (0..n_imdb)
            .map(|i| Imdb::new(store, &scoped(prefix, &format!("imdb{i}")), channels, rng))
            .collect();
        let compress = Conv2d::new(
            store,
            &scoped(prefix, "compress"),
            channels * n_imdb,
            channels,
            1,
            1,
            0,
            W_INIT,
            rng,
        );
        Fru { imdbs, compress }
    }

    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Tx) -> Tx {
        let mut cur = x;
        let mut outs = Vec::with_capacity(self.imdbs.len());
        for b in &self.imdbs {
            cur = b.forward(g, store, cur);
            outs.push(cur);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_channels(&outs)
        };
        let f = self.compress.forward(g, store, cat);
        g.add(f, x)
    }
}

/// Continuous-scale upsampling module: a pixel-shuffle feature pyramid with
/// ratios 1..=T, bilinear queries fused by scale-conditioned softmax
/// weights, read out by a five-layer MLP.
pub struct Csum {
    level_convs: Vec<Conv2d>,
    fusion: Mlp,
    mlp: Mlp,
    pub levels: usize,
    pub channels: usize,
}

impl Csum {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let t = cfg.csum_levels;
        let cc = cfg.csum_channels;
        let level_convs = (1..=t)
            .map(|r| {
                Conv2d::new(
                    store,
                    &scoped(prefix, &format!("level{r}")),
                    cfg.sr_channels,
                    cc * r * r,
                    3,
                    1,
                    1,
                    W_INIT,
                    rng,
                )
            })
            .collect();
        let fw = cfg.fusion_mlp_width;
        let fusion = Mlp::new(store, &scoped(prefix, "fusion"), &[1, fw, t], rng);
        let w = cfg.csum_mlp_width;
        let mlp = Mlp::new(
            store,
            &scoped(prefix, "mlp"),
            &[cc + 3, w, w, w, w, 3],
            rng,
        );
        // Center the readout at mid-gray so raw outputs start inside [0, 1].
        let last = mlp.last();
        let bias = store.get_mut(last.b);
        for v in bias.data_mut() {
            *v = E::from_f64(0.5);
        }
        Csum {
            level_convs,
            fusion,
            mlp,
            levels: t,
            channels: cc,
        }
    }

    /// Per-ratio conv + depth-to-space feature maps M_1..M_T.
    pub fn build_maps<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        feats: Tx,
    ) -> Vec<Tx> {
        self.level_convs
            .iter()
            .enumerate()
            .map(|(i, conv)| {
                let r = i + 1;
                let expanded = conv.forward(g, store, feats);
                if r == 1 {
                    expanded
                } else {
                    g.pixel_shuffle(expanded, r)
                }
            })
            .collect()
    }

    /// Softmax fusion weights from the scale factor; a probability vector
    /// over the T pyramid levels.
    pub fn fusion_weights<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        s: f64,
    ) -> Vec<Tx> {
        let input = g.constant(Value::new(vec![1, 1], vec![E::from_f64(s / 8.0)]));
        let logits = self.fusion.forward(g, store, input);
        let w = g.softmax_last(logits);
        (0..self.levels)
            .map(|t| {
                let wt = g.slice_cols(w, t, t + 1);
                g.reshape(wt, vec![1])
            })
            .collect()
    }

    /// Evaluate the implicit function at the given normalized coordinates.
    /// Returns RGB rows [N*Q, 3].
    pub fn sample<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        feats: Tx,
        s: f64,
        coords: &[(f64, f64)],
    ) -> Result<Tx> {
        if s < 1.0 {
            return Err(Error::Domain(format!("scale {s} < 1")));
        }
        for &(x, y) in coords {
            if !(-1.0..=1.0).contains(&x) || !(-1.0..=1.0).contains(&y) {
                return Err(Error::Domain(format!(
                    "query coordinate ({x}, {y}) outside [-1, 1]"
                )));
            }
        }
        let (n, _, lh, lw) = g.val(feats).nchw();
        let maps = self.build_maps(g, store, feats);
        let weights = self.fusion_weights(g, store, s);
        let mut fused: Option<Tx> = None;
        for (m, wt) in maps.iter().zip(&weights) {
            let y = g.bilinear_sample(*m, coords);
            let wy = g.scale_node(y, *wt);
            fused = Some(match fused {
                Some(acc) => g.add(acc, wy),
                None => wy,
            });
        }
        let fused = fused.expect("at least one pyramid level");

        // Relative offset to the nearest cell center of the finest map, in
        // cell units, plus 1/s.
        let (fh, fw) = (lh * self.levels, lw * self.levels);
        let q = coords.len();
        let mut extra = vec![E::ZERO; n * q * 3];
        for (qi, &(cx, cy)) in coords.iter().enumerate() {
            let u = (cx + 1.0) * 0.5 * fw as f64 - 0.5;
            let v = (cy + 1.0) * 0.5 * fh as f64 - 0.5;
            let off_x = u - u.round();
            let off_y = v - v.round();
            for ni in 0..n {
                let row = (ni * q + qi) * 3;
                extra[row] = E::from_f64(off_x);
                extra[row + 1] = E::from_f64(off_y);
                extra[row + 2] = E::from_f64(1.0 / s);
            }
        }
        let extra = g.constant(Value::new(vec![n * q, 3], extra));
        let inp = g.concat_cols(fused, extra);
        Ok(self.mlp.forward(g, store, inp))
    }
}

/// Pixel-center query grid covering an (oh, ow) output, in [-1, 1].
pub fn full_grid(oh: usize, ow: usize) -> Vec<(f64, f64)> {
    let mut coords = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let y = -1.0 + (2 * i + 1) as f64 / oh as f64;
        for j in 0..ow {
            let x = -1.0 + (2 * j + 1) as f64 / ow as f64;
            coords.push((x, y));
        }
    }
    coords
}

/// The full decoder with its ablation wirings.
pub struct DpesrNet {
    pub cfg: ModelConfig,
    pub dec: Option<PriorDecoder>,
    pub modulation: Option<ModulationNet>,
    /// Per-level 3x3 conv adapting resized prior maps to the branch width.
    pub prior_convs: Vec<Conv2d>,
    /// 1x1 fusion convs replacing modulation when it is disabled.
    pub fuse_convs: Vec<Conv2d>,
    pub shallow: Option<Conv2d>,
    pub frus: Vec<Fru>,
    pub csum: Csum,
}

impl DpesrNet {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let use_prior = !cfg.disable_prior_connections;
        let use_sr = !cfg.disable_sr_branch;
        let sc = cfg.sr_channels;

        let dec = use_prior.then(|| PriorDecoder::new(store, &scoped(prefix, "dec"), cfg, rng));
        let modulation = (use_prior && !cfg.disable_modulation)
            .then(|| ModulationNet::new(store, &scoped(prefix, "mod_mlp"), cfg, rng));
        let prior_convs = if use_prior {
            (0..N_FRU)
                .map(|i| {
                    Conv2d::new(
                        store,
                        &scoped(prefix, &format!("prior_conv{i}")),
                        cfg.prior_channels,
                        sc,
                        3,
                        1,
                        1,
                        W_INIT,
                        rng,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let fuse_convs = if use_prior && cfg.disable_modulation {
            (0..N_FRU)
                .map(|i| {
                    Conv2d::new(
                        store,
                        &scoped(prefix, &format!("fuse{i}")),
                        2 * sc,
                        sc,
                        1,
                        1,
                        0,
                        W_INIT,
                        rng,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let shallow = use_sr.then(|| {
            Conv2d::new(store, &scoped(prefix, "shallow"), 3, sc, 3, 1, 1, W_INIT, rng)
        });
        let frus = if use_sr {
            (0..N_FRU)
                .map(|i| {
                    Fru::new(
                        store,
                        &scoped(prefix, &format!("fru{i}")),
                        sc,
                        cfg.imdb_per_fru,
                        rng,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let csum = Csum::new(store, &scoped(prefix, "csum"), cfg, rng);
        DpesrNet {
            cfg: cfg.clone(),
            dec,
            modulation,
            prior_convs,
            fuse_convs,
            shallow,
            frus,
            csum,
        }
    }

    /// Output dims for an LR input under the effective scale.
    pub fn output_dims(lr_h: usize, lr_w: usize, s: f64) -> (usize, usize) {
        (
            ((s * lr_h as f64) / 8.0).floor() as usize * 8,
            ((s * lr_w as f64) / 8.0).floor() as usize * 8,
        )
    }

    /// Decode + refine + continuous upsample: (lr, z, s) -> HR image node,
    /// clamped to [0, 1].
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        lr: Tx,
        z: Option<Tx>,
        s: f64,
    ) -> Result<Tx> {
        if s < 1.0 {
            return Err(Error::Domain(format!("scale {s} < 1")));
        }
        let (n, lc, lh, lw) = g.val(lr).nchw();
        if lc != 3 {
            return Err(Error::Shape(format!("lr must have 3 channels, got {lc}")));
        }
        let use_prior = !self.cfg.disable_prior_connections;
        let (oh, ow) = if use_prior {
            let z = z.ok_or_else(|| Error::Shape("this wiring requires a latent code".into()))?;
            let (zn, zc, zh, zw) = g.val(z).nchw();
            if zn != n || zc != self.cfg.latent_channels {
                return Err(Error::Shape(format!(
                    "latent shape {zn}x{zc} incompatible with lr batch {n}"
                )));
            }
            let (oh, ow) = (zh * 8, zw * 8);
            let eh = s * lh as f64;
            let ew = s * lw as f64;
            if (eh - oh as f64).abs() > 1e-6 * oh as f64 + 1e-9
                || (ew - ow as f64).abs() > 1e-6 * ow as f64 + 1e-9
            {
                return Err(Error::Shape(format!(
                    "inconsistent (lr, z, s): s*lr = {eh:.3}x{ew:.3} but latent implies {oh}x{ow}"
                )));
            }
            (oh, ow)
        } else {
            Self::output_dims(lh, lw, s)
        };

        let pyramid = match (&self.dec, z) {
            (Some(dec), Some(z)) if use_prior => Some(dec.forward(g, store, z)),
            _ => None,
        };
        let coeffs = match &self.modulation {
            Some(m) => Some(m.coeffs(g, store, s)?),
            None => None,
        };

        // Initial branch features.
        let shallow_feats = self.shallow.as_ref().map(|c| c.forward(g, store, lr));
        let mut f = match shallow_feats {
            Some(t) => t,
            None => g.constant(Value::zeros(vec![n, self.cfg.sr_channels, lh, lw])),
        };

        for i in 0..N_FRU {
            if let Some(py) = &pyramid {
                let resized = g.bicubic_resize(py.h[i], lh, lw);
                let prior = self.prior_convs[i].forward(g, store, resized);
                f = match &coeffs {
                    Some(cc) => {
                        let (a1, a2) = cc.pairs[i];
                        modulate(g, f, prior, a1, a2)
                    }
                    None => {
                        let cat = g.concat_channels(&[f, prior]);
                        self.fuse_convs[i].forward(g, store, cat)
                    }
                };
            }
            if !self.frus.is_empty() {
                f = self.frus[i].forward(g, store, f);
            }
        }
        if let Some(sh) = shallow_feats {
            f = g.add(f, sh);
        }

        let coords = full_grid(oh, ow);
        let rows = self.csum.sample(g, store, f, s, &coords)?;
        let img = g.rows_to_image(rows, n, oh, ow);
        Ok(g.clamp(img, 0.0, 1.0))
    }
}
