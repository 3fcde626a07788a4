//! Few-step latent diffusion: variance schedule, forward marginal,
//! sinusoidal embeddings, the conditioning network, the denoising UNet and
//! the full reverse rollout (deterministic for training, stochastic for
//! inference).

use rand_chacha::ChaCha8Rng;

use super::autoencoder::{check_encoder_input, sample_eps, EncoderNet};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{scoped, Conv2d, Downsample, GroupNorm, Init, ParamStore, ResBlock, Upsample};
use crate::tensor::{Elem, Graph, Tx, Value};

/// beta_t, alpha_t and cumulative alpha tables for the T-step process.
#[derive(Clone, Debug)]
pub struct VarianceSchedule {
    pub t_steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl VarianceSchedule {
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_steps {
            return Err(Error::InvalidArgument(format!(
                "time step {t} outside 1..={}",
                self.t_steps
            )));
        }
        Ok(())
    }
}

/// Linear interpolation from beta_start (t=1) to beta_end (t=T). The
/// reference setting runs it decreasing, 0.99 -> 0.1.
pub fn build_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<VarianceSchedule> {
    if t_steps == 0 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    let mut betas = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let b = if t_steps == 1 {
            beta_start
        } else {
            beta_start + t as f64 / (t_steps - 1) as f64 * (beta_end - beta_start)
        };
        if !(0.0 < b && b < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta_{} = {b} outside (0, 1)",
                t + 1
            )));
        }
        betas.push(b);
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(VarianceSchedule {
        t_steps,
        betas,
        alphas,
        alpha_bars,
    })
}

/// Forward marginal: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
pub fn q_sample<E: Elem>(
    z0: &Value<E>,
    t: usize,
    eps: &Value<E>,
    sched: &VarianceSchedule,
) -> Result<Value<E>> {
    sched.check_t(t)?;
    if z0.dims() != eps.dims() {
        return Err(Error::Shape("q_sample: eps must match z0".into()));
    }
    let ab = sched.alpha_bar(t);
    let a = E::from_f64(ab.sqrt());
    let b = E::from_f64((1.0 - ab).sqrt());
    let data: Vec<E> = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| a * z + b * e)
        .collect();
    Ok(Value::new(z0.dims().to_vec(), data))
}

/// One reverse update on plain values:
/// z_{t-1} = (z_t - (1-a_t)/sqrt(1-abar_t) * eps_hat) / sqrt(a_t) + sqrt(b_t) * xi.
pub fn reverse_step<E: Elem>(
    z_t: &Value<E>,
    t: usize,
    eps_hat: &Value<E>,
    sched: &VarianceSchedule,
    xi: Option<&Value<E>>,
) -> Result<Value<E>> {
    sched.check_t(t)?;
    if z_t.dims() != eps_hat.dims() {
        return Err(Error::Shape("reverse_step: eps_hat must match z_t".into()));
    }
    let inv_sqrt_a = 1.0 / sched.alpha(t).sqrt();
    let coef = (1.0 - sched.alpha(t)) / (1.0 - sched.alpha_bar(t)).sqrt();
    let sqrt_b = sched.beta(t).sqrt();
    let mut data: Vec<E> = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&z, &e)| E::from_f64((z.to_f64() - coef * e.to_f64()) * inv_sqrt_a))
        .collect();
    if let Some(xi) = xi {
        if xi.dims() != z_t.dims() {
            return Err(Error::Shape("reverse_step: xi must match z_t".into()));
        }
        for (d, x) in data.iter_mut().zip(xi.data()) {
            *d += E::from_f64(sqrt_b * x.to_f64());
        }
    }
    Ok(Value::new(z_t.dims().to_vec(), data))
}

/// Graph version of the reverse update, differentiable through eps_hat.
pub fn reverse_step_g<E: Elem>(
    g: &mut Graph<E>,
    z_t: Tx,
    t: usize,
    eps_hat: Tx,
    sched: &VarianceSchedule,
    xi: Option<Value<E>>,
) -> Result<Tx> {
    sched.check_t(t)?;
    let inv_sqrt_a = 1.0 / sched.alpha(t).sqrt();
    let coef = (1.0 - sched.alpha(t)) / (1.0 - sched.alpha_bar(t)).sqrt();
    let sqrt_b = sched.beta(t).sqrt();
    let scaled_eps = g.affine(eps_hat, -coef, 0.0);
    let inner = g.add(z_t, scaled_eps);
    let mut out = g.affine(inner, inv_sqrt_a, 0.0);
    if let Some(xi) = xi {
        let noise: Vec<E> = xi
            .data()
            .iter()
            .map(|&x| E::from_f64(sqrt_b * x.to_f64()))
            .collect();
        let noise = g.constant(Value::new(xi.dims().to_vec(), noise));
        out = g.add(out, noise);
    }
    Ok(out)
}

/// Transformer-style sinusoidal embedding; frequencies geometric from 1
/// down to 1/10000.
pub fn sinusoidal_embed(v: f64, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "embedding dim {d} must be even and positive"
        )));
    }
    let half = d / 2;
    let mut out = vec![0.0; d];
    for k in 0..half {
        let exponent = if half > 1 {
            k as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = 10000f64.powf(-exponent);
        out[k] = (v * freq).sin();
        out[half + k] = (v * freq).cos();
    }
    Ok(out)
}

/// Map the scale factor onto the embedding's useful range before encoding
/// it like a time step.
pub fn scale_embed_input(s: f64) -> f64 {
    s * 1000.0 / 8.0
}

/// Conditioning network: encoder trunk on the upsampled LR image with a
/// single latent-width head.
pub struct CondNet {
    net: EncoderNet,
}

impl CondNet {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        CondNet {
            net: EncoderNet::new(store, prefix, cfg, 3, cfg.latent_channels, rng),
        }
    }

    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        lr_up: Tx,
    ) -> Result<Tx> {
        check_encoder_input(g, lr_up, lr_up)?;
        Ok(self.net.forward(g, store, lr_up))
    }
}

/// Single-head self-attention over spatial positions.
struct AttnBlock {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
}

impl AttnBlock {
    fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv1 = |store: &mut ParamStore<E>, name: &str, init, rng: &mut _| {
            Conv2d::new(store, &scoped(prefix, name), channels, channels, 1, 1, 0, init, rng)
        };
        AttnBlock {
            norm: GroupNorm::new(store, &scoped(prefix, "norm"), channels, rng),
            q: conv1(store, "q", Init::Normal(0.02), rng),
            k: conv1(store, "k", Init::Normal(0.02), rng),
            v: conv1(store, "v", Init::Normal(0.02), rng),
            proj: conv1(store, "proj", Init::Zeros, rng),
        }
    }

    fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Tx) -> Tx {
        let (n, c, h, w) = g.val(x).nchw();
        let hn = self.norm.forward(g, store, x);
        let q = self.q.forward(g, store, hn);
        let k = self.k.forward(g, store, hn);
        let v = self.v.forward(g, store, hn);
        let q = g.reshape(q, vec![n, c, h * w]);
        let k = g.reshape(k, vec![n, c, h * w]);
        let v = g.reshape(v, vec![n, c, h * w]);
        let qt = g.transpose_12(q);
        let scores = g.batched_matmul(qt, k);
        let scores = g.affine(scores, 1.0 / (c as f64).sqrt(), 0.0);
        let att = g.softmax_last(scores);
        let vt = g.transpose_12(v);
        let out = g.batched_matmul(att, vt);
        let out = g.transpose_12(out);
        let out = g.reshape(out, vec![n, c, h, w]);
        let out = self.proj.forward(g, store, out);
        g.add(out, x)
    }
}

/// Denoising UNet: channel-concat conditioning, three resolution levels at
/// multipliers (1, 2, 4), two residual blocks per level, self-attention at
/// the coarsest, (t, s) embeddings injected per block.
pub struct UNet {
    pub emb_dim: usize,
    in_conv: Conv2d,
    d0: [ResBlock; 2],
    down0: Downsample,
    d1: [ResBlock; 2],
    down1: Downsample,
    mid_a: ResBlock,
    attn: AttnBlock,
    mid_b: ResBlock,
    up1: Upsample,
    u1: [ResBlock; 2],
    up0: Upsample,
    u0: [ResBlock; 2],
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl UNet {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let b = cfg.unet_base;
        let c = cfg.latent_channels;
        let ed = Some(cfg.emb_dim);
        let rb = |store: &mut ParamStore<E>, name: &str, ci: usize, co: usize, rng: &mut _| {
            ResBlock::new(store, &scoped(prefix, name), ci, co, ed, false, rng)
        };
        UNet {
            emb_dim: cfg.emb_dim,
            in_conv: Conv2d::new(
                store,
                &scoped(prefix, "in_conv"),
                2 * c,
                b,
                3,
                1,
                1,
                Init::Normal(0.02),
                rng,
            ),
            d0: [
                rb(store, "d0.block0", b, b, rng),
                rb(store, "d0.block1", b, b, rng),
            ],
            down0: Downsample::new(store, &scoped(prefix, "down0"), b, b, rng),
            d1: [
                rb(store, "d1.block0", b, 2 * b, rng),
                rb(store, "d1.block1", 2 * b, 2 * b, rng),
            ],
            down1: Downsample::new(store, &scoped(prefix, "down1"), 2 * b, 2 * b, rng),
            mid_a: rb(store, "mid.block0", 2 * b, 4 * b, rng),
            attn: AttnBlock::new(store, &scoped(prefix, "mid.attn"), 4 * b, rng),
            mid_b: rb(store, "mid.block1", 4 * b, 4 * b, rng),
            up1: Upsample::new(store, &scoped(prefix, "up1"), 4 * b, 2 * b, rng),
            u1: [
                rb(store, "u1.block0", 4 * b, 2 * b, rng),
                rb(store, "u1.block1", 2 * b, 2 * b, rng),
            ],
            up0: Upsample::new(store, &scoped(prefix, "up0"), 2 * b, b, rng),
            u0: [
                rb(store, "u0.block0", 2 * b, b, rng),
                rb(store, "u0.block1", b, b, rng),
            ],
            out_norm: GroupNorm::new(store, &scoped(prefix, "out_norm"), b, rng),
            out_conv: Conv2d::new(
                store,
                &scoped(prefix, "out_conv"),
                b,
                c,
                3,
                1,
                1,
                Init::Zeros,
                rng,
            ),
        }
    }

    /// Predicted noise for (z_t, c, t, s). z_t and c must share shape.
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        z_t: Tx,
        cond: Tx,
        t: usize,
        s: f64,
    ) -> Result<Tx> {
        let (n, c, h, w) = g.val(z_t).nchw();
        let (n2, c2, h2, w2) = g.val(cond).nchw();
        if (n, c, h, w) != (n2, c2, h2, w2) {
            return Err(Error::Shape(format!(
                "denoiser: z_t {n}x{c}x{h}x{w} vs cond {n2}x{c2}x{h2}x{w2}"
            )));
        }
        let t_emb = sinusoidal_embed(t as f64, self.emb_dim)?;
        let s_emb = sinusoidal_embed(scale_embed_input(s), self.emb_dim)?;
        let emb: Vec<f64> = t_emb.iter().zip(&s_emb).map(|(a, b)| a + b).collect();
        let emb = g.constant(Value::from_f64_slice(vec![1, self.emb_dim], &emb));
        let emb = Some(emb);

        // Pad to a multiple of 4 for the two downsamplings, crop after.
        let ph = (4 - h % 4) % 4;
        let pw = (4 - w % 4) % 4;
        let mut x = g.concat_channels(&[z_t, cond]);
        if ph > 0 || pw > 0 {
            x = g.pad_mirror_br(x, ph, pw);
        }

        let mut hcur = self.in_conv.forward(g, store, x);
        hcur = self.d0[0].forward(g, store, hcur, emb);
        hcur = self.d0[1].forward(g, store, hcur, emb);
        let skip0 = hcur;
        hcur = self.down0.forward(g, store, hcur);
        hcur = self.d1[0].forward(g, store, hcur, emb);
        hcur = self.d1[1].forward(g, store, hcur, emb);
        let skip1 = hcur;
        hcur = self.down1.forward(g, store, hcur);
        hcur = self.mid_a.forward(g, store, hcur, emb);
        hcur = self.attn.forward(g, store, hcur);
        hcur = self.mid_b.forward(g, store, hcur, emb);
        hcur = self.up1.forward(g, store, hcur);
        hcur = g.concat_channels(&[hcur, skip1]);
        hcur = self.u1[0].forward(g, store, hcur, emb);
        hcur = self.u1[1].forward(g, store, hcur, emb);
        hcur = self.up0.forward(g, store, hcur);
        hcur = g.concat_channels(&[hcur, skip0]);
        hcur = self.u0[0].forward(g, store, hcur, emb);
        hcur = self.u0[1].forward(g, store, hcur, emb);
        hcur = self.out_norm.forward(g, store, hcur);
        hcur = g.silu(hcur);
        hcur = self.out_conv.forward(g, store, hcur);
        if ph > 0 || pw > 0 {
            hcur = g.crop_tl(hcur, h, w);
        }
        Ok(hcur)
    }
}

/// Run all T reverse steps from `z_start`. Deterministic when `rng` is
/// None (training rollout); stochastic otherwise (inference). Increments
/// `denoiser_calls` once per step.
#[allow(clippy::too_many_arguments)]
pub fn rollout<E: Elem>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    unet: &UNet,
    sched: &VarianceSchedule,
    z_start: Tx,
    s: f64,
    cond: Tx,
    mut rng: Option<&mut ChaCha8Rng>,
    denoiser_calls: &mut usize,
) -> Result<Tx> {
    let dims = g.val(z_start).dims().to_vec();
    if g.is_recording() {
        let mut z = z_start;
        for t in (1..=sched.t_steps).rev() {
            let eps_hat = unet.forward(g, store, z, cond, t, s)?;
            *denoiser_calls += 1;
            let xi = rng.as_deref_mut().map(|r| sample_eps::<E>(&dims, r));
            z = reverse_step_g(g, z, t, eps_hat, sched, xi)?;
        }
        return Ok(z);
    }
    // Inference: run each step in its own graph so intermediate
    // activations are freed as the loop advances.
    let cond_val = g.detach(cond);
    let mut z_val = g.detach(z_start);
    for t in (1..=sched.t_steps).rev() {
        let mut sg: Graph<E> = Graph::inference();
        let z_t = sg.constant(z_val);
        let c = sg.constant(cond_val.clone());
        let eps_hat = unet.forward(&mut sg, store, z_t, c, t, s)?;
        *denoiser_calls += 1;
        let xi = rng.as_deref_mut().map(|r| sample_eps::<E>(&dims, r));
        let z_next = reverse_step_g(&mut sg, z_t, t, eps_hat, sched, xi)?;
        z_val = sg.detach(z_next);
    }
    Ok(g.constant(z_val))
}
