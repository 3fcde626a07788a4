//! The differential-prior encoder and its latent heads: a Gaussian
//! (mu, log-variance) distribution with KL regularization, or a vector
//! quantizer with a learned codebook.

use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{scoped, Conv2d, Downsample, GroupNorm, Init, PId, ParamStore, ResGroup};
use crate::tensor::{Elem, Graph, Tx, Value};

pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 20.0;

/// Per-pixel Gaussian over the latent grid, as graph nodes.
pub struct LatentDistribution {
    pub mu: Tx,
    pub log_var: Tx,
}

/// Shared encoder trunk: input conv, four residual groups at widths
/// base*(1,2,2,4) with a stride-2 downsampler after each of the first
/// three, and a conv head. Used by the differential-prior encoder (6 input
/// channels, 2C outputs) and the conditioning network (3 inputs, C outputs).
pub struct EncoderNet {
    in_conv: Conv2d,
    groups: Vec<ResGroup>,
    downs: Vec<Downsample>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl EncoderNet {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        cfg: &ModelConfig,
        in_channels: usize,
        out_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let b = cfg.base_channels;
        let widths = [b, 2 * b, 2 * b, 4 * b];
        let in_conv = Conv2d::new(
            store,
            &scoped(prefix, "in_conv"),
            in_channels,
            widths[0],
            3,
            1,
            1,
            Init::Normal(0.02),
            rng,
        );
        let mut groups = Vec::new();
        let mut downs = Vec::new();
        for (i, &wd) in widths.iter().enumerate() {
            let c_in = if i == 0 { widths[0] } else { widths[i - 1] };
            groups.push(ResGroup::new(
                store,
                &scoped(prefix, &format!("group{i}")),
                c_in,
                wd,
                2,
                rng,
            ));
            if i < 3 {
                downs.push(Downsample::new(
                    store,
                    &scoped(prefix, &format!("down{i}")),
                    wd,
                    wd,
                    rng,
                ));
            }
        }
        let out_norm = GroupNorm::new(store, &scoped(prefix, "out_norm"), widths[3], rng);
        let out_conv = Conv2d::new(
            store,
            &scoped(prefix, "out_conv"),
            widths[3],
            out_channels,
            3,
            1,
            1,
            Init::Normal(0.02),
            rng,
        );
        EncoderNet {
            in_conv,
            groups,
            downs,
            out_norm,
            out_conv,
        }
    }

    /// x must have spatial dims divisible by 8; output is at 1/8 resolution.
    pub fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Tx) -> Tx {
        let mut h = self.in_conv.forward(g, store, x);
        for i in 0..4 {
            h = self.groups[i].forward(g, store, h);
            if i < 3 {
                h = self.downs[i].forward(g, store, h);
            }
        }
        h = self.out_norm.forward(g, store, h);
        h = g.silu(h);
        self.out_conv.forward(g, store, h)
    }
}

/// Check the (hr, lr_up) pair shares dims and is divisible by 8.
pub fn check_encoder_input<E: Elem>(g: &Graph<E>, hr: Tx, lr_up: Tx) -> Result<()> {
    let (n1, c1, h1, w1) = g.val(hr).nchw();
    let (n2, c2, h2, w2) = g.val(lr_up).nchw();
    if (n1, c1, h1, w1) != (n2, c2, h2, w2) {
        return Err(Error::Shape(format!(
            "hr {h1}x{w1} and lr_up {h2}x{w2} must match"
        )));
    }
    if h1 % 8 != 0 || w1 % 8 != 0 {
        return Err(Error::Shape(format!(
            "encoder input dims {h1}x{w1} must be divisible by 8"
        )));
    }
    Ok(())
}

/// Differential-prior encoding: concat(hr, lr_up) -> (mu, log_var), each
/// with `latent_channels` channels at 1/8 resolution. log_var is clamped.
pub fn dp_encode<E: Elem>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    enc: &EncoderNet,
    cfg: &ModelConfig,
    hr: Tx,
    lr_up: Tx,
) -> Result<LatentDistribution> {
    check_encoder_input(g, hr, lr_up)?;
    let x = g.concat_channels(&[hr, lr_up]);
    let out = enc.forward(g, store, x);
    let c = cfg.latent_channels;
    let mu = g.slice_channels(out, 0, c);
    let log_var_raw = g.slice_channels(out, c, 2 * c);
    let log_var = g.clamp(log_var_raw, LOG_VAR_MIN, LOG_VAR_MAX);
    Ok(LatentDistribution { mu, log_var })
}

/// z = mu + exp(0.5 * log_var) * eps with eps ~ N(0, I) supplied as a value.
pub fn reparameterize_with<E: Elem>(
    g: &mut Graph<E>,
    dist: &LatentDistribution,
    eps: Value<E>,
) -> Tx {
    let lv = g.clamp(dist.log_var, LOG_VAR_MIN, LOG_VAR_MAX);
    let half = g.affine(lv, 0.5, 0.0);
    let sigma = g.exp(half);
    let e = g.constant(eps);
    let noise = g.mul(sigma, e);
    g.add(dist.mu, noise)
}

/// Standard-normal draw shaped like the distribution.
pub fn sample_eps<E: Elem>(dims: &[usize], rng: &mut ChaCha8Rng) -> Value<E> {
    use rand::Rng;
    let dist = rand_distr::StandardNormal;
    let n: usize = dims.iter().product();
    let data: Vec<E> = (0..n)
        .map(|_| E::from_f64(rng.sample::<f64, _>(dist)))
        .collect();
    Value::new(dims.to_vec(), data)
}

pub fn reparameterize<E: Elem>(
    g: &mut Graph<E>,
    dist: &LatentDistribution,
    rng: &mut ChaCha8Rng,
) -> Tx {
    let dims = g.val(dist.mu).dims().to_vec();
    let eps = sample_eps::<E>(&dims, rng);
    reparameterize_with(g, dist, eps)
}

/// Mean KL divergence to a standard Gaussian:
/// mean(0.5 * (mu^2 + exp(log_var) - 1 - log_var)).
pub fn kl_divergence<E: Elem>(g: &mut Graph<E>, dist: &LatentDistribution) -> Tx {
    let lv = g.clamp(dist.log_var, LOG_VAR_MIN, LOG_VAR_MAX);
    let mu2 = g.square(dist.mu);
    let var = g.exp(lv);
    let a = g.add(mu2, var);
    let b = g.sub(a, lv);
    let c = g.affine(b, 0.5, -0.5);
    g.mean_all(c)
}

/// Learned codebook for the VQ latent variant.
pub struct VqCodebook {
    pub entries: PId,
    pub k: usize,
    pub dim: usize,
}

impl VqCodebook {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        prefix: &str,
        k: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let entries = store.add(
            &scoped(prefix, "entries"),
            vec![k, dim],
            Init::Normal(0.02),
            rng,
        );
        VqCodebook { entries, k, dim }
    }
}

pub struct VqOut {
    /// Quantized code with a straight-through gradient to the input.
    pub quantized: Tx,
    /// Mean squared L2 distance between z and its quantized value, per
    /// spatial vector.
    pub commitment: Tx,
    /// Same distance but flowing into the codebook entries.
    pub codebook_loss: Tx,
    /// Chosen entry per spatial position (ties break to the lowest index).
    pub indices: Vec<usize>,
}

/// Nearest-codebook quantization of an NCHW latent.
pub fn vq_quantize<E: Elem>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    book: &VqCodebook,
    z: Tx,
) -> Result<VqOut> {
    let vz = g.val(z).clone();
    let (n, c, h, w) = vz.nchw();
    if c != book.dim {
        return Err(Error::Shape(format!(
            "vq_quantize: latent has {c} channels, codebook dim is {}",
            book.dim
        )));
    }
    let entries = store.get(book.entries).data().to_vec();
    let hw = h * w;
    let positions = n * hw;
    let mut indices = vec![0usize; positions];
    let mut quantized = vec![E::ZERO; vz.numel()];
    let mut z_rows = vec![E::ZERO; positions * c];
    for ni in 0..n {
        for p in 0..hw {
            let pos = ni * hw + p;
            for ci in 0..c {
                z_rows[pos * c + ci] = vz.data()[(ni * c + ci) * hw + p];
            }
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for k in 0..book.k {
                let mut d = 0.0f64;
                for ci in 0..c {
                    let diff =
                        (z_rows[pos * c + ci] - entries[k * c + ci]).to_f64();
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            indices[pos] = best;
            for ci in 0..c {
                quantized[(ni * c + ci) * hw + p] = entries[best * c + ci];
            }
        }
    }
    let q_val = Value::new(vec![n, c, h, w], quantized);

    // Straight-through: q_st = z + const(q - z), so d(q_st)/dz = I.
    let delta: Vec<E> = q_val
        .data()
        .iter()
        .zip(vz.data())
        .map(|(&q, &zv)| q - zv)
        .collect();
    let delta = g.constant(Value::new(vec![n, c, h, w], delta));
    let quantized_st = g.add(z, delta);

    // Commitment: gradient to the encoder only (codebook held constant).
    let q_const = g.constant(q_val);
    let d = g.sub(z, q_const);
    let d2 = g.square(d);
    let s = g.sum_all(d2);
    let commitment = g.affine(s, 1.0 / positions as f64, 0.0);

    // Codebook loss: gradient to the entries only (encoder held constant).
    let table = store.node(g, book.entries);
    let gathered = g.gather_rows(table, &indices);
    let z_rows_const = g.constant(Value::new(vec![positions, c], z_rows));
    let dq = g.sub(gathered, z_rows_const);
    let dq2 = g.square(dq);
    let sq = g.sum_all(dq2);
    let codebook_loss = g.affine(sq, 1.0 / positions as f64, 0.0);

    Ok(VqOut {
        quantized: quantized_st,
        commitment,
        codebook_loss,
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::{central_diff, rel_err};
    use rand::SeedableRng;

    fn dist_from(mu: Vec<f64>, lv: Vec<f64>, dims: Vec<usize>) -> (Graph<f64>, LatentDistribution) {
        let mut g = Graph::recording();
        let mu = g.leaf(Value::new(dims.clone(), mu), true);
        let log_var = g.leaf(Value::new(dims, lv), true);
        (g, LatentDistribution { mu, log_var })
    }

    #[test]
    fn kl_of_standard_gaussian_is_zero() {
        let (mut g, d) = dist_from(vec![0.0; 8], vec![0.0; 8], vec![1, 2, 2, 2]);
        let kl = kl_divergence(&mut g, &d);
        assert!(g.val(kl).data()[0].abs() < 1e-12);
    }

    #[test]
    fn kl_closed_forms() {
        let (mut g, d) = dist_from(vec![1.0; 4], vec![0.0; 4], vec![1, 1, 2, 2]);
        let kl = kl_divergence(&mut g, &d);
        assert!((g.val(kl).data()[0] - 0.5).abs() < 1e-12);

        let lv = (2.0f64).ln();
        let (mut g, d) = dist_from(vec![0.0; 4], vec![lv; 4], vec![1, 1, 2, 2]);
        let kl = kl_divergence(&mut g, &d);
        let want = 0.5 * (2.0 - 1.0 - lv);
        assert!((g.val(kl).data()[0] - want).abs() < 1e-12);
        assert!((want - 0.1534).abs() < 1e-4);
    }

    #[test]
    fn kl_gradcheck_against_finite_differences() {
        let mu0 = vec![0.3, -0.7, 1.2, 0.05];
        let lv0 = vec![-0.2, 0.4, 0.9, -1.1];
        let (mut g, d) = dist_from(mu0.clone(), lv0.clone(), vec![1, 1, 2, 2]);
        let kl = kl_divergence(&mut g, &d);
        let mut grads = g.backward(kl);
        let gmu = grads.take(d.mu).unwrap();
        let glv = grads.take(d.log_var).unwrap();

        let eval = |mu: &[f64], lv: &[f64]| -> f64 {
            let mut g: Graph<f64> = Graph::inference();
            let m = g.leaf(Value::new(vec![1, 1, 2, 2], mu.to_vec()), false);
            let l = g.leaf(Value::new(vec![1, 1, 2, 2], lv.to_vec()), false);
            let kl = kl_divergence(&mut g, &LatentDistribution { mu: m, log_var: l });
            g.val(kl).data()[0]
        };
        let mut mu_m = mu0.clone();
        let lv_fixed = lv0.clone();
        let mut f_mu = move |xs: &[f64]| eval(xs, &lv_fixed);
        for i in 0..4 {
            let num = central_diff(&mut mu_m, i, 1e-6, &mut f_mu);
            assert!(rel_err(gmu[i], num) < 1e-4, "mu[{i}]: {} vs {num}", gmu[i]);
        }
        let mu_fixed = mu0;
        let mut lv_m = lv0;
        let mut f_lv = move |xs: &[f64]| eval(&mu_fixed, xs);
        for i in 0..4 {
            let num = central_diff(&mut lv_m, i, 1e-6, &mut f_lv);
            assert!(rel_err(glv[i], num) < 1e-4, "lv[{i}]: {} vs {num}", glv[i]);
        }
    }

    #[test]
    fn reparameterize_clamps_extreme_log_var() {
        let (mut g, d) = dist_from(vec![0.7; 4], vec![-1e9; 4], vec![1, 1, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = reparameterize(&mut g, &d, &mut rng);
        for v in g.val(z).data() {
            assert!((v - 0.7).abs() < 1e-4);
        }
    }

    #[test]
    fn reparameterize_zero_mu_unit_var_returns_eps() {
        let (mut g, d) = dist_from(vec![0.0; 4], vec![0.0; 4], vec![1, 1, 2, 2]);
        let eps = Value::new(vec![1, 1, 2, 2], vec![0.3, -1.2, 0.8, 2.5]);
        let z = reparameterize_with(&mut g, &d, eps.clone());
        for (a, b) in g.val(z).data().iter().zip(eps.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reparameterize_monte_carlo_statistics() {
        // mu = 1, log_var = 0: sample mean ~ 1, variance ~ 1 over 1e5 draws.
        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for _ in 0..n {
            let (mut g, d) = dist_from(vec![1.0], vec![0.0], vec![1, 1, 1, 1]);
            let z = reparameterize(&mut g, &d, &mut rng);
            let v = g.val(z).data()[0];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn vq_known_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store: ParamStore<f64> = ParamStore::new();
        let book = VqCodebook::new(&mut store, "vq", 2, 4, &mut rng);
        store.get_mut(book.entries).set_data(vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);

        // Vector (0.4, 0.4, 0.4, 0.4): nearest is entry 0, squared L2 0.64.
        let mut g: Graph<f64> = Graph::recording();
        let z = g.leaf(Value::new(vec![1, 4, 1, 1], vec![0.4; 4]), true);
        let out = vq_quantize(&mut g, &store, &book, z).unwrap();
        assert_eq!(out.indices, vec![0]);
        assert!((g.val(out.commitment).data()[0] - 0.64).abs() < 1e-12);
        for v in g.val(out.quantized).data() {
            assert!(v.abs() < 1e-12);
        }

        // Exact codebook vector: zero loss, identity quantization.
        let mut g: Graph<f64> = Graph::recording();
        let z = g.leaf(Value::new(vec![1, 4, 1, 1], vec![1.0; 4]), true);
        let out = vq_quantize(&mut g, &store, &book, z).unwrap();
        assert_eq!(out.indices, vec![1]);
        assert_eq!(g.val(out.commitment).data()[0], 0.0);

        // Equidistant vector ties to the lowest index.
        let mut g: Graph<f64> = Graph::recording();
        let z = g.leaf(Value::new(vec![1, 4, 1, 1], vec![0.5; 4]), true);
        let out = vq_quantize(&mut g, &store, &book, z).unwrap();
        assert_eq!(out.indices, vec![0]);
    }

    #[test]
    fn vq_straight_through_gradient_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store: ParamStore<f64> = ParamStore::new();
        let book = VqCodebook::new(&mut store, "vq", 3, 2, &mut rng);
        store.get_mut(book.entries).set_data(vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);

        let mut g: Graph<f64> = Graph::recording();
        let z = g.leaf(Value::new(vec![1, 2, 2, 1], vec![0.9, 0.2, 0.1, 0.8]), true);
        let out = vq_quantize(&mut g, &store, &book, z).unwrap();
        // loss = sum(q_st): straight-through means dz = 1 everywhere.
        let s = g.sum_all(out.quantized);
        let mut grads = g.backward(s);
        let gz = grads.take(z).unwrap();
        for v in gz {
            assert!((v - 1.0).abs() < 1e-12);
        }

        // Idempotence: quantizing a quantized code is the identity.
        let mut g: Graph<f64> = Graph::recording();
        let q = g.leaf(Value::new(vec![1, 2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]), false);
        let out2 = vq_quantize(&mut g, &store, &book, q).unwrap();
        assert_eq!(g.val(out2.quantized).data(), g.val(q).data());
        assert_eq!(g.val(out2.commitment).data()[0], 0.0);
    }

    #[test]
    fn vq_dim_mismatch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store: ParamStore<f64> = ParamStore::new();
        let book = VqCodebook::new(&mut store, "vq", 2, 4, &mut rng);
        let mut g: Graph<f64> = Graph::recording();
        let z = g.leaf(Value::zeros(vec![1, 3, 2, 2]), false);
        assert!(vq_quantize(&mut g, &store, &book, z).is_err());
    }
}
