//! Stage-1 composite loss (reconstruction + adversarial + latent
//! regularization) and the stage-2 diffusion loss (rollout error + the
//! knowledge-distillation term on the conditioning network).

use crate::error::{Error, Result};
use crate::model::discriminator::PatchDiscriminator;
use crate::nn::ParamStore;
use crate::tensor::{Elem, Graph, Tx};

#[derive(Clone, Copy, Debug, Default)]
pub struct Stage1LossReport {
    pub l1: f64,
    pub adv_gen: f64,
    pub reg: f64,
    pub total: f64,
    pub disc_loss: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Stage2LossReport {
    pub diffusion: f64,
    pub kd: f64,
    pub total: f64,
}

/// Mean absolute elementwise difference.
pub fn l1_loss<E: Elem>(g: &mut Graph<E>, a: Tx, b: Tx) -> Result<Tx> {
    if g.val(a).dims() != g.val(b).dims() {
        return Err(Error::Shape(format!(
            "l1_loss: {:?} vs {:?}",
            g.val(a).dims(),
            g.val(b).dims()
        )));
    }
    Ok(g.l1_distance(a, b))
}

/// Hinge discriminator objective on patch score maps.
pub fn hinge_disc_loss<E: Elem>(g: &mut Graph<E>, d_real: Tx, d_fake: Tx) -> Tx {
    let a = g.affine(d_real, -1.0, 1.0); // 1 - D(real)
    let a = g.relu(a);
    let a = g.mean_all(a);
    let b = g.affine(d_fake, 1.0, 1.0); // 1 + D(fake)
    let b = g.relu(b);
    let b = g.mean_all(b);
    g.add(a, b)
}

/// Hinge generator objective: -mean(D(fake)).
pub fn hinge_gen_loss<E: Elem>(g: &mut Graph<E>, d_fake: Tx) -> Tx {
    let m = g.mean_all(d_fake);
    g.neg(m)
}

/// Run the patch discriminator on a (real, fake) pair and return the
/// generator and discriminator hinge losses.
pub fn adversarial_losses<E: Elem>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    disc: &PatchDiscriminator,
    real: Tx,
    fake: Tx,
) -> Result<(Tx, Tx)> {
    if g.val(real).dims() != g.val(fake).dims() {
        return Err(Error::Shape("adversarial_losses: dims differ".into()));
    }
    let d_real = disc.forward(g, store, real);
    let d_fake = disc.forward(g, store, fake);
    Ok((
        hinge_gen_loss(g, d_fake),
        hinge_disc_loss(g, d_real, d_fake),
    ))
}

pub struct Stage1Losses {
    pub l1: Tx,
    pub adv_gen: Tx,
    pub reg: Tx,
    pub total: Tx,
}

/// total = l1 + w1 * adv + w2 * reg. During warmup the adversarial and
/// regularization contributions are zeroed in the total but the individual
/// terms are still produced for reporting.
pub fn stage1_loss<E: Elem>(
    g: &mut Graph<E>,
    hr: Tx,
    hr_hat: Tx,
    reg: Option<Tx>,
    adv_gen: Option<Tx>,
    w1: f64,
    w2: f64,
    warmup: bool,
) -> Result<Stage1Losses> {
    let l1 = l1_loss(g, hr_hat, hr)?;
    let adv = adv_gen.unwrap_or_else(|| g.scalar(0.0));
    let reg = reg.unwrap_or_else(|| g.scalar(0.0));
    let (ew1, ew2) = if warmup { (0.0, 0.0) } else { (w1, w2) };
    let mut total = l1;
    if ew1 != 0.0 {
        let t = g.affine(adv, ew1, 0.0);
        total = g.add(total, t);
    }
    if ew2 != 0.0 {
        let t = g.affine(reg, ew2, 0.0);
        total = g.add(total, t);
    }
    Ok(Stage1Losses {
        l1,
        adv_gen: adv,
        reg,
        total,
    })
}

pub struct Stage2Losses {
    pub diffusion: Tx,
    pub kd: Tx,
    pub total: Tx,
}

/// total = |z0_hat - z0|_1 + |c - z0|_1, with either term removable for
/// the loss ablations.
pub fn stage2_loss<E: Elem>(
    g: &mut Graph<E>,
    z0_hat: Tx,
    z0: Tx,
    cond: Tx,
    drop_diffusion: bool,
    drop_kd: bool,
) -> Result<Stage2Losses> {
    let diffusion = l1_loss(g, z0_hat, z0)?;
    let kd = l1_loss(g, cond, z0)?;
    let total = match (drop_diffusion, drop_kd) {
        (false, false) => g.add(diffusion, kd),
        (true, false) => kd,
        (false, true) => diffusion,
        (true, true) => g.scalar(0.0),
    };
    Ok(Stage2Losses {
        diffusion,
        kd,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::check::{central_diff, rel_err};
    use crate::tensor::Value;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l1_basics() {
        let mut g: Graph<f64> = Graph::recording();
        let a = g.constant(Value::new(vec![2], vec![0.0, 1.0]));
        let b = g.constant(Value::new(vec![2], vec![1.0, 3.0]));
        let l = l1_loss(&mut g, a, b).unwrap();
        assert!((g.val(l).data()[0] - 1.5).abs() < 1e-12);

        let same = l1_loss(&mut g, a, a).unwrap();
        assert_eq!(g.val(same).data()[0], 0.0);

        let ones = g.constant(Value::full(vec![3], 1.0));
        let zeros = g.constant(Value::zeros(vec![3]));
        let l = l1_loss(&mut g, ones, zeros).unwrap();
        assert_eq!(g.val(l).data()[0], 1.0);

        let bad = g.constant(Value::zeros(vec![4]));
        assert!(l1_loss(&mut g, a, bad).is_err());
    }

    #[test]
    fn hinge_at_origin_and_saturation() {
        let mut g: Graph<f64> = Graph::recording();
        let zeros = g.constant(Value::zeros(vec![1, 1, 3, 3]));
        let disc = hinge_disc_loss(&mut g, zeros, zeros);
        assert!((g.val(disc).data()[0] - 2.0).abs() < 1e-12);
        let gen = hinge_gen_loss(&mut g, zeros);
        assert_eq!(g.val(gen).data()[0], 0.0);

        let good = g.constant(Value::full(vec![1, 1, 2, 2], 1.5));
        let bad = g.constant(Value::full(vec![1, 1, 2, 2], -1.5));
        let disc = hinge_disc_loss(&mut g, good, bad);
        assert_eq!(g.val(disc).data()[0], 0.0);
    }

    #[test]
    fn stage1_weighting_and_warmup() {
        // l1 = 0.1, adv = 1000, reg = 0.2, w1 = 1e-6, w2 = 0.5 -> 0.201.
        let mut g: Graph<f64> = Graph::recording();
        let hr = g.constant(Value::zeros(vec![1, 3, 2, 2]));
        let hr_hat = g.constant(Value::full(vec![1, 3, 2, 2], 0.1));
        let adv = g.scalar(1000.0);
        let reg = g.scalar(0.2);
        let out = stage1_loss(&mut g, hr, hr_hat, Some(reg), Some(adv), 1e-6, 0.5, false).unwrap();
        assert!((g.val(out.total).data()[0] - 0.201).abs() < 1e-9);

        // Warmup zeroes the contributions but keeps the terms reported.
        let out = stage1_loss(&mut g, hr, hr_hat, Some(reg), Some(adv), 1e-6, 0.5, true).unwrap();
        assert!((g.val(out.total).data()[0] - 0.1).abs() < 1e-12);
        assert_eq!(g.val(out.adv_gen).data()[0], 1000.0);
        assert_eq!(g.val(out.reg).data()[0], 0.2);

        // Perfect reconstruction, no adv, no reg.
        let out = stage1_loss(&mut g, hr, hr, None, None, 1e-6, 0.5, false).unwrap();
        assert_eq!(g.val(out.total).data()[0], 0.0);
    }

    #[test]
    fn stage1_total_linear_in_terms() {
        let mut g: Graph<f64> = Graph::recording();
        let hr = g.constant(Value::zeros(vec![1, 3, 2, 2]));
        let hr_hat = g.constant(Value::full(vec![1, 3, 2, 2], 0.25));
        for (adv_v, reg_v) in [(3.0, 0.8), (-2.0, 0.1), (0.0, 0.0)] {
            let adv = g.scalar(adv_v);
            let reg = g.scalar(reg_v);
            let out =
                stage1_loss(&mut g, hr, hr_hat, Some(reg), Some(adv), 0.01, 0.5, false).unwrap();
            let want = 0.25 + 0.01 * adv_v + 0.5 * reg_v;
            assert!((g.val(out.total).data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn stage2_terms_and_flags() {
        let mut g: Graph<f64> = Graph::recording();
        let z0 = g.constant(Value::zeros(vec![1, 4, 2, 2]));
        let z0_hat = g.constant(Value::full(vec![1, 4, 2, 2], 0.5));
        let c = g.constant(Value::full(vec![1, 4, 2, 2], 0.25));
        let out = stage2_loss(&mut g, z0_hat, z0, c, false, false).unwrap();
        assert!((g.val(out.total).data()[0] - 0.75).abs() < 1e-12);
        assert!((g.val(out.diffusion).data()[0] - 0.5).abs() < 1e-12);
        assert!((g.val(out.kd).data()[0] - 0.25).abs() < 1e-12);

        let out = stage2_loss(&mut g, z0_hat, z0, c, true, false).unwrap();
        assert!((g.val(out.total).data()[0] - 0.25).abs() < 1e-12);
        let out = stage2_loss(&mut g, z0_hat, z0, c, false, true).unwrap();
        assert!((g.val(out.total).data()[0] - 0.5).abs() < 1e-12);

        let out = stage2_loss(&mut g, z0_hat, z0, z0, false, false).unwrap();
        let z_eq = stage2_loss(&mut g, z0, z0, z0, false, false).unwrap();
        assert!(g.val(out.total).data()[0] > 0.0);
        assert_eq!(g.val(z_eq.total).data()[0], 0.0);
    }

    #[test]
    fn gen_loss_gradient_matches_finite_differences() {
        // d(gen loss)/d(fake) through a tiny discriminator.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut cfg = ModelConfig::tiny(8);
        cfg.disc_layers = 2;
        let disc = PatchDiscriminator::new(&mut store, "disc", &cfg, 16, &mut rng);

        use rand::Rng;
        let fake0: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let real0: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();

        let mut g: Graph<f64> = Graph::recording();
        let fake = g.leaf(Value::new(vec![1, 3, 16, 16], fake0.clone()), true);
        let real = g.constant(Value::new(vec![1, 3, 16, 16], real0.clone()));
        let (gen, _) = adversarial_losses(&mut g, &store, &disc, real, fake).unwrap();
        let mut grads = g.backward(gen);
        let analytic = grads.take(fake).unwrap();

        let mut xm = fake0;
        let mut f = |xs: &[f64]| {
            let mut g2: Graph<f64> = Graph::inference();
            let fake = g2.leaf(Value::new(vec![1, 3, 16, 16], xs.to_vec()), false);
            let real = g2.constant(Value::new(vec![1, 3, 16, 16], real0.clone()));
            let (gen, _) = adversarial_losses(&mut g2, &store, &disc, real, fake).unwrap();
            g2.val(gen).data()[0]
        };
        let mut rng2 = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..24 {
            let i = rng2.gen_range(0..xm.len());
            let num = central_diff(&mut xm, i, 1e-5, &mut f);
            assert!(
                rel_err(analytic[i], num) < 1e-3,
                "elem {i}: {} vs {num}",
                analytic[i]
            );
        }
    }
}
