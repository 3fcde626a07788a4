//! End-to-end inference: conditioning from the upsampled LR image, the
//! stochastic reverse rollout in latent space, then one decoder pass.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{bicubic_resize, images_to_value, value_to_image, ImageTensor};
use crate::error::{Error, Result};
use crate::model::autoencoder::sample_eps;
use crate::model::diffusion::{build_schedule, rollout, VarianceSchedule};
use crate::model::dpesr::DpesrNet;
use crate::tensor::{Elem, Graph};
use crate::train::{Manifest, Stage1Model, Stage2Model, TrainConfig};

#[derive(Clone, Debug)]
pub struct InferenceRequest {
    pub lr: ImageTensor,
    pub scale: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct InferStats {
    pub denoiser_calls: usize,
    pub decoder_passes: usize,
    pub diffusion_secs: f64,
    pub decoder_secs: f64,
    pub out_dims: (usize, usize),
}

/// A loaded stage-1 + stage-2 model pair, reusable across requests.
pub struct InferencePipeline<E: Elem> {
    pub cfg: TrainConfig,
    pub s1: Stage1Model<E>,
    pub s2: Stage2Model<E>,
    pub sched: VarianceSchedule,
}

impl<E: Elem> InferencePipeline<E> {
    /// Load from a stage-2 checkpoint (which carries the frozen stage-1
    /// generator). A stage-1-only checkpoint fails with the missing
    /// denoiser tensors listed by name.
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let m = Manifest::read(path)?;
        Self::from_manifest(&m)
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let (cfg, mut s1) = Stage1Model::from_manifest(m)?;
        let (_, s2) = Stage2Model::from_manifest(m)?;
        s1.store.trainable = false;
        let mut s2 = s2;
        s2.store.trainable = false;
        let sched = build_schedule(cfg.t_steps, cfg.beta_start, cfg.beta_end)?;
        Ok(InferencePipeline { cfg, s1, s2, sched })
    }

    /// Output dims this request will produce.
    pub fn planned_dims(&self, req: &InferenceRequest) -> (usize, usize) {
        DpesrNet::output_dims(req.lr.height, req.lr.width, req.scale)
    }

    pub fn infer(&self, req: &InferenceRequest) -> Result<(ImageTensor, InferStats)> {
        if req.scale < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "scale {} below 1 is not an upsampling request",
                req.scale
            )));
        }
        if req.scale > 8.0 {
            eprintln!(
                "warning: scale {} is outside the trained range [1, 8]; extrapolating",
                req.scale
            );
        }
        let (oh, ow) = self.planned_dims(req);
        if oh < 8 || ow < 8 {
            return Err(Error::InvalidArgument(format!(
                "output dims {oh}x{ow} too small; increase scale or input size"
            )));
        }
        let s_eff = oh as f64 / req.lr.height as f64;
        let s_eff_w = ow as f64 / req.lr.width as f64;
        if (s_eff - s_eff_w).abs() > 1e-9 {
            // Non-square effective factors only arise from rounding; the
            // latent grid still matches because both are multiples of 8.
        }
        let lr_up = bicubic_resize(&req.lr, (oh, ow))?;

        let mut stats = InferStats {
            out_dims: (oh, ow),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);

        let mut g: Graph<E> = Graph::inference();
        let lrup_c = g.constant(images_to_value::<E>(&[&lr_up]));
        let lr_c = g.constant(images_to_value::<E>(&[&req.lr]));

        let cond = self.s2.cond.forward(&mut g, &self.s2.store, lrup_c)?;
        let z_dims = vec![1, self.cfg.model.latent_channels, oh / 8, ow / 8];
        let z_t = g.leaf(sample_eps::<E>(&z_dims, &mut rng), false);
        let t0 = Instant::now();
        let z0_hat = rollout(
            &mut g,
            &self.s2.store,
            &self.s2.unet,
            &self.sched,
            z_t,
            s_eff,
            cond,
            Some(&mut rng),
            &mut stats.denoiser_calls,
        )?;
        stats.diffusion_secs = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let out = self
            .s1
            .dpesr
            .forward(&mut g, &self.s1.store, lr_c, Some(z0_hat), s_eff)?;
        stats.decoder_passes += 1;
        stats.decoder_secs = t1.elapsed().as_secs_f64();

        Ok((value_to_image(&g.detach(out), 0), stats))
    }
}
