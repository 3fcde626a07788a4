//! Stage-1 (autoencoder + SR decoder + discriminator) and stage-2
//! (conditional diffusion) training, checkpointing and the metrics log.

pub mod checkpoint;
pub mod config;

pub use checkpoint::{Manifest, FORMAT_VERSION};
pub use config::TrainConfig;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    images_to_value, sample_batch, save_png, Dataset, ImageTensor, TrainSample,
};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_losses, hinge_disc_loss, l1_loss, stage1_loss, stage2_loss, Stage1LossReport,
    Stage2LossReport,
};
use crate::model::autoencoder::{
    dp_encode, kl_divergence, reparameterize, sample_eps, EncoderNet, LatentDistribution,
    VqCodebook,
};
use crate::model::diffusion::{build_schedule, q_sample, rollout, CondNet, UNet, VarianceSchedule};
use crate::model::discriminator::PatchDiscriminator;
use crate::model::dpesr::DpesrNet;
use crate::model::{ModelConfig, RegMode};
use crate::nn::{clip_global_norm, Adam, ParamStore};
use crate::tensor::{Elem, Graph, Tx, Value};

/// Independent deterministic rng streams derived from one seed.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT_S1: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_INIT_S2: u64 = 4;

/// Generator-side networks of stage 1 (everything the inference pipeline
/// needs from the first stage).
pub struct Stage1Model<E: Elem> {
    pub cfg: ModelConfig,
    pub store: ParamStore<E>,
    pub enc: Option<EncoderNet>,
    pub dpesr: DpesrNet,
    pub vq: Option<VqCodebook>,
}

impl<E: Elem> Stage1Model<E> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_stream(seed, STREAM_INIT_S1);
        let mut store = ParamStore::new();
        let enc = (!cfg.disable_prior_connections).then(|| {
            EncoderNet::new(
                &mut store,
                "enc",
                cfg,
                6,
                2 * cfg.latent_channels,
                &mut rng,
            )
        });
        let dpesr = DpesrNet::new(&mut store, "dpesr", cfg, &mut rng);
        let vq = (cfg.reg_mode == RegMode::Vq && !cfg.disable_prior_connections).then(|| {
            VqCodebook::new(
                &mut store,
                "vq",
                cfg.vq_codebook_size,
                cfg.latent_channels,
                &mut rng,
            )
        });
        Ok(Stage1Model {
            cfg: cfg.clone(),
            store,
            enc,
            dpesr,
            vq,
        })
    }

    /// Rebuild from a manifest's config snapshot and bind the generator
    /// tensors. Works for stage-1 and stage-2 manifests alike.
    pub fn from_manifest(m: &Manifest) -> Result<(TrainConfig, Self)> {
        let cfg = TrainConfig::parse(&m.config_text)?;
        let mut model = Self::new(&cfg.model, cfg.seed)?;
        m.load_into_stores(&mut [&mut model.store])?;
        Ok((cfg, model))
    }

    pub fn encode(
        &self,
        g: &mut Graph<E>,
        hr: Tx,
        lr_up: Tx,
    ) -> Result<LatentDistribution> {
        let enc = self
            .enc
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("this wiring has no encoder".into()))?;
        dp_encode(g, &self.store, enc, &self.cfg, hr, lr_up)
    }

    /// Deterministic latent target: the posterior mean.
    pub fn latent_mu(&self, hr: &Value<E>, lr_up: &Value<E>) -> Result<Value<E>> {
        let mut g = Graph::inference();
        let hr_c = g.constant(hr.clone());
        let lrup_c = g.constant(lr_up.clone());
        let dist = self.encode(&mut g, hr_c, lrup_c)?;
        Ok(g.detach(dist.mu))
    }

    /// Stage-1 reconstruction with z = mu, for evaluation. Returns the
    /// clamped image batch value.
    pub fn reconstruct(
        &self,
        hr: &Value<E>,
        lr: &Value<E>,
        lr_up: &Value<E>,
        s: f64,
    ) -> Result<Value<E>> {
        let mut g = Graph::inference();
        let lr_c = g.constant(lr.clone());
        let z = if self.enc.is_some() {
            let hr_c = g.constant(hr.clone());
            let lrup_c = g.constant(lr_up.clone());
            let dist = self.encode(&mut g, hr_c, lrup_c)?;
            Some(dist.mu)
        } else {
            None
        };
        let out = self.dpesr.forward(&mut g, &self.store, lr_c, z, s)?;
        Ok(g.detach(out))
    }
}

/// The stage-1 patch discriminator with its own parameter store.
pub struct DiscModel<E: Elem> {
    pub store: ParamStore<E>,
    pub net: PatchDiscriminator,
}

impl<E: Elem> DiscModel<E> {
    pub fn new(cfg: &ModelConfig, min_hr_side: usize, seed: u64) -> Self {
        if min_hr_side < 70 && cfg.disc_layers == 0 {
            eprintln!(
                "note: {min_hr_side}px patches are below the 70px receptive field; using the 3-layer discriminator"
            );
        }
        let mut rng = seeded_stream(seed, STREAM_INIT_S1 + 16);
        let mut store = ParamStore::new();
        let net = PatchDiscriminator::new(&mut store, "disc", cfg, min_hr_side, &mut rng);
        DiscModel { store, net }
    }

    pub fn from_manifest(m: &Manifest, cfg: &TrainConfig, min_hr_side: usize) -> Result<Self> {
        let mut disc = Self::new(&cfg.model, min_hr_side, cfg.seed);
        m.load_into_stores(&mut [&mut disc.store])?;
        Ok(disc)
    }
}

/// Stage-2 networks: the conditioning encoder and the denoising UNet in
/// one trainable store.
pub struct Stage2Model<E: Elem> {
    pub cfg: ModelConfig,
    pub store: ParamStore<E>,
    pub cond: CondNet,
    pub unet: UNet,
}

impl<E: Elem> Stage2Model<E> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_stream(seed, STREAM_INIT_S2);
        let mut store = ParamStore::new();
        let cond = CondNet::new(&mut store, "cond", cfg, &mut rng);
        let unet = UNet::new(&mut store, "unet", cfg, &mut rng);
        Ok(Stage2Model {
            cfg: cfg.clone(),
            store,
            cond,
            unet,
        })
    }

    pub fn from_manifest(m: &Manifest) -> Result<(TrainConfig, Self)> {
        let cfg = TrainConfig::parse(&m.config_text)?;
        let mut model = Self::new(&cfg.model, cfg.seed)?;
        m.load_into_stores(&mut [&mut model.store])?;
        Ok((cfg, model))
    }
}

fn batch_values<E: Elem>(batch: &[TrainSample]) -> (Value<E>, Value<E>, Value<E>, f64) {
    assert!(!batch.is_empty(), "empty batch");
    let s = batch[0].scale;
    for b in batch {
        assert!(
            (b.scale - s).abs() < 1e-12 && b.hr.height == batch[0].hr.height,
            "batch must share scale and dims"
        );
    }
    let hrs: Vec<&ImageTensor> = batch.iter().map(|b| &b.hr).collect();
    let lrs: Vec<&ImageTensor> = batch.iter().map(|b| &b.lr).collect();
    let ups: Vec<&ImageTensor> = batch.iter().map(|b| &b.lr_up).collect();
    (
        images_to_value(&hrs),
        images_to_value(&lrs),
        images_to_value(&ups),
        s,
    )
}

fn write_divergence_snapshot(
    out_dir: &str,
    step: usize,
    batch: &[TrainSample],
    detail: &str,
) -> String {
    let dir = PathBuf::from(out_dir).join(format!("diverged_step_{step}"));
    let _ = std::fs::create_dir_all(&dir);
    for (i, s) in batch.iter().enumerate() {
        let _ = save_png(&dir.join(format!("{i}_hr.png")), &s.hr);
        let _ = save_png(&dir.join(format!("{i}_lr.png")), &s.lr);
    }
    let _ = std::fs::write(dir.join("report.txt"), detail);
    dir.display().to_string()
}

/// Stage-1 trainer: alternating generator / discriminator updates,
/// generator first.
pub struct Stage1Trainer<E: Elem> {
    pub cfg: TrainConfig,
    pub model: Stage1Model<E>,
    pub disc: DiscModel<E>,
    pub opt_gen: Adam,
    pub opt_disc: Adam,
    pub noise_rng: ChaCha8Rng,
    pub steps_done: usize,
}

impl<E: Elem> Stage1Trainer<E> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.stage != 1 {
            return Err(Error::InvalidArgument("stage-1 trainer needs stage = 1".into()));
        }
        let model = Stage1Model::new(&cfg.model, cfg.seed)?;
        let min_side = crate::data::hr_side_for_scale(cfg.lr_patch, cfg.scale_min);
        let disc = DiscModel::new(&cfg.model, min_side, cfg.seed);
        Ok(Stage1Trainer {
            cfg: cfg.clone(),
            model,
            disc,
            opt_gen: Adam::new(cfg.lr),
            opt_disc: Adam::new(cfg.lr),
            noise_rng: seeded_stream(cfg.seed, STREAM_NOISE),
            steps_done: 0,
        })
    }

    pub fn resume_from(&mut self, m: &Manifest) -> Result<()> {
        m.load_into_stores(&mut [&mut self.model.store, &mut self.disc.store])?;
        Ok(())
    }

    /// One optimization step on a prepared batch. `warmup` freezes the
    /// discriminator and keeps only the L1 term in the total.
    pub fn step(&mut self, batch: &[TrainSample], warmup: bool) -> Result<Stage1LossReport> {
        let (hr_v, lr_v, lrup_v, s) = batch_values::<E>(batch);

        // Generator pass: discriminator params participate as constants.
        self.disc.store.trainable = false;
        self.model.store.trainable = true;
        let mut g = Graph::recording();
        let hr_c = g.constant(hr_v.clone());
        let lr_c = g.constant(lr_v);
        let lrup_c = g.constant(lrup_v);

        let (z, reg) = match &self.model.enc {
            None => (None, None),
            Some(_) => {
                let dist = self.model.encode(&mut g, hr_c, lrup_c)?;
                match self.model.cfg.reg_mode {
                    RegMode::Kl => {
                        let z = reparameterize(&mut g, &dist, &mut self.noise_rng);
                        let reg = kl_divergence(&mut g, &dist);
                        (Some(z), Some(reg))
                    }
                    RegMode::Vq => {
                        let book = self.model.vq.as_ref().expect("vq codebook");
                        let out = crate::model::autoencoder::vq_quantize(
                            &mut g,
                            &self.model.store,
                            book,
                            dist.mu,
                        )?;
                        let commit = g.affine(
                            out.commitment,
                            self.model.cfg.vq_commit_weight,
                            0.0,
                        );
                        let reg = g.add(out.codebook_loss, commit);
                        (Some(out.quantized), Some(reg))
                    }
                }
            }
        };
        let hr_hat = self
            .model
            .dpesr
            .forward(&mut g, &self.model.store, lr_c, z, s)?;
        let (adv_gen, disc_loss_node) =
            adversarial_losses(&mut g, &self.disc.store, &self.disc.net, hr_c, hr_hat)?;
        let losses = stage1_loss(
            &mut g,
            hr_c,
            hr_hat,
            reg,
            Some(adv_gen),
            self.cfg.w1,
            self.cfg.w2,
            warmup,
        )?;

        let report = Stage1LossReport {
            l1: g.val(losses.l1).data()[0].to_f64(),
            adv_gen: g.val(losses.adv_gen).data()[0].to_f64(),
            reg: g.val(losses.reg).data()[0].to_f64(),
            total: g.val(losses.total).data()[0].to_f64(),
            disc_loss: g.val(disc_loss_node).data()[0].to_f64(),
        };
        if !report.total.is_finite() || !report.disc_loss.is_finite() {
            let snap = write_divergence_snapshot(
                &self.cfg.out_dir,
                self.steps_done,
                batch,
                &format!("{report:?}"),
            );
            return Err(Error::Diverged {
                step: self.steps_done,
                detail: format!("non-finite stage-1 loss; snapshot at {snap}"),
            });
        }

        let fake_v = g.detach(hr_hat);
        let mut grads = g.backward(losses.total);
        let mut gvec = self.model.store.grads(&g, &mut grads);
        // Drop the graph before updating so parameter mutation happens
        // in place rather than copy-on-write.
        drop(grads);
        drop(g);
        if self.cfg.grad_clip > 0.0 {
            clip_global_norm(&mut gvec, self.cfg.grad_clip);
        }
        self.opt_gen.step(&mut self.model.store, &gvec);

        // Discriminator pass on the detached fake, generator first. With a
        // zero adversarial weight there is no game to train, so the
        // discriminator holds still.
        if !warmup && self.cfg.w1 != 0.0 {
            self.disc.store.trainable = true;
            let mut g2 = Graph::recording();
            let real = g2.constant(hr_v);
            let fake = g2.constant(fake_v);
            let d_real = self.disc.net.forward(&mut g2, &self.disc.store, real);
            let d_fake = self.disc.net.forward(&mut g2, &self.disc.store, fake);
            let dloss = hinge_disc_loss(&mut g2, d_real, d_fake);
            let mut grads2 = g2.backward(dloss);
            let dvec = self.disc.store.grads(&g2, &mut grads2);
            drop(grads2);
            drop(g2);
            self.opt_disc.step(&mut self.disc.store, &dvec);
        }

        self.steps_done += 1;
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Manifest::from_stores(
            1,
            self.cfg.serialize(),
            &[&self.model.store, &self.disc.store],
        )
        .save(path)
    }
}

/// Stage-2 trainer: the stage-1 model is frozen; the conditioning network
/// and denoiser learn jointly through the full deterministic rollout.
pub struct Stage2Trainer<E: Elem> {
    pub cfg: TrainConfig,
    pub frozen: Stage1Model<E>,
    pub model: Stage2Model<E>,
    pub opt: Adam,
    pub sched: VarianceSchedule,
    pub noise_rng: ChaCha8Rng,
    pub steps_done: usize,
    /// Denoiser evaluations made by the most recent step, per sample.
    pub last_denoiser_calls: usize,
}

impl<E: Elem> Stage2Trainer<E> {
    pub fn new(cfg: &TrainConfig, frozen: Stage1Model<E>) -> Result<Self> {
        cfg.validate()?;
        if cfg.stage != 2 {
            return Err(Error::InvalidArgument("stage-2 trainer needs stage = 2".into()));
        }
        if frozen.enc.is_none() {
            return Err(Error::InvalidArgument(
                "stage-2 training needs a stage-1 model with the prior encoder".into(),
            ));
        }
        let mut frozen = frozen;
        frozen.store.trainable = false;
        let model = Stage2Model::new(&cfg.model, cfg.seed)?;
        let sched = build_schedule(cfg.t_steps, cfg.beta_start, cfg.beta_end)?;
        Ok(Stage2Trainer {
            cfg: cfg.clone(),
            frozen,
            model,
            opt: Adam::new(cfg.lr),
            sched,
            noise_rng: seeded_stream(cfg.seed, STREAM_NOISE + 16),
            steps_done: 0,
            last_denoiser_calls: 0,
        })
    }

    pub fn resume_from(&mut self, m: &Manifest) -> Result<()> {
        m.load_into_stores(&mut [&mut self.model.store])?;
        Ok(())
    }

    /// Hash of the frozen stage-1 parameters (freeze contract checks).
    pub fn frozen_hash(&self) -> u64 {
        self.frozen.store.content_hash()
    }

    pub fn step(&mut self, batch: &[TrainSample]) -> Result<Stage2LossReport> {
        let (hr_v, _lr_v, lrup_v, _s) = batch_values::<E>(batch);
        // Frozen encoder: z0 = posterior mean, no gradients.
        let z0 = self.frozen.latent_mu(&hr_v, &lrup_v)?;
        self.step_with_latent(batch, &z0)
    }

    /// Step with a precomputed latent target (the frozen encoder makes z0
    /// a constant per sample, so callers may cache it).
    pub fn step_with_latent(
        &mut self,
        batch: &[TrainSample],
        z0: &Value<E>,
    ) -> Result<Stage2LossReport> {
        let (_hr_v, _lr_v, lrup_v, s) = batch_values::<E>(batch);
        let z0 = z0.clone();

        let mut g = Graph::recording();
        let lrup_c = g.constant(lrup_v);
        let cond = self.model.cond.forward(&mut g, &self.model.store, lrup_c)?;
        let z0_c = g.constant(z0.clone());

        let mut calls = 0usize;
        let losses = if self.cfg.random_timestep_training {
            // Single random time step, noise-prediction target.
            let t = self.noise_rng.gen_range(1..=self.sched.t_steps);
            let eps = sample_eps::<E>(z0.dims(), &mut self.noise_rng);
            let z_t = q_sample(&z0, t, &eps, &self.sched)?;
            let z_t_c = g.constant(z_t);
            let eps_hat = self
                .model
                .unet
                .forward(&mut g, &self.model.store, z_t_c, cond, t, s)?;
            calls += 1;
            let eps_c = g.constant(eps);
            let diffusion = l1_loss(&mut g, eps_hat, eps_c)?;
            let kd = l1_loss(&mut g, cond, z0_c)?;
            let total = match (self.cfg.drop_diffusion_loss, self.cfg.drop_kd_loss) {
                (false, false) => g.add(diffusion, kd),
                (true, false) => kd,
                (false, true) => diffusion,
                (true, true) => g.scalar(0.0),
            };
            crate::losses::Stage2Losses {
                diffusion,
                kd,
                total,
            }
        } else {
            // Full deterministic rollout from z_T = q_sample(z0, T, eps).
            let eps = sample_eps::<E>(z0.dims(), &mut self.noise_rng);
            let z_t = q_sample(&z0, self.sched.t_steps, &eps, &self.sched)?;
            let z_t_c = g.constant(z_t);
            let z0_hat = rollout(
                &mut g,
                &self.model.store,
                &self.model.unet,
                &self.sched,
                z_t_c,
                s,
                cond,
                None,
                &mut calls,
            )?;
            stage2_loss(
                &mut g,
                z0_hat,
                z0_c,
                cond,
                self.cfg.drop_diffusion_loss,
                self.cfg.drop_kd_loss,
            )?
        };

        let report = Stage2LossReport {
            diffusion: g.val(losses.diffusion).data()[0].to_f64(),
            kd: g.val(losses.kd).data()[0].to_f64(),
            total: g.val(losses.total).data()[0].to_f64(),
        };
        if !report.total.is_finite() {
            let snap = write_divergence_snapshot(
                &self.cfg.out_dir,
                self.steps_done,
                batch,
                &format!("{report:?}"),
            );
            return Err(Error::Diverged {
                step: self.steps_done,
                detail: format!("non-finite stage-2 loss; snapshot at {snap}"),
            });
        }

        let mut grads = g.backward(losses.total);
        let mut gvec = self.model.store.grads(&g, &mut grads);
        drop(grads);
        drop(g);
        if self.cfg.grad_clip > 0.0 {
            clip_global_norm(&mut gvec, self.cfg.grad_clip);
        }
        self.opt.step(&mut self.model.store, &gvec);

        self.last_denoiser_calls = calls;
        self.steps_done += 1;
        Ok(report)
    }

    /// Stage-2 checkpoints carry the frozen generator plus the diffusion
    /// networks, so inference needs only this one file.
    pub fn save(&self, path: &Path) -> Result<()> {
        Manifest::from_stores(
            2,
            self.cfg.serialize(),
            &[&self.frozen.store, &self.model.store],
        )
        .save(path)
    }
}

/// Line-delimited metrics log (tab-separated).
pub struct LogWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl LogWriter {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# {header}")?;
        Ok(LogWriter { out })
    }

    pub fn stage1(&mut self, step: usize, r: &Stage1LossReport) -> Result<()> {
        writeln!(
            self.out,
            "{step}\t{}\t{}\t{}\t{}\t{}",
            r.l1, r.adv_gen, r.reg, r.total, r.disc_loss
        )?;
        Ok(())
    }

    pub fn stage2(&mut self, step: usize, r: &Stage2LossReport) -> Result<()> {
        writeln!(self.out, "{step}\t{}\t{}\t{}", r.diffusion, r.kd, r.total)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Full stage-1 run from a config file; returns the checkpoint path.
pub fn run_stage1<E: Elem>(cfg: &TrainConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let dataset = Dataset::load(
        Path::new(&cfg.data_dir),
        (!cfg.split_file.is_empty()).then(|| Path::new(&cfg.split_file)),
    )?;
    let mut trainer: Stage1Trainer<E> = Stage1Trainer::new(cfg)?;
    if let Some(p) = resume {
        trainer.resume_from(&Manifest::read(p)?)?;
    }
    let mut data_rng = seeded_stream(cfg.seed, STREAM_DATA);
    let log_path = PathBuf::from(&cfg.out_dir).join("stage1_log.tsv");
    let mut log = LogWriter::create(&log_path, "step\tl1\tadv_gen\treg\ttotal\tdisc")?;
    let ckpt_path = PathBuf::from(&cfg.out_dir).join("stage1.ckpt");

    for epoch in 0..cfg.epochs {
        let warmup = epoch < cfg.warmup_epochs;
        for _ in 0..cfg.iters_per_epoch {
            let batch = sample_batch(
                &dataset,
                cfg.batch_size,
                cfg.lr_patch,
                (cfg.scale_min, cfg.scale_max),
                true,
                &mut data_rng,
            )?;
            let report = trainer.step(&batch, warmup)?;
            let step = trainer.steps_done;
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                log.stage1(step, &report)?;
                eprintln!(
                    "stage1 epoch {epoch} step {step}: l1 {:.5} adv {:.4} reg {:.4} total {:.5} disc {:.4}",
                    report.l1, report.adv_gen, report.reg, report.total, report.disc_loss
                );
            }
            if cfg.save_every > 0 && step % cfg.save_every == 0 {
                trainer.save(&ckpt_path)?;
            }
        }
    }
    log.flush()?;
    trainer.save(&ckpt_path)?;
    Ok(ckpt_path)
}

/// Full stage-2 run on top of a stage-1 checkpoint.
pub fn run_stage2<E: Elem>(
    cfg: &TrainConfig,
    stage1_ckpt: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    let dataset = Dataset::load(
        Path::new(&cfg.data_dir),
        (!cfg.split_file.is_empty()).then(|| Path::new(&cfg.split_file)),
    )?;
    let manifest = Manifest::read(stage1_ckpt)?;
    let (_s1_cfg, s1) = Stage1Model::from_manifest(&manifest)?;
    let mut trainer: Stage2Trainer<E> = Stage2Trainer::new(cfg, s1)?;
    if let Some(p) = resume {
        trainer.resume_from(&Manifest::read(p)?)?;
    }
    let mut data_rng = seeded_stream(cfg.seed, STREAM_DATA);
    let log_path = PathBuf::from(&cfg.out_dir).join("stage2_log.tsv");
    let mut log = LogWriter::create(&log_path, "step\tdiffusion\tkd\ttotal")?;
    let ckpt_path = PathBuf::from(&cfg.out_dir).join("stage2.ckpt");

    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.iters_per_epoch {
            let batch = sample_batch(
                &dataset,
                cfg.batch_size,
                cfg.lr_patch,
                (cfg.scale_min, cfg.scale_max),
                true,
                &mut data_rng,
            )?;
            let report = trainer.step(&batch)?;
            let step = trainer.steps_done;
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                log.stage2(step, &report)?;
                eprintln!(
                    "stage2 epoch {epoch} step {step}: diffusion {:.5} kd {:.5} total {:.5}",
                    report.diffusion, report.kd, report.total
                );
            }
            if cfg.save_every > 0 && step % cfg.save_every == 0 {
                trainer.save(&ckpt_path)?;
            }
        }
    }
    log.flush()?;
    trainer.save(&ckpt_path)?;
    Ok(ckpt_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg(stage: u8) -> TrainConfig {
        let mut cfg = if stage == 1 {
            TrainConfig::stage1_defaults()
        } else {
            TrainConfig::stage2_defaults()
        };
        cfg.model = ModelConfig::tiny(8);
        cfg.lr = 1e-3;
        cfg.lr_patch = 16;
        cfg.batch_size = 2;
        cfg.seed = 11;
        cfg.out_dir = std::env::temp_dir()
            .join(format!("ldsr_train_test_s{stage}"))
            .display()
            .to_string();
        cfg
    }

    fn toy_batch(seed: u64, n: usize, lr_patch: usize, scale: f64) -> Vec<TrainSample> {
        let mut rng = seeded_stream(seed, 99);
        let side = crate::data::hr_side_for_scale(lr_patch, scale) + 8;
        (0..n)
            .map(|_| {
                let data: Vec<f32> = (0..side * side * 3)
                    .map(|_| rng.gen_range(0.0..1.0))
                    .collect();
                let img = ImageTensor::new(side, side, data).unwrap();
                crate::data::make_training_pair(&img, lr_patch, scale, &mut rng).unwrap()
            })
            .collect()
    }

    #[test]
    fn stage1_training_is_deterministic() {
        let cfg = tiny_cfg(1);
        let batch = toy_batch(1, 2, 16, 2.0);
        let run = || {
            let mut t: Stage1Trainer<f32> = Stage1Trainer::new(&cfg).unwrap();
            for _ in 0..3 {
                t.step(&batch, false).unwrap();
            }
            (t.model.store.content_hash(), t.disc.store.content_hash())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn warmup_keeps_discriminator_fixed_and_total_is_l1() {
        let cfg = tiny_cfg(1);
        let batch = toy_batch(2, 2, 16, 2.0);
        let mut t: Stage1Trainer<f32> = Stage1Trainer::new(&cfg).unwrap();
        let disc_before = t.disc.store.content_hash();
        let gen_before = t.model.store.content_hash();
        let report = t.step(&batch, true).unwrap();
        assert_eq!(t.disc.store.content_hash(), disc_before);
        assert_ne!(t.model.store.content_hash(), gen_before);
        assert!((report.total - report.l1).abs() < 1e-12);
        // Terms are still reported during warmup.
        assert!(report.disc_loss.is_finite() && report.reg.is_finite());

        // Out of warmup the discriminator moves too.
        let disc_mid = t.disc.store.content_hash();
        t.step(&batch, false).unwrap();
        assert_ne!(t.disc.store.content_hash(), disc_mid);
    }

    #[test]
    fn stage1_loss_decreases_on_toy_overfit() {
        let cfg = tiny_cfg(1);
        let batch = toy_batch(3, 2, 16, 2.0);
        let mut first = None;
        let mut t: Stage1Trainer<f32> = Stage1Trainer::new(&cfg).unwrap();
        let mut last = 0.0;
        for _ in 0..60 {
            let r = t.step(&batch, true).unwrap();
            first.get_or_insert(r.l1);
            last = r.l1;
        }
        assert!(
            last < first.unwrap(),
            "l1 {last} should drop below {}",
            first.unwrap()
        );
    }

    #[test]
    fn stage2_freeze_contract_and_call_counts() {
        let cfg1 = tiny_cfg(1);
        let s1 = Stage1Model::<f32>::new(&cfg1.model, cfg1.seed).unwrap();
        let mut cfg2 = tiny_cfg(2);
        cfg2.t_steps = 4;
        let mut t: Stage2Trainer<f32> = Stage2Trainer::new(&cfg2, s1).unwrap();
        let frozen0 = t.frozen_hash();
        let batch = toy_batch(4, 2, 16, 2.0);
        for _ in 0..3 {
            let r = t.step(&batch).unwrap();
            assert!(r.total.is_finite() && r.diffusion >= 0.0 && r.kd >= 0.0);
            assert_eq!(t.last_denoiser_calls, 4, "all reverse steps run");
        }
        assert_eq!(t.frozen_hash(), frozen0, "stage-1 params must not move");

        // Random-time-step ablation: exactly one denoiser call per step.
        let mut cfg3 = cfg2.clone();
        cfg3.random_timestep_training = true;
        let s1b = Stage1Model::<f32>::new(&cfg1.model, cfg1.seed).unwrap();
        let mut t3: Stage2Trainer<f32> = Stage2Trainer::new(&cfg3, s1b).unwrap();
        t3.step(&batch).unwrap();
        assert_eq!(t3.last_denoiser_calls, 1);
    }

    #[test]
    fn stage2_loss_term_flags() {
        let cfg1 = tiny_cfg(1);
        let batch = toy_batch(5, 1, 16, 2.0);
        for (drop_diff, drop_kd) in [(true, false), (false, true)] {
            let s1 = Stage1Model::<f32>::new(&cfg1.model, cfg1.seed).unwrap();
            let mut cfg2 = tiny_cfg(2);
            cfg2.drop_diffusion_loss = drop_diff;
            cfg2.drop_kd_loss = drop_kd;
            let mut t: Stage2Trainer<f32> = Stage2Trainer::new(&cfg2, s1).unwrap();
            let r = t.step(&batch).unwrap();
            let want = if drop_diff { r.kd } else { r.diffusion };
            assert!((r.total - want).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_roundtrip_restores_training_state() {
        let cfg = tiny_cfg(1);
        let batch = toy_batch(6, 2, 16, 2.0);
        let mut t: Stage1Trainer<f32> = Stage1Trainer::new(&cfg).unwrap();
        t.step(&batch, true).unwrap();
        let dir = std::env::temp_dir().join("ldsr_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s1.ckpt");
        t.save(&path).unwrap();

        // Byte-identical round trip.
        let bytes = std::fs::read(&path).unwrap();
        let m = Manifest::from_bytes(&bytes).unwrap();
        assert_eq!(m.to_bytes(), bytes);
        assert_eq!(m.stage, 1);

        // Values restored into a fresh trainer.
        let mut t2: Stage1Trainer<f32> = Stage1Trainer::new(&cfg).unwrap();
        assert_ne!(t2.model.store.content_hash(), t.model.store.content_hash());
        t2.resume_from(&m).unwrap();
        assert_eq!(t2.model.store.content_hash(), t.model.store.content_hash());
        assert_eq!(t2.disc.store.content_hash(), t.disc.store.content_hash());

        // The config snapshot parses back to the same canonical text.
        let parsed = TrainConfig::parse(&m.config_text).unwrap();
        assert_eq!(parsed.serialize(), cfg.serialize());
    }

    #[test]
    fn stage2_checkpoint_serves_inference_but_stage1_checkpoint_is_rejected() {
        let cfg1 = tiny_cfg(1);
        let batch = toy_batch(7, 1, 16, 2.0);
        let mut t1: Stage1Trainer<f32> = Stage1Trainer::new(&cfg1).unwrap();
        t1.step(&batch, true).unwrap();
        let m1 = Manifest::from_stores(
            1,
            cfg1.serialize(),
            &[&t1.model.store, &t1.disc.store],
        );

        // Stage-1-only manifest lacks the denoiser tensors.
        match crate::infer::InferencePipeline::<f32>::from_manifest(&m1) {
            Err(Error::MissingTensors(names)) => {
                assert!(names.iter().any(|n| n.starts_with("unet.")));
                assert!(names.iter().any(|n| n.starts_with("cond.")));
            }
            other => panic!("expected MissingTensors, got {:?}", other.err()),
        }

        let mut cfg2 = tiny_cfg(2);
        cfg2.t_steps = 2;
        let s1 = Stage1Model::<f32>::new(&cfg1.model, cfg1.seed).unwrap();
        let mut t2: Stage2Trainer<f32> = Stage2Trainer::new(&cfg2, s1).unwrap();
        t2.step(&batch).unwrap();
        let dir = std::env::temp_dir().join("ldsr_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s2.ckpt");
        t2.save(&path).unwrap();
        let pipe = crate::infer::InferencePipeline::<f32>::from_checkpoint(&path).unwrap();
        let req = crate::infer::InferenceRequest {
            lr: batch[0].lr.clone(),
            scale: 2.0,
            seed: 3,
        };
        let (img, stats) = pipe.infer(&req).unwrap();
        assert_eq!((img.height, img.width), (32, 32));
        assert_eq!(stats.denoiser_calls, 2);
        assert_eq!(stats.decoder_passes, 1);

        // Same request, same seed: bit-identical output.
        let (img2, _) = pipe.infer(&req).unwrap();
        assert_eq!(img.data(), img2.data());
    }
}
