//! Flat `key = value` training configuration. `#` lines are comments.
//! Unknown or duplicate keys are rejected; omitted keys take the stage
//! defaults. Serialization is canonical so a checkpoint round-trips
//! byte-identically.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, RegMode};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: u8,
    pub seed: u64,
    pub data_dir: String,
    pub split_file: String,
    pub out_dir: String,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_patch: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub warmup_epochs: usize,
    pub w1: f64,
    pub w2: f64,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub grad_clip: f64,
    pub log_every: usize,
    pub save_every: usize,
    pub random_timestep_training: bool,
    pub drop_kd_loss: bool,
    pub drop_diffusion_loss: bool,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// Reference stage-1 settings: 400 epochs x 1000 iters, batch 4,
    /// lr 1.8e-5, 5 warmup epochs.
    pub fn stage1_defaults() -> Self {
        TrainConfig {
            stage: 1,
            seed: 0,
            data_dir: String::new(),
            split_file: String::new(),
            out_dir: "out".into(),
            epochs: 400,
            iters_per_epoch: 1000,
            batch_size: 4,
            lr: 1.8e-5,
            lr_patch: 48,
            scale_min: 1.0,
            scale_max: 8.0,
            warmup_epochs: 5,
            w1: 1e-6,
            w2: 0.5,
            t_steps: 4,
            beta_start: 0.99,
            beta_end: 0.1,
            grad_clip: 0.0,
            log_every: 50,
            save_every: 0,
            random_timestep_training: false,
            drop_kd_loss: false,
            drop_diffusion_loss: false,
            model: ModelConfig::default(),
        }
    }

    /// Reference stage-2 settings: 50 epochs x 1000 iters, batch 8,
    /// lr 8e-5, gradient clip 1.0.
    pub fn stage2_defaults() -> Self {
        TrainConfig {
            stage: 2,
            batch_size: 8,
            epochs: 50,
            lr: 8e-5,
            warmup_epochs: 0,
            grad_clip: 1.0,
            ..Self::stage1_defaults()
        }
    }

    pub fn defaults_for_stage(stage: u8) -> Result<Self> {
        match stage {
            1 => Ok(Self::stage1_defaults()),
            2 => Ok(Self::stage2_defaults()),
            other => Err(Error::InvalidArgument(format!(
                "stage must be 1 or 2, got {other}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::InvalidArgument("stage must be 1 or 2".into()));
        }
        if self.batch_size == 0 || self.lr_patch == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and lr_patch must be positive".into(),
            ));
        }
        if self.lr_patch % 8 != 0 {
            return Err(Error::InvalidArgument(
                "lr_patch must be a multiple of 8".into(),
            ));
        }
        if !(1.0..=8.0).contains(&self.scale_min)
            || !(1.0..=8.0).contains(&self.scale_max)
            || self.scale_min > self.scale_max
        {
            return Err(Error::InvalidArgument(
                "scale range must satisfy 1 <= min <= max <= 8".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        if self.t_steps == 0 {
            return Err(Error::InvalidArgument("t_steps must be >= 1".into()));
        }
        if self.stage == 2 && self.model.disable_prior_connections {
            return Err(Error::InvalidArgument(
                "stage 2 needs the prior encoder; disable_prior_connections only applies to stage 1"
                    .into(),
            ));
        }
        self.model.validate()
    }

    /// Canonical text form (stable key order, shortest round-trip floats).
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("stage", self.stage.to_string());
        kv("seed", self.seed.to_string());
        kv("data_dir", self.data_dir.clone());
        kv("split_file", self.split_file.clone());
        kv("out_dir", self.out_dir.clone());
        kv("epochs", self.epochs.to_string());
        kv("iters_per_epoch", self.iters_per_epoch.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_patch", self.lr_patch.to_string());
        kv("scale_min", self.scale_min.to_string());
        kv("scale_max", self.scale_max.to_string());
        kv("warmup_epochs", self.warmup_epochs.to_string());
        kv("w1", self.w1.to_string());
        kv("w2", self.w2.to_string());
        kv("reg_mode", self.model.reg_mode.as_str().to_string());
        kv("t_steps", self.t_steps.to_string());
        kv("beta_start", self.beta_start.to_string());
        kv("beta_end", self.beta_end.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("log_every", self.log_every.to_string());
        kv("save_every", self.save_every.to_string());
        kv("base_channels", self.model.base_channels.to_string());
        kv("latent_channels", self.model.latent_channels.to_string());
        kv("prior_channels", self.model.prior_channels.to_string());
        kv("sr_channels", self.model.sr_channels.to_string());
        kv("imdb_per_fru", self.model.imdb_per_fru.to_string());
        kv("csum_levels", self.model.csum_levels.to_string());
        kv("csum_channels", self.model.csum_channels.to_string());
        kv("csum_mlp_width", self.model.csum_mlp_width.to_string());
        kv("mod_mlp_width", self.model.mod_mlp_width.to_string());
        kv("fusion_mlp_width", self.model.fusion_mlp_width.to_string());
        kv("unet_base", self.model.unet_base.to_string());
        kv("emb_dim", self.model.emb_dim.to_string());
        kv("vq_codebook_size", self.model.vq_codebook_size.to_string());
        kv("vq_commit_weight", self.model.vq_commit_weight.to_string());
        kv("disc_base", self.model.disc_base.to_string());
        kv("disc_layers", self.model.disc_layers.to_string());
        kv(
            "disable_modulation",
            self.model.disable_modulation.to_string(),
        );
        kv(
            "disable_sr_branch",
            self.model.disable_sr_branch.to_string(),
        );
        kv(
            "disable_prior_connections",
            self.model.disable_prior_connections.to_string(),
        );
        kv(
            "random_timestep_training",
            self.random_timestep_training.to_string(),
        );
        kv("drop_kd_loss", self.drop_kd_loss.to_string());
        kv("drop_diffusion_loss", self.drop_diffusion_loss.to_string());
        s
    }

    /// Parse config text. The `stage` key picks the defaults every other
    /// key overrides.
    pub fn parse(text: &str) -> Result<Self> {
        let entries = parse_entries(text)?;
        let mut stage: Option<u8> = None;
        for (line, k, v) in &entries {
            if k == "stage" {
                if stage.is_some() {
                    return Err(Error::Config {
                        line: *line,
                        msg: "duplicate key stage".into(),
                    });
                }
                stage = Some(parse_num(*line, k, v)?);
            }
        }
        let stage = stage.ok_or_else(|| Error::Config {
            line: 0,
            msg: "missing required key: stage".into(),
        })?;
        let mut cfg = Self::defaults_for_stage(stage)?;

        let mut seen = std::collections::HashSet::new();
        for (line, k, v) in entries {
            if !seen.insert(k.clone()) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key {k}"),
                });
            }
            let l = line;
            match k.as_str() {
                "stage" => {}
                "seed" => cfg.seed = parse_num(l, &k, &v)?,
                "data_dir" => cfg.data_dir = v,
                "split_file" => cfg.split_file = v,
                "out_dir" => cfg.out_dir = v,
                "epochs" => cfg.epochs = parse_num(l, &k, &v)?,
                "iters_per_epoch" => cfg.iters_per_epoch = parse_num(l, &k, &v)?,
                "batch_size" => cfg.batch_size = parse_num(l, &k, &v)?,
                "lr" => cfg.lr = parse_f64(l, &k, &v)?,
                "lr_patch" => cfg.lr_patch = parse_num(l, &k, &v)?,
                "scale_min" => cfg.scale_min = parse_f64(l, &k, &v)?,
                "scale_max" => cfg.scale_max = parse_f64(l, &k, &v)?,
                "warmup_epochs" => cfg.warmup_epochs = parse_num(l, &k, &v)?,
                "w1" => cfg.w1 = parse_f64(l, &k, &v)?,
                "w2" => cfg.w2 = parse_f64(l, &k, &v)?,
                "reg_mode" => {
                    cfg.model.reg_mode = RegMode::parse(&v).map_err(|e| Error::Config {
                        line: l,
                        msg: e.to_string(),
                    })?
                }
                "t_steps" => cfg.t_steps = parse_num(l, &k, &v)?,
                "beta_start" => cfg.beta_start = parse_f64(l, &k, &v)?,
                "beta_end" => cfg.beta_end = parse_f64(l, &k, &v)?,
                "grad_clip" => cfg.grad_clip = parse_f64(l, &k, &v)?,
                "log_every" => cfg.log_every = parse_num(l, &k, &v)?,
                "save_every" => cfg.save_every = parse_num(l, &k, &v)?,
                "base_channels" => cfg.model.base_channels = parse_num(l, &k, &v)?,
                "latent_channels" => cfg.model.latent_channels = parse_num(l, &k, &v)?,
                "prior_channels" => cfg.model.prior_channels = parse_num(l, &k, &v)?,
                "sr_channels" => cfg.model.sr_channels = parse_num(l, &k, &v)?,
                "imdb_per_fru" => cfg.model.imdb_per_fru = parse_num(l, &k, &v)?,
                "csum_levels" => cfg.model.csum_levels = parse_num(l, &k, &v)?,
                "csum_channels" => cfg.model.csum_channels = parse_num(l, &k, &v)?,
                "csum_mlp_width" => cfg.model.csum_mlp_width = parse_num(l, &k, &v)?,
                "mod_mlp_width" => cfg.model.mod_mlp_width = parse_num(l, &k, &v)?,
                "fusion_mlp_width" => cfg.model.fusion_mlp_width = parse_num(l, &k, &v)?,
                "unet_base" => cfg.model.unet_base = parse_num(l, &k, &v)?,
                "emb_dim" => cfg.model.emb_dim = parse_num(l, &k, &v)?,
                "vq_codebook_size" => cfg.model.vq_codebook_size = parse_num(l, &k, &v)?,
                "vq_commit_weight" => cfg.model.vq_commit_weight = parse_f64(l, &k, &v)?,
                "disc_base" => cfg.model.disc_base = parse_num(l, &k, &v)?,
                "disc_layers" => cfg.model.disc_layers = parse_num(l, &k, &v)?,
                "disable_modulation" => cfg.model.disable_modulation = parse_bool(l, &k, &v)?,
                "disable_sr_branch" => cfg.model.disable_sr_branch = parse_bool(l, &k, &v)?,
                "disable_prior_connections" => {
                    cfg.model.disable_prior_connections = parse_bool(l, &k, &v)?
                }
                "random_timestep_training" => {
                    cfg.random_timestep_training = parse_bool(l, &k, &v)?
                }
                "drop_kd_loss" => cfg.drop_kd_loss = parse_bool(l, &k, &v)?,
                "drop_diffusion_loss" => cfg.drop_diffusion_loss = parse_bool(l, &k, &v)?,
                other => {
                    return Err(Error::Config {
                        line: l,
                        msg: format!("unknown key {other}"),
                    })
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(Error::Config {
                line: i + 1,
                msg: "expected `key = value`".into(),
            });
        };
        let key = line[..eq].trim().to_string();
        let val = line[eq + 1..].trim().to_string();
        if key.is_empty() {
            return Err(Error::Config {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        out.push((i + 1, key, val));
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        msg: format!("invalid integer for {key}: {v}"),
    })
}

fn parse_f64(line: usize, key: &str, v: &str) -> Result<f64> {
    let x: f64 = v.parse().map_err(|_| Error::Config {
        line,
        msg: format!("invalid number for {key}: {v}"),
    })?;
    if !x.is_finite() {
        return Err(Error::Config {
            line,
            msg: format!("non-finite value for {key}"),
        });
    }
    Ok(x)
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config {
            line,
            msg: format!("invalid bool for {key}: {v} (use true/false)"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c1 = TrainConfig::stage1_defaults();
        assert_eq!((c1.epochs, c1.iters_per_epoch, c1.batch_size), (400, 1000, 4));
        assert!((c1.lr - 1.8e-5).abs() < 1e-20);
        assert_eq!(c1.warmup_epochs, 5);
        assert_eq!(c1.lr_patch, 48);
        assert_eq!((c1.scale_min, c1.scale_max), (1.0, 8.0));
        assert!((c1.w1 - 1e-6).abs() < 1e-20 && (c1.w2 - 0.5).abs() < 1e-20);
        assert_eq!(c1.t_steps, 4);
        assert_eq!((c1.beta_start, c1.beta_end), (0.99, 0.1));
        let c2 = TrainConfig::stage2_defaults();
        assert_eq!((c2.epochs, c2.batch_size), (50, 8));
        assert!((c2.lr - 8e-5).abs() < 1e-20);
    }

    #[test]
    fn parse_roundtrip_is_canonical() {
        let mut cfg = TrainConfig::stage1_defaults();
        cfg.seed = 1234;
        cfg.model.base_channels = 16;
        let text = cfg.serialize();
        let parsed = TrainConfig::parse(&text).unwrap();
        assert_eq!(parsed.serialize(), text);
    }

    #[test]
    fn parse_rejects_bad_input() {
        assert!(TrainConfig::parse("epochs = 3").is_err()); // no stage
        assert!(TrainConfig::parse("stage = 3").is_err());
        assert!(TrainConfig::parse("stage = 1\nepochs == 3").is_err());
        assert!(TrainConfig::parse("stage = 1\nnot_a_key = 1").is_err());
        assert!(TrainConfig::parse("stage = 1\nepochs = 1\nepochs = 2").is_err());
        assert!(TrainConfig::parse("stage = 1\nlr = banana").is_err());
        let ok = TrainConfig::parse("# comment\n\nstage = 1\nepochs = 7\n").unwrap();
        assert_eq!(ok.epochs, 7);
    }

    #[test]
    fn validate_catches_contradictions() {
        let mut cfg = TrainConfig::stage2_defaults();
        cfg.model.disable_prior_connections = true;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::stage1_defaults();
        cfg.lr_patch = 50;
        assert!(cfg.validate().is_err());
    }
}
