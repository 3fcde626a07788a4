//! Command-line interface. Exit codes: 0 success, 2 invalid arguments,
//! 3 checkpoint or data integrity errors, 4 runtime numerical failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{bicubic_resize, load_png, save_png, ImageTensor};
use crate::error::{Error, Result};
use crate::infer::{InferencePipeline, InferenceRequest};
use crate::metrics::psnr;
use crate::train::{run_stage1, run_stage2, TrainConfig};

#[derive(Parser)]
#[command(
    name = "ldsr",
    version,
    about = "Continuous-scale super-resolution with a differential-prior latent diffusion model",
    long_about = None
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Bicubic-degrade a folder of PNGs into paired lr/ and hr/ outputs
    Degrade {
        /// Input directory of PNG images
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory (lr/ and hr/ subfolders are created)
        #[arg(long)]
        out: PathBuf,
        /// Downscaling factor in [1, 8]
        #[arg(long)]
        scale: f64,
        /// Seed for the crop positions
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the stage-1 autoencoder and SR decoder
    TrainStage1 {
        #[arg(long)]
        config: PathBuf,
        /// Resume parameters from an earlier stage-1 checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the stage-2 conditional diffusion model on a frozen stage-1
    TrainStage2 {
        #[arg(long)]
        config: PathBuf,
        /// Stage-1 checkpoint to build on
        #[arg(long)]
        stage1: PathBuf,
        /// Resume diffusion parameters from an earlier stage-2 checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Super-resolve an image (or a directory of images)
    Infer {
        /// Stage-2 checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        /// Input PNG file or directory
        #[arg(long = "in")]
        input: PathBuf,
        /// Upscaling factor (values above 8 extrapolate with a warning)
        #[arg(long)]
        scale: f64,
        /// Seed for the latent noise draw
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR between two folders of equally named PNGs (RGB in [0,1],
    /// capped at 100 dB); tab-separated per-image lines plus the mean
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
}

pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Degrade {
            input,
            out,
            scale,
            seed,
        } => degrade(&input, &out, scale, seed),
        Cmd::TrainStage1 { config, resume } => {
            let cfg = TrainConfig::load(&config)?;
            if cfg.stage != 1 {
                return Err(Error::InvalidArgument(
                    "train-stage1 requires a config with stage = 1".into(),
                ));
            }
            let ckpt = run_stage1::<f32>(&cfg, resume.as_deref())?;
            println!("stage-1 checkpoint written to {}", ckpt.display());
            Ok(())
        }
        Cmd::TrainStage2 {
            config,
            stage1,
            resume,
        } => {
            let cfg = TrainConfig::load(&config)?;
            if cfg.stage != 2 {
                return Err(Error::InvalidArgument(
                    "train-stage2 requires a config with stage = 2".into(),
                ));
            }
            let ckpt = run_stage2::<f32>(&cfg, &stage1, resume.as_deref())?;
            println!("stage-2 checkpoint written to {}", ckpt.display());
            Ok(())
        }
        Cmd::Infer {
            ckpt,
            input,
            scale,
            seed,
            out,
        } => infer_cmd(&ckpt, &input, scale, seed, &out),
        Cmd::Eval { pred, gt } => eval_cmd(&pred, &gt),
    }
}

fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::EmptyDataset(dir.display().to_string()));
    }
    Ok(names)
}

/// Degradation pairing rule: lr side = floor(hr side / s), hr crop =
/// floor(s * lr side / 8) * 8, so a later `infer --scale s` on the LR
/// image reproduces exactly the saved HR dims.
fn degrade(input: &Path, out: &Path, scale: f64, seed: u64) -> Result<()> {
    if !(1.0..=8.0).contains(&scale) {
        return Err(Error::InvalidArgument(format!(
            "degrade scale {scale} outside [1, 8]"
        )));
    }
    let names = list_pngs(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in &names {
        let img = load_png(&input.join(name))?;
        let lr_h = ((img.height as f64) / scale).floor() as usize;
        let lr_w = ((img.width as f64) / scale).floor() as usize;
        let hr_h = ((scale * lr_h as f64) / 8.0).floor() as usize * 8;
        let hr_w = ((scale * lr_w as f64) / 8.0).floor() as usize * 8;
        if hr_h < 8 || hr_w < 8 || lr_h == 0 || lr_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "{name}: {}x{} too small for scale {scale}",
                img.height, img.width
            )));
        }
        use rand::Rng;
        let y0 = rng.gen_range(0..=img.height - hr_h);
        let x0 = rng.gen_range(0..=img.width - hr_w);
        let hr = img.crop(y0, x0, hr_h, hr_w);
        let lr = bicubic_resize(&hr, (lr_h, lr_w))?;
        save_png(&out.join("hr").join(name), &hr)?;
        save_png(&out.join("lr").join(name), &lr)?;
        println!("{name}\t{hr_h}x{hr_w} -> {lr_h}x{lr_w}");
    }
    Ok(())
}

fn infer_cmd(ckpt: &Path, input: &Path, scale: f64, seed: u64, out: &Path) -> Result<()> {
    let pipeline: InferencePipeline<f32> = InferencePipeline::from_checkpoint(ckpt)?;
    let inputs: Vec<(String, ImageTensor)> = if input.is_dir() {
        list_pngs(input)?
            .into_iter()
            .map(|n| load_png(&input.join(&n)).map(|img| (n, img)))
            .collect::<Result<_>>()?
    } else {
        let name = input
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("out.png")
            .to_string();
        vec![(name, load_png(input)?)]
    };
    for (name, lr) in inputs {
        let req = InferenceRequest {
            lr,
            scale,
            seed,
        };
        let (img, stats) = pipeline.infer(&req)?;
        save_png(&out.join(&name), &img)?;
        println!(
            "{name}\t{}x{}\tdenoiser_calls={}\tdiffusion={:.3}s\tdecoder={:.3}s",
            stats.out_dims.0,
            stats.out_dims.1,
            stats.denoiser_calls,
            stats.diffusion_secs,
            stats.decoder_secs
        );
    }
    Ok(())
}

fn eval_cmd(pred: &Path, gt: &Path) -> Result<()> {
    let names = list_pngs(pred)?;
    let mut sum = 0.0;
    for name in &names {
        let p = load_png(&pred.join(name))?;
        let g = load_png(&gt.join(name))?;
        let v = psnr(&p, &g)?;
        sum += v;
        println!("{name}\t{v:.4}");
    }
    println!("mean\t{:.4}", sum / names.len() as f64);
    Ok(())
}
