//! Continuous-scale training pair construction and batch sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{apply_augmentation, bicubic_resize, Augmentation, Dataset, ImageTensor, TrainSample};
use crate::error::{Error, Result};

/// HR patch side for a drawn scale: floor(scale * lr_patch / 8) * 8. The
/// effective scale becomes hr_side / lr_patch, which keeps the latent grid
/// (HR / 8) integral with no padding.
pub fn hr_side_for_scale(lr_patch: usize, scale: f64) -> usize {
    ((scale * lr_patch as f64) / 8.0).floor() as usize * 8
}

/// Build one (HR, LR, LR-up, scale) sample from an HR source image.
pub fn make_training_pair(
    hr_source: &ImageTensor,
    lr_patch_size: usize,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TrainSample> {
    if !(1.0..=8.0).contains(&scale) {
        return Err(Error::InvalidArgument(format!(
            "scale {scale} outside [1, 8]"
        )));
    }
    if lr_patch_size == 0 {
        return Err(Error::InvalidArgument("lr_patch_size must be positive".into()));
    }
    let hr_side = hr_side_for_scale(lr_patch_size, scale);
    if hr_side < lr_patch_size {
        return Err(Error::InvalidArgument(format!(
            "hr side {hr_side} smaller than lr patch {lr_patch_size}; use a multiple-of-8 patch"
        )));
    }
    let hr = hr_source.random_crop(hr_side, rng)?;
    let lr = bicubic_resize(&hr, (lr_patch_size, lr_patch_size))?;
    let lr_up = bicubic_resize(&lr, (hr_side, hr_side))?;
    Ok(TrainSample {
        hr,
        lr,
        lr_up,
        scale: hr_side as f64 / lr_patch_size as f64,
    })
}

/// The one scale draw shared by a whole batch.
pub fn draw_batch_scale(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Draw a batch: a single scale is shared by all samples, so every HR crop
/// in the batch has identical dims.
pub fn sample_batch(
    dataset: &Dataset,
    batch_size: usize,
    lr_patch_size: usize,
    scale_range: (f64, f64),
    augment: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainSample>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("dataset has no images".into()));
    }
    let s = draw_batch_scale(rng, scale_range.0, scale_range.1);
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let idx = rng.gen_range(0..dataset.len());
        let mut sample = make_training_pair(&dataset.images[idx], lr_patch_size, s, rng)?;
        if augment {
            sample = apply_augmentation(&sample, Augmentation::draw(rng));
        }
        out.push(sample);
    }
    Ok(out)
}
