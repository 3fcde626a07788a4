//! Flip / rotate augmentation. The same draw is applied to every image of
//! a sample so the HR/LR pairing stays aligned.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ImageTensor, TrainSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    /// Number of 90-degree counter-clockwise rotations (0..=3).
    pub rot90: u8,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        hflip: false,
        vflip: false,
        rot90: 0,
    };

    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        Augmentation {
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            rot90: if rng.gen_bool(0.5) { 1 } else { 0 },
        }
    }

    pub fn apply(&self, img: &ImageTensor) -> ImageTensor {
        let mut out = img.clone();
        if self.hflip {
            out = hflip(&out);
        }
        if self.vflip {
            out = vflip(&out);
        }
        for _ in 0..self.rot90 % 4 {
            out = rot90ccw(&out);
        }
        out
    }
}

/// Apply one augmentation draw to all three images of a sample; the scale
/// is untouched.
pub fn apply_augmentation(sample: &TrainSample, aug: Augmentation) -> TrainSample {
    TrainSample {
        hr: aug.apply(&sample.hr),
        lr: aug.apply(&sample.lr),
        lr_up: aug.apply(&sample.lr_up),
        scale: sample.scale,
    }
}

fn hflip(img: &ImageTensor) -> ImageTensor {
    let (h, w) = (img.height, img.width);
    let mut data = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(y * w + x) * 3 + c] = img.at(y, w - 1 - x, c);
            }
        }
    }
    ImageTensor::from_raw(h, w, data)
}

fn vflip(img: &ImageTensor) -> ImageTensor {
    let (h, w) = (img.height, img.width);
    let mut data = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(y * w + x) * 3 + c] = img.at(h - 1 - y, x, c);
            }
        }
    }
    ImageTensor::from_raw(h, w, data)
}

fn rot90ccw(img: &ImageTensor) -> ImageTensor {
    let (h, w) = (img.height, img.width);
    // (y, x) in the rotated (w x h) image reads (x, w-1-y) from the source.
    let mut data = vec![0.0f32; h * w * 3];
    for y in 0..w {
        for x in 0..h {
            for c in 0..3 {
                data[(y * h + x) * 3 + c] = img.at(x, w - 1 - y, c);
            }
        }
    }
    ImageTensor::from_raw(w, h, data)
}
