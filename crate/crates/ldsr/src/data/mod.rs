//! Image I/O, bicubic degradation, continuous-scale patch sampling and
//! augmentation for both training stages.

mod augment;
mod bicubic;
mod png_io;
mod sample;

pub use augment::{Augmentation, apply_augmentation};
pub use bicubic::{bicubic_resize, bicubic_resize_raw};
pub use png_io::{decode_png, load_png, save_png};
pub use sample::{draw_batch_scale, make_training_pair, sample_batch, hr_side_for_scale};

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Value};

/// H x W x 3 RGB image with values in [0, 1], row-major HWC storage.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(
                "image dimensions must be positive".into(),
            ));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image buffer length {} does not match {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("image contains non-finite values".into()));
        }
        Ok(ImageTensor {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, v: f32) -> Self {
        ImageTensor {
            height,
            width,
            data: vec![v; height * width * 3],
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * 3);
        ImageTensor {
            height,
            width,
            data,
        }
    }

    /// Random square crop of the given side, using the rng for the corner.
    pub fn random_crop(
        &self,
        side: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<ImageTensor> {
        if self.height < side || self.width < side {
            return Err(Error::InsufficientSource {
                need_h: side,
                need_w: side,
                have_h: self.height,
                have_w: self.width,
            });
        }
        use rand::Rng;
        let y0 = if self.height == side {
            0
        } else {
            rng.gen_range(0..=self.height - side)
        };
        let x0 = if self.width == side {
            0
        } else {
            rng.gen_range(0..=self.width - side)
        };
        Ok(self.crop(y0, x0, side, side))
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> ImageTensor {
        assert!(y0 + h <= self.height && x0 + w <= self.width);
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            let row = ((y0 + y) * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        ImageTensor::from_raw(h, w, data)
    }

    /// Multiset of per-channel pixel values, for augmentation invariants.
    pub fn channel_multiset(&self, c: usize) -> Vec<u32> {
        let mut v: Vec<u32> = self
            .data
            .iter()
            .skip(c)
            .step_by(3)
            .map(|x| x.to_bits())
            .collect();
        v.sort_unstable();
        v
    }
}

/// Pack images (equal dims) into an NCHW tensor value.
pub fn images_to_value<E: Elem>(images: &[&ImageTensor]) -> Value<E> {
    assert!(!images.is_empty());
    let (h, w) = (images[0].height, images[0].width);
    let mut data = vec![E::ZERO; images.len() * 3 * h * w];
    for (n, img) in images.iter().enumerate() {
        assert!(img.height == h && img.width == w, "batch images must share dims");
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[((n * 3 + c) * h + y) * w + x] =
                        E::from_f64(img.at(y, x, c) as f64);
                }
            }
        }
    }
    Value::new(vec![images.len(), 3, h, w], data)
}

/// Extract sample `n` of an NCHW value as an image, clamping to [0, 1].
pub fn value_to_image<E: Elem>(v: &Value<E>, n: usize) -> ImageTensor {
    let (nn, c, h, w) = v.nchw();
    assert!(c == 3 && n < nn);
    let mut data = vec![0.0f32; h * w * 3];
    for ci in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let raw = v.data()[((n * 3 + ci) * h + y) * w + x].to_f64();
                data[(y * w + x) * 3 + ci] = raw.clamp(0.0, 1.0) as f32;
            }
        }
    }
    ImageTensor::from_raw(h, w, data)
}

/// One training example: HR patch, its bicubic LR counterpart, the LR
/// upsampled back to HR size, and the effective scale HR/LR.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub hr: ImageTensor,
    pub lr: ImageTensor,
    pub lr_up: ImageTensor,
    pub scale: f64,
}

/// An on-disk dataset: a directory of PNGs, optionally restricted by a
/// plain-text split file (one filename per line).
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<ImageTensor>,
}

impl Dataset {
    pub fn load(dir: &Path, split: Option<&Path>) -> Result<Dataset> {
        let names = match split {
            Some(split_path) => {
                let text = std::fs::read_to_string(split_path)?;
                parse_split(&text)
            }
            None => {
                let mut names: Vec<String> = std::fs::read_dir(dir)?
                    .filter_map(|e| e.ok())
                    .filter_map(|e| e.file_name().into_string().ok())
                    .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
                    .collect();
                names.sort();
                names
            }
        };
        if names.is_empty() {
            return Err(Error::EmptyDataset(dir.display().to_string()));
        }
        let images = names
            .iter()
            .map(|n| load_png(&dir.join(n)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { names, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Parse a split file: one filename per line, blanks ignored.
pub fn parse_split(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .map(|l| l.to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cubic_kernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    /// Direct (non-separable) evaluation of the Keys a = -0.5 kernel with
    /// pixel-center alignment and edge clamping; the oracle against which
    /// the production resize is checked.
    fn reference_bicubic(img: &ImageTensor, th: usize, tw: usize) -> Vec<f64> {
        let (h, w) = (img.height, img.width);
        let mut out = vec![0.0f64; th * tw * 3];
        for oy in 0..th {
            let sy = (oy as f64 + 0.5) * h as f64 / th as f64 - 0.5;
            let by = sy.floor() as isize;
            for ox in 0..tw {
                let sx = (ox as f64 + 0.5) * w as f64 / tw as f64 - 0.5;
                let bx = sx.floor() as isize;
                for c in 0..3 {
                    let mut acc = 0.0f64;
                    for m in 0..4 {
                        let iy = by - 1 + m as isize;
                        let wy = cubic_kernel(sy - iy as f64);
                        let iy = iy.clamp(0, h as isize - 1) as usize;
                        for n in 0..4 {
                            let ix = bx - 1 + n as isize;
                            let wx = cubic_kernel(sx - ix as f64);
                            let ix = ix.clamp(0, w as isize - 1) as usize;
                            acc += wy * wx * img.at(iy, ix, c) as f64;
                        }
                    }
                    out[(oy * tw + ox) * 3 + c] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn bicubic_constant_image_stays_constant() {
        let img = ImageTensor::constant(9, 7, 0.5);
        for target in [(5, 5), (12, 20), (9, 7), (1, 1)] {
            let out = bicubic_resize(&img, target).unwrap();
            for v in out.data() {
                assert!((v - 0.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bicubic_identity_is_bit_exact() {
        let img = random_image(48, 48, 1);
        let out = bicubic_resize(&img, (48, 48)).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn bicubic_matches_independent_reference() {
        let img = random_image(8, 8, 2);
        let out = bicubic_resize_raw(&img, (5, 5)).unwrap();
        let want = reference_bicubic(&img, 5, 5);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
        // Upscaling path too.
        let out = bicubic_resize_raw(&img, (13, 11)).unwrap();
        let want = reference_bicubic(&img, 13, 11);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn bicubic_is_linear_before_clipping() {
        let x = random_image(10, 10, 3);
        let y = random_image(10, 10, 4);
        let (a, b) = (0.6f32, -0.3f32);
        let mix_data: Vec<f32> = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&xv, &yv)| a * xv + b * yv)
            .collect();
        let mix = ImageTensor::from_raw(10, 10, mix_data);
        let rx = bicubic_resize_raw(&x, (6, 7)).unwrap();
        let ry = bicubic_resize_raw(&y, (6, 7)).unwrap();
        let rmix = bicubic_resize_raw(&mix, (6, 7)).unwrap();
        for i in 0..rmix.data().len() {
            let want = a * rx.data()[i] + b * ry.data()[i];
            assert!((rmix.data()[i] - want).abs() < 1e-5);
        }
    }

    #[test]
    fn bicubic_rejects_zero_target() {
        let img = ImageTensor::constant(4, 4, 0.2);
        assert!(bicubic_resize(&img, (0, 5)).is_err());
        assert!(bicubic_resize(&img, (5, 0)).is_err());
    }

    #[test]
    fn training_pair_rounding_rule() {
        let src = random_image(256, 256, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let s = make_training_pair(&src, 48, 4.0, &mut rng).unwrap();
        assert_eq!(s.hr.height, 192);
        assert_eq!((s.lr.height, s.lr.width), (48, 48));
        assert!((s.scale - 4.0).abs() < 1e-12);

        let s = make_training_pair(&src, 48, 2.6, &mut rng).unwrap();
        assert_eq!(s.hr.height, 120);
        assert!((s.scale - 2.5).abs() < 1e-12);

        let s = make_training_pair(&src, 48, 1.0, &mut rng).unwrap();
        assert_eq!(s.hr.height, 48);
        // Identity pair at scale 1: hr = lr = lr_up bit-exactly.
        assert_eq!(s.hr.data(), s.lr.data());
        assert_eq!(s.hr.data(), s.lr_up.data());
    }

    #[test]
    fn training_pair_shape_invariants() {
        let src = random_image(400, 400, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in [1.0, 1.37, 2.5, 3.9, 5.5, 8.0] {
            let pair = make_training_pair(&src, 48, s, &mut rng).unwrap();
            assert_eq!(pair.hr.height % 8, 0);
            assert_eq!(pair.hr.height, pair.hr.width);
            let eff = pair.hr.height as f64 / pair.lr.height as f64;
            assert!((pair.scale - eff).abs() < 1e-12);
            assert_eq!(pair.lr_up.height, pair.hr.height);
            assert!(pair.hr.height as f64 <= s * 48.0 + 1e-9);
        }
    }

    #[test]
    fn training_pair_insufficient_source() {
        let src = random_image(100, 100, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        match make_training_pair(&src, 48, 8.0, &mut rng) {
            Err(crate::Error::InsufficientSource { need_h: 384, .. }) => {}
            other => panic!("expected InsufficientSource, got {other:?}"),
        }
        assert!(make_training_pair(&src, 48, 0.5, &mut rng).is_err());
        assert!(make_training_pair(&src, 48, 9.0, &mut rng).is_err());
    }

    #[test]
    fn augmentation_involutions() {
        let src = random_image(64, 64, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sample = make_training_pair(&src, 16, 2.0, &mut rng).unwrap();

        let id = apply_augmentation(&sample, Augmentation::IDENTITY);
        assert_eq!(id.hr.data(), sample.hr.data());
        assert_eq!(id.lr.data(), sample.lr.data());

        let hflip = Augmentation {
            hflip: true,
            ..Augmentation::IDENTITY
        };
        let twice = apply_augmentation(&apply_augmentation(&sample, hflip), hflip);
        assert_eq!(twice.hr.data(), sample.hr.data());
        assert_eq!(twice.lr_up.data(), sample.lr_up.data());

        let rot = Augmentation {
            rot90: 1,
            ..Augmentation::IDENTITY
        };
        let mut four = sample.clone();
        for _ in 0..4 {
            four = apply_augmentation(&four, rot);
        }
        assert_eq!(four.hr.data(), sample.hr.data());
        assert_eq!(four.lr.data(), sample.lr.data());
    }

    #[test]
    fn augmentation_preserves_channel_multisets() {
        let img = random_image(17, 17, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..8 {
            let aug = Augmentation::draw(&mut rng);
            let out = aug.apply(&img);
            for c in 0..3 {
                assert_eq!(out.channel_multiset(c), img.channel_multiset(c));
            }
        }
    }

    #[test]
    fn batch_shares_scale_and_dims() {
        let dataset = Dataset {
            names: vec!["a".into(), "b".into()],
            images: vec![random_image(400, 400, 10), random_image(420, 390, 11)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = sample_batch(&dataset, 4, 48, (1.0, 8.0), true, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        for b in &batch {
            assert_eq!(b.scale, batch[0].scale);
            assert_eq!(b.hr.height, batch[0].hr.height);
            assert_eq!(b.hr.height % 8, 0);
        }
        let single = sample_batch(&dataset, 1, 48, (1.0, 8.0), true, &mut rng).unwrap();
        assert_eq!(single.len(), 1);

        let empty = Dataset {
            names: vec![],
            images: vec![],
        };
        assert!(sample_batch(&empty, 4, 48, (1.0, 8.0), true, &mut rng).is_err());
    }

    /// Kolmogorov-Smirnov p-value against U(lo, hi), asymptotic formula.
    fn ks_uniform_p(samples: &mut [f64], lo: f64, hi: f64) -> f64 {
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = samples.len() as f64;
        let mut d: f64 = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let cdf = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
            let lo_step = i as f64 / n;
            let hi_step = (i + 1) as f64 / n;
            d = d.max((cdf - lo_step).abs()).max((hi_step - cdf).abs());
        }
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        let mut p = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            p += 2.0 * (-1.0f64).powi(k as i32 + 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn batch_scale_draws_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut draws: Vec<f64> = (0..1000)
            .map(|_| draw_batch_scale(&mut rng, 1.0, 8.0))
            .collect();
        assert!(draws.iter().all(|&s| (1.0..=8.0).contains(&s)));
        let p = ks_uniform_p(&mut draws, 1.0, 8.0);
        assert!(p > 0.01, "KS p-value {p}");
    }

    #[test]
    fn split_file_parsing() {
        let names = parse_split("a.png\n\n  b.png \nc.png\n");
        assert_eq!(names, vec!["a.png", "b.png", "c.png"]);
    }

    #[test]
    fn png_roundtrip() {
        let img = random_image(21, 13, 12);
        let dir = std::env::temp_dir().join("ldsr_png_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.png");
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!((back.height, back.width), (21, 13));
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }
        assert!(decode_png(b"not a png").is_err());
    }
}
