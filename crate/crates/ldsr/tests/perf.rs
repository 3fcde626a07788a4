//! Ignored-by-default timing probes for the training and inference hot
//! paths. Run with: cargo test -p ldsr --test perf -- --ignored --nocapture

use std::time::Instant;

use ldsr::data::{make_training_pair, ImageTensor};
use ldsr::model::ModelConfig;
use ldsr::train::{seeded_stream, Stage1Model, Stage1Trainer, Stage2Trainer, TrainConfig};
use rand::Rng;

fn noise_images(n: usize, side: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = seeded_stream(seed, 50);
    (0..n)
        .map(|_| {
            let data: Vec<f32> = (0..side * side * 3)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect();
            ImageTensor::new(side, side, data).unwrap()
        })
        .collect()
}

fn toy_cfg(stage: u8) -> TrainConfig {
    let mut cfg = if stage == 1 {
        TrainConfig::stage1_defaults()
    } else {
        TrainConfig::stage2_defaults()
    };
    cfg.model = ModelConfig::tiny(16);
    cfg.model.imdb_per_fru = 2;
    cfg.model.csum_channels = 8;
    cfg.lr = 1e-3;
    cfg.lr_patch = 64;
    cfg.batch_size = 1;
    cfg.seed = 5;
    cfg.out_dir = std::env::temp_dir().join("ldsr_perf").display().to_string();
    cfg
}

#[test]
#[ignore]
fn stage1_step_timing() {
    let cfg = toy_cfg(1);
    let images = noise_images(4, 136, 1);
    let mut rng = seeded_stream(5, 51);
    let batch: Vec<_> = images
        .iter()
        .map(|img| make_training_pair(img, 64, 2.0, &mut rng).unwrap())
        .collect();
    let mut t: Stage1Trainer<f32> = Stage1Trainer::new(&cfg).unwrap();
    t.step(&batch[0..1], false).unwrap();
    let t0 = Instant::now();
    let n = 10;
    for i in 0..n {
        t.step(&batch[i % 4..i % 4 + 1], false).unwrap();
    }
    println!(
        "stage1 step (batch 1, hr 128, width 16): {:.3} s",
        t0.elapsed().as_secs_f64() / n as f64
    );
}

#[test]
#[ignore]
fn stage2_step_timing() {
    let cfg1 = toy_cfg(1);
    let s1 = Stage1Model::<f32>::new(&cfg1.model, 5).unwrap();
    let mut cfg2 = toy_cfg(2);
    cfg2.model = cfg1.model.clone();
    let images = noise_images(4, 136, 2);
    let mut rng = seeded_stream(6, 51);
    let batch: Vec<_> = images
        .iter()
        .map(|img| make_training_pair(img, 64, 2.0, &mut rng).unwrap())
        .collect();
    let mut t: Stage2Trainer<f32> = Stage2Trainer::new(&cfg2, s1).unwrap();
    t.step(&batch[0..1]).unwrap();
    let t0 = Instant::now();
    let n = 10;
    for i in 0..n {
        t.step(&batch[i % 4..i % 4 + 1]).unwrap();
    }
    println!(
        "stage2 step (batch 1, hr 128, width 16, T=4): {:.3} s",
        t0.elapsed().as_secs_f64() / n as f64
    );
}

#[test]
#[ignore]
fn denoiser_call_timing() {
    use ldsr::tensor::Graph;
    let mut cfg = ModelConfig::tiny(16);
    cfg.unet_base = 32;
    let s2 = ldsr::train::Stage2Model::<f32>::new(&cfg, 92).unwrap();
    let mut rng = seeded_stream(1, 2);
    let z = ldsr::model::autoencoder::sample_eps::<f32>(&[1, 4, 24, 24], &mut rng);
    let c = ldsr::model::autoencoder::sample_eps::<f32>(&[1, 4, 24, 24], &mut rng);
    let t0 = Instant::now();
    let n = 24;
    for i in 0..n {
        let mut g: Graph<f32> = Graph::inference();
        let zc = g.leaf(z.clone(), false);
        let cc = g.leaf(c.clone(), false);
        let out = s2
            .unet
            .forward(&mut g, &s2.store, zc, cc, 1 + (i % 4), 2.0)
            .unwrap();
        std::hint::black_box(g.val(out).data()[0]);
    }
    println!(
        "denoiser call (24x24 latent, base 32): {:.1} ms",
        t0.elapsed().as_secs_f64() * 1000.0 / n as f64
    );
}
