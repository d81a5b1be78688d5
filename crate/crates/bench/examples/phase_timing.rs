//! Wall-clock split of one MNIST training step by phase and layer.

use std::time::Instant;

use latentgan::config::ExperimentConfig;
use latentgan::nn::Mode;
use latentgan::tensor::Tensor;
use latentgan::training::{autoencoder_phase, discriminator_phase, generator_phase, TrainState};
use latentgan::PresetName;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = ExperimentConfig::preset_default(PresetName::Mnist);
    let mut s = TrainState::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 128;
    let x = Tensor::from_vec(&[n, 1, 32, 32], (0..n * 1024).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
    let reps = 5;
    let t = Instant::now();
    for _ in 0..reps {
        autoencoder_phase(&mut s.bundle, &mut s.opt_ae, &x).unwrap();
    }
    println!("ae phase {:?}", t.elapsed() / reps);
    let real = s.bundle.enc.infer(&x);
    let t = Instant::now();
    for _ in 0..reps {
        discriminator_phase(&mut s.bundle.gan, &mut s.opt_d, &real, &cfg.noisy_labels, &mut rng).unwrap();
    }
    println!("d phase {:?}", t.elapsed() / reps);
    let t = Instant::now();
    for _ in 0..reps {
        generator_phase(&mut s.bundle.gan, &mut s.opt_gq, n, &cfg.loss, &mut rng).unwrap();
    }
    println!("gq phase {:?}", t.elapsed() / reps);

    for (name, net, input) in [("enc", &mut s.bundle.enc, x.clone()), ("dec", &mut s.bundle.dec, real.clone())] {
        let mut h = input;
        let mut acts = Vec::new();
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let t = Instant::now();
            let y = layer.forward(&h, Mode::Train);
            let f = t.elapsed();
            acts.push((i, f, y.shape().to_vec()));
            h = y;
        }
        let mut g = Tensor::full(h.shape(), 1e-3f32);
        for (i, layer) in net.layers.iter_mut().enumerate().rev() {
            let t = Instant::now();
            g = layer.backward(&g);
            let (_, f, shape) = &acts[i];
            println!("{name}.{i} fwd {:?} bwd {:?} out {:?}", f, t.elapsed(), shape);
        }
    }
}
