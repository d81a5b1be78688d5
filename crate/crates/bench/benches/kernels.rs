use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use latentgan::codes::sample_batch;
use latentgan::config::ExperimentConfig;
use latentgan::evaluation::{fit_assignment, mmd2};
use latentgan::nn::{Conv2d, Upsample};
use latentgan::tensor::{Real, Tensor};
use latentgan::training::{autoencoder_phase, discriminator_phase, generator_phase, TrainState};
use latentgan::{AssignmentMethod, PresetName};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn gemm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("gemm");
    for (m, k, n) in [(128, 1000, 1000), (64, 1152, 8192)] {
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen()).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.gen()).collect();
        let mut out = vec![0.0f32; m * n];
        g.bench_function(format!("{m}x{k}x{n}"), |bench| {
            bench.iter(|| f32::gemm(m, k, n, 1.0, &a, k, 1, &b, n, 1, 0.0, &mut out, n, 1))
        });
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("conv");
    g.sample_size(20);
    // first encoder layer and the two largest decoder layers at batch 128
    for (name, cin, cout, k, stride, pad, hw) in [
        ("enc0", 1, 16, 4, 2, 1, 32),
        ("dec_o32", 64, 32, 3, 1, 1, 16),
        ("dec_o1", 32, 1, 3, 1, 1, 32),
    ] {
        let mut layer = Conv2d::<f32>::new(cin, cout, k, stride, pad, &mut rng);
        let x = uniform(&[128, cin, hw, hw], &mut rng);
        let y = layer.forward(&x);
        let gy = uniform(y.shape(), &mut rng);
        g.bench_function(format!("{name}/forward"), |b| b.iter(|| layer.forward(&x)));
        g.bench_function(format!("{name}/forward_backward"), |b| {
            b.iter(|| {
                layer.forward(&x);
                layer.backward(&gy)
            })
        });
    }
    g.finish();
}

fn upsample(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut up = Upsample::new(2);
    let x = uniform(&[128, 64, 16, 16], &mut rng);
    let y = up.forward(&x);
    let gy = uniform(y.shape(), &mut rng);
    c.bench_function("upsample2/forward_backward", |b| {
        b.iter(|| {
            up.forward(&x);
            up.backward(&gy)
        })
    });
}

fn training_phases(c: &mut Criterion) {
    let cfg = ExperimentConfig::preset_default(PresetName::Mnist);
    let mut state = TrainState::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = uniform(&[128, 1, 32, 32], &mut rng);
    let real = state.bundle.enc.infer(&x);
    let mut g = c.benchmark_group("mnist_phase");
    g.sample_size(10);
    g.bench_function("autoencoder", |b| {
        b.iter(|| autoencoder_phase(&mut state.bundle, &mut state.opt_ae, &x).unwrap())
    });
    g.bench_function("discriminator", |b| {
        b.iter(|| discriminator_phase(&mut state.bundle.gan, &mut state.opt_d, &real, &cfg.noisy_labels, &mut rng).unwrap())
    });
    g.bench_function("generator", |b| {
        b.iter(|| generator_phase(&mut state.bundle.gan, &mut state.opt_gq, 128, &cfg.loss, &mut rng).unwrap())
    });
    g.bench_function("decode_eval", |b| {
        let (_, inputs) = sample_batch::<f32>(&state.bundle.gan.code_spec, 128, &mut rng);
        b.iter(|| {
            let z = state.bundle.generate(&inputs).unwrap();
            state.bundle.decode(&z).unwrap()
        })
    });
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::from_vec(&[2000, 2], (0..4000).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let y = Tensor::from_vec(&[2000, 2], (0..4000).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let mut g = c.benchmark_group("evaluation");
    g.sample_size(10);
    g.bench_function("mmd2_2000x2000", |b| b.iter(|| mmd2(&x, &y, None).unwrap()));
    let clusters: Vec<usize> = (0..60_000).map(|_| rng.gen_range(0..10)).collect();
    let labels: Vec<usize> = (0..60_000).map(|_| rng.gen_range(0..10)).collect();
    g.bench_function("hungarian_60000", |b| {
        b.iter_batched(
            || (clusters.clone(), labels.clone()),
            |(c, l)| fit_assignment(&c, &l, 10, AssignmentMethod::Hungarian).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, gemm, conv, upsample, training_phases, evaluation);
criterion_main!(benches);
