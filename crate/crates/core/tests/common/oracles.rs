//! Naive reference formulas for the losses and mmd², written directly from
//! their definitions in probability space.

use latentgan::codes::{sample_batch, CodeSpec, LatentCode};
use latentgan::evaluation::mmd2;
use latentgan::losses::{
    d_loss, d_loss_logits, g_adv_loss, g_adv_loss_logits, info_loss, reconstruction_loss, LossWeights,
    NoisyLabelPolicy,
};
use latentgan::networks::CodePosterior;
use latentgan::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-10;

pub fn sigmoid(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

pub fn rel(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else {
        (got - want).abs() / want.abs()
    }
}

pub fn tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Mean over images of each image's mean squared pixel error.
pub fn reconstruction(x: &Tensor<f64>, xh: &Tensor<f64>) -> f64 {
    let n = x.shape()[0];
    let per = x.len() / n;
    let mut total = 0.0;
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..per {
            let d = x.data()[i * per + j] - xh.data()[i * per + j];
            s += d * d;
        }
        total += s / per as f64;
    }
    total / n as f64
}

/// `−½(mean ln D(x) + mean ln(1 − D(G)))`.
pub fn discriminator(real_probs: &[f64], fake_probs: &[f64]) -> f64 {
    let log_real: f64 = real_probs.iter().map(|p| p.ln()).sum::<f64>() / real_probs.len() as f64;
    let log_fake: f64 = fake_probs.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / fake_probs.len() as f64;
    -(log_real + log_fake) / 2.0
}

pub fn generator_adv(fake_probs: &[f64]) -> f64 {
    fake_probs.iter().map(|p| -p.ln()).sum::<f64>() / fake_probs.len() as f64
}

/// `(λ_disc · mean Σ_heads −ln softmax[class], λ_cont · mean squared error)`.
pub fn info(post: &CodePosterior<f64>, codes: &[LatentCode], w: &LossWeights) -> (f64, f64) {
    let n = codes.len();
    let mut ce = 0.0;
    for (h, logits) in post.cat_logits.iter().enumerate() {
        for (r, code) in codes.iter().enumerate() {
            let row = logits.row(r);
            let class = code.cat_onehots[h].iter().position(|&v| v == 1.0).unwrap();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            ce -= (row[class].exp() / z).ln();
        }
    }
    let mut sq = 0.0;
    let m = post.cont_means.len();
    for (r, code) in codes.iter().enumerate() {
        for (j, c) in code.cont_values.iter().enumerate() {
            sq += (post.cont_means.row(r)[j] - c).powi(2);
        }
    }
    (w.lambda_disc * ce / n as f64, w.lambda_cont * sq / m as f64)
}

/// Biased MMD² as three full double sums.
pub fn mmd2_double_sum(x: &Tensor<f64>, y: &Tensor<f64>, sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let s: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
        (-s / (2.0 * sigma * sigma)).exp()
    };
    let mean = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let mut s = 0.0;
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                s += k(a.row(i), b.row(j));
            }
        }
        s / (a.rows() * b.rows()) as f64
    };
    mean(x, x) + mean(y, y) - 2.0 * mean(x, y)
}

/// Worst relative error per quantity over `cases` random batches of size ≤ 8.
pub fn sweep(cases: u64) -> Vec<(String, f64)> {
    let mut worst = [0.0f64; 5];
    let spec = CodeSpec {
        noise_dim: 3,
        categoricals: vec![10, 4],
        continuous: vec![(-1.0, 1.0); 2],
        traversal_range: (-1.0, 1.0),
    };
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let n = rng.gen_range(1..=8);

        let x = tensor(&[n, 1, 4, 4], &mut rng, 1.0);
        let xh = tensor(&[n, 1, 4, 4], &mut rng, 1.0);
        worst[0] = worst[0].max(rel(reconstruction_loss(&x, &xh).unwrap(), reconstruction(&x, &xh)));

        let real: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let fake: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let rp: Vec<f64> = real.iter().map(|&l| sigmoid(l)).collect();
        let fp: Vec<f64> = fake.iter().map(|&l| sigmoid(l)).collect();
        let want = discriminator(&rp, &fp);
        let prob = d_loss(&rp, &fp, &NoisyLabelPolicy::disabled(), &mut rng);
        let logit = d_loss_logits(&real, &fake, &vec![1.0; n], &vec![0.0; n]).0;
        worst[1] = worst[1].max(rel(prob, want)).max(rel(logit, want));

        let want = generator_adv(&fp);
        worst[2] = worst[2].max(rel(g_adv_loss(&fp), want)).max(rel(g_adv_loss_logits(&fake).0, want));

        let (codes, _): (Vec<LatentCode>, Tensor<f64>) = sample_batch(&spec, n, &mut rng);
        let post = CodePosterior {
            cat_logits: vec![tensor(&[n, 10], &mut rng, 3.0), tensor(&[n, 4], &mut rng, 3.0)],
            cont_means: tensor(&[n, 2], &mut rng, 1.5),
        };
        let w = LossWeights {
            lambda_cont: rng.gen_range(0.1..2.0),
            lambda_disc: rng.gen_range(0.1..2.0),
        };
        let got = info_loss(&post, &codes, &w).unwrap();
        let (cat, cont) = info(&post, &codes, &w);
        worst[3] = worst[3].max(rel(got.cat, cat)).max(rel(got.cont, cont));

        let d = rng.gen_range(1..4);
        let a = tensor(&[n, d], &mut rng, 2.0);
        let b = tensor(&[rng.gen_range(1..=8), d], &mut rng, 2.0);
        let sigma = rng.gen_range(0.3..3.0);
        let want = mmd2_double_sum(&a, &b, sigma);
        if want > 1e-6 {
            worst[4] = worst[4].max(rel(mmd2(&a, &b, Some(sigma)).unwrap().value, want));
        }
    }
    ["reconstruction_loss", "d_loss", "g_adv_loss", "info_loss", "mmd2"]
        .iter()
        .zip(worst)
        .map(|(n, w)| (n.to_string(), w))
        .collect()
}
