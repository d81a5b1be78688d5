//! Central finite differences against every hand-written backward pass, in f64.
//! Each check returns `(name, relative error)` pairs.

use latentgan::codes::{sample_batch, CodeSpec, LatentCode};
use latentgan::losses::{
    d_loss_logits, g_adv_loss_logits, info_loss, info_loss_grad, reconstruction_loss, reconstruction_loss_grad,
    LossWeights,
};
use latentgan::networks::{ArchPreset, CodePosterior, DqNet, NetworkBundle, PresetName};
use latentgan::nn::{Conv2d, Layer, Mode, Param, Sequential};
use latentgan::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

/// Floor on the denominator so gradients that vanish identically (a bias
/// feeding batch norm) compare against finite-difference noise in absolute terms.
const NORM_FLOOR: f64 = 1e-3;

pub type Report = Vec<(String, f64)>;

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(NORM_FLOOR)
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Finite-difference gradient of `f` with respect to every entry of `x`.
fn numeric(x: &mut [f64], f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + EPS;
            let up = f(x);
            x[i] = orig - EPS;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * EPS)
        })
        .collect()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `d(Σ r·net(x))` for the input and every parameter tensor of `net`.
pub fn check_sequential(label: &str, net: &mut Sequential<f64>, x: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Report {
    let y = net.forward(x, Mode::Train);
    let r = random(y.shape(), -1.0, 1.0, rng);
    net.zero_grad();
    net.forward(x, Mode::Train);
    let dx = net.backward(&r);

    let mut report = Vec::new();
    let mut xv = x.data().to_vec();
    let shape = x.shape().to_vec();
    let mut probe = net.clone();
    let fd = numeric(&mut xv, &mut |v| {
        let t = Tensor::from_vec(&shape, v.to_vec()).unwrap();
        dot(&probe.forward(&t, Mode::Train), &r)
    });
    report.push((format!("{label}.input"), rel_err(dx.data(), &fd)));

    let mut names = Vec::new();
    net.visit_params(label, &mut |n, p| names.push((n.to_string(), p.grad.data().to_vec())));
    assert!(!names.is_empty(), "{label} has no parameters");
    for (name, analytic) in names {
        let mut probe = net.clone();
        let mut values = Vec::new();
        probe.visit_params(label, &mut |n, p| {
            if n == name {
                values = p.value.data().to_vec();
            }
        });
        let fd = numeric(&mut values, &mut |v| {
            probe.visit_params_mut(label, &mut |n, p: &mut Param<f64>| {
                if n == name {
                    p.value.data_mut().copy_from_slice(v);
                }
            });
            dot(&probe.forward(x, Mode::Train), &r)
        });
        report.push((name, rel_err(&analytic, &fd)));
    }
    report
}

fn tiny() -> NetworkBundle<f64> {
    NetworkBundle::build(&ArchPreset::get(PresetName::Tiny), 11).unwrap()
}

pub fn encoder() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut b = tiny();
    let x = random(&[3, 1, 4, 4], -1.0, 1.0, &mut rng);
    check_sequential("enc", &mut b.enc, &x, &mut rng)
}

/// Train-mode batch norm included.
pub fn decoder() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut b = tiny();
    let z = random(&[3, 8], -1.0, 1.0, &mut rng);
    check_sequential("dec", &mut b.dec, &z, &mut rng)
}

pub fn generator() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut b = tiny();
    let (_, inputs) = sample_batch::<f64>(&b.gan.code_spec, 4, &mut rng);
    check_sequential("gen", &mut b.gan.gen, &inputs, &mut rng)
}

/// Shared trunk with the real/fake head and both posterior heads.
pub fn discriminator() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut b = tiny();
    let z = random(&[5, 8], -1.0, 1.0, &mut rng);
    let out = b.gan.dq.forward(&z);
    let rd = random(out.d_logits.shape(), -1.0, 1.0, &mut rng);
    let rc: Vec<Tensor<f64>> = out
        .posterior
        .cat_logits
        .iter()
        .map(|t| random(t.shape(), -1.0, 1.0, &mut rng))
        .collect();
    let rm = random(out.posterior.cont_means.shape(), -1.0, 1.0, &mut rng);
    let scalar = |dq: &mut DqNet<f64>, z: &Tensor<f64>| {
        let o = dq.forward(z);
        let mut s = dot(&o.d_logits, &rd) + dot(&o.posterior.cont_means, &rm);
        for (l, r) in o.posterior.cat_logits.iter().zip(&rc) {
            s += dot(l, r);
        }
        s
    };
    b.gan.dq.zero_grad();
    b.gan.dq.forward(&z);
    let dz = b.gan.dq.backward(Some(&rd), Some((&rc, &rm)));

    let mut report = Vec::new();
    let mut zv = z.data().to_vec();
    let mut probe = b.gan.dq.clone();
    let fd = numeric(&mut zv, &mut |v| scalar(&mut probe, &Tensor::from_vec(&[5, 8], v.to_vec()).unwrap()));
    report.push(("dq.input".to_string(), rel_err(dz.data(), &fd)));

    let mut names = Vec::new();
    b.gan.dq.visit_params(&mut |n, p| names.push((n.to_string(), p.grad.data().to_vec())));
    for (name, analytic) in names {
        let mut probe = b.gan.dq.clone();
        let mut values = Vec::new();
        probe.visit_params(&mut |n, p| {
            if n == name {
                values = p.value.data().to_vec();
            }
        });
        let fd = numeric(&mut values, &mut |v| {
            probe.visit_params_mut(&mut |n, p| {
                if n == name {
                    p.value.data_mut().copy_from_slice(v);
                }
            });
            scalar(&mut probe, &z)
        });
        report.push((name, rel_err(&analytic, &fd)));
    }
    report
}

/// Convolutions off the tiny preset's geometry: wide outputs, stride 2, odd padding.
pub fn convolutions() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut report = Vec::new();
    for (cin, cout, k, stride, pad) in [(3, 6, 3, 1, 1), (2, 5, 4, 2, 1), (2, 2, 3, 1, 2), (3, 3, 2, 2, 0)] {
        let conv = Conv2d::<f64>::new(cin, cout, k, stride, pad, &mut rng);
        let mut net = Sequential::new(vec![Layer::Conv2d(conv)]);
        let x = random(&[2, cin, 5, 6], -1.0, 1.0, &mut rng);
        let label = format!("conv{cin}x{cout}k{k}s{stride}p{pad}");
        report.extend(check_sequential(&label, &mut net, &x, &mut rng));
    }
    report
}

pub fn losses() -> Report {
    let mut report = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    let x = random(&[2, 1, 3, 3], -1.0, 1.0, &mut rng);
    let xh = random(&[2, 1, 3, 3], -1.0, 1.0, &mut rng);
    let (_, g) = reconstruction_loss_grad(&x, &xh).unwrap();
    let mut v = xh.data().to_vec();
    let fd = numeric(&mut v, &mut |v| {
        reconstruction_loss(&x, &Tensor::from_vec(&[2, 1, 3, 3], v.to_vec()).unwrap()).unwrap()
    });
    report.push(("reconstruction_loss".to_string(), rel_err(g.data(), &fd)));

    let real: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let fake: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let rt: Vec<f64> = (0..5).map(|_| rng.gen_range(0.8..1.0)).collect();
    let ft: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..0.2)).collect();
    let (_, gr, gf) = d_loss_logits(&real, &fake, &rt, &ft);
    let mut both: Vec<f64> = real.iter().chain(&fake).copied().collect();
    let fd = numeric(&mut both, &mut |v| d_loss_logits(&v[..5], &v[5..], &rt, &ft).0);
    let analytic: Vec<f64> = gr.into_iter().chain(gf).collect();
    report.push(("d_loss".to_string(), rel_err(&analytic, &fd)));

    let (_, gg) = g_adv_loss_logits(&fake);
    let mut fv = fake.clone();
    let fd = numeric(&mut fv, &mut |v| g_adv_loss_logits(v).0);
    report.push(("g_adv_loss".to_string(), rel_err(&gg, &fd)));

    let spec = CodeSpec {
        noise_dim: 2,
        categoricals: vec![3, 4],
        continuous: vec![(-1.0, 1.0), (-1.0, 1.0)],
        traversal_range: (-1.0, 1.0),
    };
    let (codes, _): (Vec<LatentCode>, Tensor<f64>) = sample_batch(&spec, 5, &mut rng);
    let w = LossWeights {
        lambda_cont: 0.7,
        lambda_disc: 1.3,
    };
    let post = CodePosterior {
        cat_logits: vec![random(&[5, 3], -2.0, 2.0, &mut rng), random(&[5, 4], -2.0, 2.0, &mut rng)],
        cont_means: random(&[5, 2], -1.0, 1.0, &mut rng),
    };
    let (_, g) = info_loss_grad(&post, &codes, &w).unwrap();
    let flat = |p: &CodePosterior<f64>| -> Vec<f64> {
        p.cat_logits
            .iter()
            .flat_map(|t| t.data().to_vec())
            .chain(p.cont_means.data().to_vec())
            .collect()
    };
    let mut v = flat(&post);
    let fd = numeric(&mut v, &mut |v| {
        let p = CodePosterior {
            cat_logits: vec![
                Tensor::from_vec(&[5, 3], v[..15].to_vec()).unwrap(),
                Tensor::from_vec(&[5, 4], v[15..35].to_vec()).unwrap(),
            ],
            cont_means: Tensor::from_vec(&[5, 2], v[35..].to_vec()).unwrap(),
        };
        info_loss(&p, &codes, &w).unwrap().total()
    });
    let analytic = flat(&CodePosterior {
        cat_logits: g.cat_logits,
        cont_means: g.cont_means,
    });
    report.push(("info_loss".to_string(), rel_err(&analytic, &fd)));
    report
}

/// Every check above.
pub fn full_suite() -> Report {
    let mut r = Vec::new();
    for part in [encoder, decoder, generator, discriminator, convolutions, losses] {
        r.extend(part());
    }
    r
}
