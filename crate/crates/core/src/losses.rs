//! Reconstruction, adversarial and mutual-information losses.
//!
//! Probability-space functions mirror the definitions and are what the
//! exactness tests pin down. The training loop uses the logit-space variants,
//! which return gradients and stay finite for saturated discriminators.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codes::LatentCode;
use crate::error::{Error, Result};
use crate::networks::CodePosterior;
use crate::nn::sigmoid;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cont: f64,
    pub lambda_disc: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_cont", self.lambda_cont), ("lambda_disc", self.lambda_disc)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Soft discriminator targets: real ~ U(real_interval), fake ~ U(fake_interval).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisyLabelPolicy {
    pub enabled: bool,
    pub real_interval: (f64, f64),
    pub fake_interval: (f64, f64),
}

impl Default for NoisyLabelPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            real_interval: (0.8, 1.0),
            fake_interval: (0.0, 0.2),
        }
    }
}

impl NoisyLabelPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (rl, rh) = self.real_interval;
        let (fl, fh) = self.fake_interval;
        if !(0.0 < rl && rl <= rh && rh <= 1.0) {
            return Err(Error::Argument(format!("real interval ({rl}, {rh}) must lie in (0, 1]")));
        }
        if !(0.0 <= fl && fl <= fh && fh < 1.0) {
            return Err(Error::Argument(format!("fake interval ({fl}, {fh}) must lie in [0, 1)")));
        }
        if rl <= fh {
            return Err(Error::Argument("real targets must stay above fake targets".into()));
        }
        Ok(())
    }

    /// Per-sample targets for `n_real` real and `n_fake` fake samples.
    pub fn targets(&self, n_real: usize, n_fake: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
        if !self.enabled {
            return (vec![1.0; n_real], vec![0.0; n_fake]);
        }
        let draw = |(lo, hi): (f64, f64), rng: &mut dyn rand::RngCore| {
            if lo == hi {
                lo
            } else {
                rng.gen_range(lo..=hi)
            }
        };
        let real = (0..n_real).map(|_| draw(self.real_interval, rng)).collect();
        let fake = (0..n_fake).map(|_| draw(self.fake_interval, rng)).collect();
        (real, fake)
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Argument(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean over the batch of per-sample mean squared error.
pub fn reconstruction_loss<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    same_shape(x, x_hat)?;
    if x.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| {
            let d = (b - a).as_f64();
            d * d
        })
        .sum();
    Ok(sum / x.len() as f64)
}

/// Loss and its gradient with respect to `x_hat`.
pub fn reconstruction_loss_grad<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let loss = reconstruction_loss(x, x_hat)?;
    let scale = T::lit(2.0 / x.len().max(1) as f64);
    let mut g = x_hat.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        *gv = (*gv - xv) * scale;
    }
    Ok((loss, g))
}

/// −t·ln p − (1−t)·ln(1−p).
pub fn bce(p: f64, t: f64) -> f64 {
    let a = if t == 0.0 { 0.0 } else { -t * p.ln() };
    let b = if t == 1.0 { 0.0 } else { -(1.0 - t) * (1.0 - p).ln() };
    a + b
}

/// BCE of `sigmoid(l)` against `t`, evaluated stably.
pub fn bce_logit(l: f64, t: f64) -> f64 {
    l.max(0.0) - l * t + (-l.abs()).exp().ln_1p()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Discriminator loss with explicit per-sample targets; the average of the
/// real-half and fake-half mean BCE.
pub fn d_loss_with_targets(real_probs: &[f64], fake_probs: &[f64], real_t: &[f64], fake_t: &[f64]) -> f64 {
    let r = mean(real_probs.iter().zip(real_t).map(|(&p, &t)| bce(p, t)));
    let f = mean(fake_probs.iter().zip(fake_t).map(|(&p, &t)| bce(p, t)));
    0.5 * (r + f)
}

/// Discriminator loss: ascent on `E[log D(x)] + E[log(1 − D(G(lc)))]` written as
/// BCE descent. Targets are drawn from `policy` with `rng` (exact 1/0 when disabled).
pub fn d_loss(real_probs: &[f64], fake_probs: &[f64], policy: &NoisyLabelPolicy, rng: &mut impl Rng) -> f64 {
    let (rt, ft) = policy.targets(real_probs.len(), fake_probs.len(), rng);
    d_loss_with_targets(real_probs, fake_probs, &rt, &ft)
}

/// Logit-space discriminator loss; returns the gradient for each logit.
pub fn d_loss_logits<T: Real>(
    real_logits: &[T],
    fake_logits: &[T],
    real_t: &[f64],
    fake_t: &[f64],
) -> (f64, Vec<T>, Vec<T>) {
    let half = |logits: &[T], targets: &[f64]| {
        let n = logits.len().max(1) as f64;
        let loss = mean(logits.iter().zip(targets).map(|(&l, &t)| bce_logit(l.as_f64(), t)));
        let grad = logits
            .iter()
            .zip(targets)
            .map(|(&l, &t)| T::lit(0.5 * (sigmoid(l.as_f64()) - t) / n))
            .collect::<Vec<T>>();
        (loss, grad)
    };
    let (lr, gr) = half(real_logits, real_t);
    let (lf, gf) = half(fake_logits, fake_t);
    (0.5 * (lr + lf), gr, gf)
}

/// Non-saturating generator loss, mean of −ln D(G(lc)).
pub fn g_adv_loss(fake_probs: &[f64]) -> f64 {
    mean(fake_probs.iter().map(|&p| -p.ln()))
}

pub fn g_adv_loss_logits<T: Real>(fake_logits: &[T]) -> (f64, Vec<T>) {
    let n = fake_logits.len().max(1) as f64;
    let loss = mean(fake_logits.iter().map(|&l| bce_logit(l.as_f64(), 1.0)));
    let grad = fake_logits
        .iter()
        .map(|&l| T::lit((sigmoid(l.as_f64()) - 1.0) / n))
        .collect();
    (loss, grad)
}

/// Weighted mutual-information terms; `total = cat + cont`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InfoLoss {
    /// `λ_disc · Σ_i CE_i`.
    pub cat: f64,
    /// `λ_cont · MSE`.
    pub cont: f64,
}

impl InfoLoss {
    pub fn total(&self) -> f64 {
        self.cat + self.cont
    }
}

/// Gradients of the info loss with respect to each posterior output.
#[derive(Clone, Debug)]
pub struct InfoGrad<T> {
    pub cat_logits: Vec<Tensor<T>>,
    pub cont_means: Tensor<T>,
}

fn check_layout<T: Real>(posterior: &CodePosterior<T>, truth: &[LatentCode]) -> Result<()> {
    let n = truth.len();
    if n == 0 {
        return Err(Error::Argument("info loss on an empty batch".into()));
    }
    let first = &truth[0];
    if posterior.cat_logits.len() != first.cat_onehots.len() {
        return Err(Error::Argument(format!(
            "posterior has {} categorical heads, codes have {}",
            posterior.cat_logits.len(),
            first.cat_onehots.len()
        )));
    }
    for (i, (l, h)) in posterior.cat_logits.iter().zip(&first.cat_onehots).enumerate() {
        if l.shape() != [n, h.len()] {
            return Err(Error::Argument(format!(
                "categorical head {i} has shape {:?}, expected [{n}, {}]",
                l.shape(),
                h.len()
            )));
        }
    }
    if posterior.cont_means.shape() != [n, first.cont_values.len()] {
        return Err(Error::Argument(format!(
            "continuous head has shape {:?}, expected [{n}, {}]",
            posterior.cont_means.shape(),
            first.cont_values.len()
        )));
    }
    Ok(())
}

/// `λ_disc · Σ_i CE(cat_logits_i, class_i) + λ_cont · MSE(cont_means, cont_values)`,
/// each averaged over the batch.
pub fn info_loss<T: Real>(posterior: &CodePosterior<T>, truth: &[LatentCode], weights: &LossWeights) -> Result<InfoLoss> {
    Ok(info_loss_grad(posterior, truth, weights)?.0)
}

pub fn info_loss_grad<T: Real>(
    posterior: &CodePosterior<T>,
    truth: &[LatentCode],
    weights: &LossWeights,
) -> Result<(InfoLoss, InfoGrad<T>)> {
    check_layout(posterior, truth)?;
    let n = truth.len();
    let classes: Vec<Vec<usize>> = truth.iter().map(LatentCode::classes).collect();
    let mut ce_sum = 0.0;
    let mut cat_grads = Vec::with_capacity(posterior.cat_logits.len());
    for (i, logits) in posterior.cat_logits.iter().enumerate() {
        let k = logits.row_len();
        let mut g = Tensor::zeros(logits.shape());
        for r in 0..n {
            let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            let c = classes[r][i];
            ce_sum += lse - row[c];
            let gr = g.row_mut(r);
            for j in 0..k {
                let p = (row[j] - lse).exp();
                let onehot = if j == c { 1.0 } else { 0.0 };
                gr[j] = T::lit(weights.lambda_disc * (p - onehot) / n as f64);
            }
        }
        cat_grads.push(g);
    }
    let means = &posterior.cont_means;
    let m = means.len();
    let mut cont_sq = 0.0;
    let mut cont_grad = Tensor::zeros(means.shape());
    if m > 0 {
        for (r, code) in truth.iter().enumerate() {
            for (j, &c) in code.cont_values.iter().enumerate() {
                let d = means.row(r)[j].as_f64() - c;
                cont_sq += d * d;
                cont_grad.row_mut(r)[j] = T::lit(weights.lambda_cont * 2.0 * d / m as f64);
            }
        }
    }
    let loss = InfoLoss {
        cat: weights.lambda_disc * ce_sum / n as f64,
        cont: if m > 0 { weights.lambda_cont * cont_sq / m as f64 } else { 0.0 },
    };
    Ok((
        loss,
        InfoGrad {
            cat_logits: cat_grads,
            cont_means: cont_grad,
        },
    ))
}
