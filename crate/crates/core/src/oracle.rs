//! Latent GAN trained alone against a Gaussian mixture, where the target
//! distribution and its modes are known exactly.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{Adam, AdamSettings};
use crate::codes::{input_batch, one_hot, assemble, CodeSpec, LatentCode};
use crate::data::{sample_mixture_with, MixtureSpec};
use crate::error::{Error, Result};
use crate::evaluation::{mmd2, write_png, Raster};
use crate::losses::{LossWeights, NoisyLabelPolicy};
use crate::networks::{LatentGan, LayerRow};
use crate::nn::Activation;
use crate::tensor::Tensor;
use crate::training::{discriminator_phase, generator_phase};

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSettings {
    pub code_k: usize,
    pub noise_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub adam: AdamSettings,
    pub lambda_disc: f64,
    pub noisy_labels: NoisyLabelPolicy,
    /// Generated and real samples used for the final metrics.
    pub eval_samples: usize,
    /// Steps between recorded loss rows.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            code_k: 8,
            noise_dim: 4,
            steps: 5000,
            batch_size: 64,
            hidden: vec![128, 128],
            adam: AdamSettings {
                learning_rate: 1e-3,
                beta1: 0.5,
                beta2: 0.9,
                eps: 1e-8,
            },
            lambda_disc: 1.0,
            noisy_labels: NoisyLabelPolicy::default(),
            eval_samples: 10_000,
            log_every: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub loss_info: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub mmd2: f64,
    pub mmd2_untrained: f64,
    pub bandwidth: f64,
    /// Per class: fraction of its samples nearest to the class's modal mean.
    pub purity_per_class: Vec<f64>,
    pub purity: f64,
    /// Modal mixture component per class.
    pub modal_component: Vec<usize>,
    /// Mean distance from each generated sample to its nearest component mean.
    pub mean_nearest_distance: f64,
    /// Generated samples per class in the evaluation draw.
    pub class_counts: Vec<usize>,
    pub curves: Vec<LossRow>,
    /// Evaluation samples with their classes, for plotting.
    pub samples: Tensor<f64>,
    pub sample_classes: Vec<usize>,
}

impl OracleReport {
    /// Standard deviation of one class's purity under codes that carry no
    /// information, `sqrt(p(1−p)/n)` with `p = 1/K` and `n` the mean class size.
    pub fn null_sigma(&self) -> f64 {
        let k = self.class_counts.len() as f64;
        let n = self.class_counts.iter().sum::<usize>() as f64 / k;
        let p = 1.0 / k;
        (p * (1.0 - p) / n).sqrt()
    }

    pub fn metric_rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("mmd2".to_string(), self.mmd2),
            ("mmd2_untrained".to_string(), self.mmd2_untrained),
            ("bandwidth".to_string(), self.bandwidth),
            ("purity".to_string(), self.purity),
            ("purity_null_sigma".to_string(), self.null_sigma()),
            ("mean_nearest_distance".to_string(), self.mean_nearest_distance),
        ];
        for (i, p) in self.purity_per_class.iter().enumerate() {
            rows.push((format!("purity_class{i}"), *p));
        }
        rows
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::from("metric,value\n");
        for (k, v) in self.metric_rows() {
            text.push_str(&format!("{k},{v}\n"));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn write_curves(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::from("step,loss_d,loss_g_adv,loss_info\n");
        for r in &self.curves {
            text.push_str(&format!("{},{},{},{}\n", r.step, r.loss_d, r.loss_g_adv, r.loss_info));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// 2-D scatter of the generated samples coloured by class, over a
    /// `size × size` canvas spanning `[-extent, extent]²`.
    pub fn scatter(&self, size: usize, extent: f64) -> Result<Raster> {
        if self.samples.row_len() != 2 {
            return Err(Error::Unsupported("scatter plots need 2-D samples".into()));
        }
        const PALETTE: [[u8; 3]; 10] = [
            [230, 25, 75],
            [60, 180, 75],
            [0, 130, 200],
            [245, 130, 48],
            [145, 30, 180],
            [70, 240, 240],
            [240, 50, 230],
            [210, 245, 60],
            [128, 128, 0],
            [0, 0, 128],
        ];
        let mut pixels = vec![255u8; size * size * 3];
        for (i, &c) in self.sample_classes.iter().enumerate() {
            let p = self.samples.row(i);
            let to_px = |v: f64| ((v + extent) / (2.0 * extent) * size as f64).floor();
            let (x, y) = (to_px(p[0]), to_px(-p[1]));
            if x < 0.0 || y < 0.0 || x >= size as f64 || y >= size as f64 {
                continue;
            }
            let at = (y as usize * size + x as usize) * 3;
            pixels[at..at + 3].copy_from_slice(&PALETTE[c % PALETTE.len()]);
        }
        Ok(Raster {
            width: size,
            height: size,
            channels: 3,
            pixels,
        })
    }

    pub fn write_scatter(&self, path: impl AsRef<Path>) -> Result<()> {
        write_png(&self.scatter(256, 3.0)?, path)
    }
}

fn code_spec(settings: &OracleSettings) -> CodeSpec {
    CodeSpec {
        noise_dim: settings.noise_dim,
        categoricals: vec![settings.code_k],
        continuous: Vec::new(),
        traversal_range: (-1.0, 1.0),
    }
}

fn build(settings: &OracleSettings, dim: usize, rng: &mut ChaCha8Rng) -> Result<LatentGan<f64>> {
    let relu = |w: &usize| LayerRow::fc(*w, Some(Activation::Relu));
    let mut gen: Vec<LayerRow> = settings.hidden.iter().map(relu).collect();
    gen.push(LayerRow::fc(dim, None));
    let trunk: Vec<LayerRow> = settings.hidden.iter().map(relu).collect();
    LatentGan::new(&code_spec(settings), dim, &gen, &trunk, rng)
}

/// Evaluation draw: classes cycle so every class gets the same count, noise is
/// fresh per sample.
fn evaluation_inputs(spec: &CodeSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<f64>, Vec<usize>)> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let k = spec.categoricals[0];
    let mut inputs = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let code = LatentCode {
            noise: (0..spec.noise_dim).map(|_| rng.sample(StandardNormal)).collect(),
            cat_onehots: vec![one_hot(k, i % k)],
            cont_values: Vec::new(),
        };
        inputs.push(assemble(&code, spec)?);
        classes.push(i % k);
    }
    Ok((input_batch(&inputs)?, classes))
}

fn purity(mixture: &MixtureSpec, samples: &Tensor<f64>, classes: &[usize], k: usize) -> (Vec<f64>, Vec<usize>, f64) {
    let m = mixture.component_means.len();
    let mut counts = vec![vec![0usize; m]; k];
    let mut dist_sum = 0.0;
    for (i, &c) in classes.iter().enumerate() {
        let p = samples.row(i);
        let near = mixture.nearest(p);
        counts[c][near] += 1;
        dist_sum += p
            .iter()
            .zip(&mixture.component_means[near])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    let mut per_class = Vec::with_capacity(k);
    let mut modal = Vec::with_capacity(k);
    for row in &counts {
        let total: usize = row.iter().sum();
        let best = crate::evaluation::argmax(row);
        modal.push(best);
        per_class.push(if total == 0 { 0.0 } else { row[best] as f64 / total as f64 });
    }
    (per_class, modal, dist_sum / classes.len().max(1) as f64)
}

/// Trains a fully connected generator and discriminator/posterior pair on
/// mixture samples with the same update rules as full training, then scores
/// `eval_samples` generated points against as many fresh mixture draws.
pub fn run_oracle(mixture: &MixtureSpec, settings: &OracleSettings) -> Result<OracleReport> {
    mixture.validate()?;
    let k = settings.code_k;
    if k < 2 || k > mixture.component_means.len() {
        return Err(Error::Argument(format!(
            "code K must lie in [2, {}] (mixture components), got {k}",
            mixture.component_means.len()
        )));
    }
    if settings.batch_size == 0 || settings.eval_samples < k || settings.log_every == 0 {
        return Err(Error::Argument(
            "batch_size, log_every must be positive and eval_samples at least K".into(),
        ));
    }
    let dim = mixture.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut gan = build(settings, dim, &mut rng)?;
    let weights = LossWeights {
        lambda_cont: 0.0,
        lambda_disc: settings.lambda_disc,
    };
    let mut opt_d = Adam::new(settings.adam);
    let mut opt_gq = Adam::new(settings.adam);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x5eed_0f_e7a1);
    let (eval_in, eval_classes) = evaluation_inputs(&gan.code_spec, settings.eval_samples, &mut eval_rng)?;
    let real_eval = sample_mixture_with(mixture, settings.eval_samples, &mut eval_rng)?;
    let untrained = mmd2(&gan.gen.infer(&eval_in), &real_eval, None)?;

    let mut curves = Vec::new();
    for step in 0..settings.steps {
        let real = sample_mixture_with(mixture, settings.batch_size, &mut rng)?;
        let loss_d = discriminator_phase(&mut gan, &mut opt_d, &real, &settings.noisy_labels, &mut rng)?;
        let (g_adv, info) = generator_phase(&mut gan, &mut opt_gq, settings.batch_size, &weights, &mut rng)?;
        for (name, v) in [("loss_d", loss_d), ("loss_g_adv", g_adv), ("loss_info", info.total())] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    loss: name,
                    value: v,
                    step: step as u64,
                });
            }
        }
        if step % settings.log_every == 0 || step + 1 == settings.steps {
            curves.push(LossRow {
                step,
                loss_d,
                loss_g_adv: g_adv,
                loss_info: info.total(),
            });
        }
    }

    let generated = gan.gen.infer(&eval_in);
    let m = mmd2(&generated, &real_eval, None)?;
    let (purity_per_class, modal_component, mean_nearest_distance) = purity(mixture, &generated, &eval_classes, k);
    let mut class_counts = vec![0; k];
    for &c in &eval_classes {
        class_counts[c] += 1;
    }
    Ok(OracleReport {
        mmd2: m.value,
        mmd2_untrained: untrained.value,
        bandwidth: m.kernel_bandwidth,
        purity: purity_per_class.iter().sum::<f64>() / k as f64,
        purity_per_class,
        modal_component,
        mean_nearest_distance,
        class_counts,
        curves,
        samples: generated,
        sample_classes: eval_classes,
    })
}
