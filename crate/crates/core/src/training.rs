//! Joint training: per batch, an autoencoder update, a discriminator update on
//! encoder latents versus generated latents, then a generator + code-posterior
//! update.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::Adam;
use crate::checkpoint;
use crate::codes::sample_batch;
use crate::config::ExperimentConfig;
use crate::data::{epoch_batches, preprocess, read_idx, IdxKind, ImageBatch};
use crate::error::{Error, Result};
use crate::losses::{
    bce_logit, d_loss_logits, g_adv_loss_logits, info_loss_grad, reconstruction_loss_grad, InfoLoss, LossWeights,
    NoisyLabelPolicy,
};
use crate::networks::{LatentGan, NetworkBundle};
use crate::nn::{sigmoid, Mode};
use crate::tensor::{Real, Tensor};

pub const METRICS_HEADER: &str = "step,epoch,loss_ae,loss_d,loss_g_adv,loss_info_cat,loss_info_cont";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "latest.ckpt";

/// Scalar losses from one training step. Info terms are already weighted by λ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub loss_ae: f64,
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub loss_info_cat: f64,
    pub loss_info_cont: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.epoch, self.loss_ae, self.loss_d, self.loss_g_adv, self.loss_info_cat, self.loss_info_cont
        )
    }

    fn check(&self) -> Result<()> {
        for (name, v) in [
            ("loss_ae", self.loss_ae),
            ("loss_d", self.loss_d),
            ("loss_g_adv", self.loss_g_adv),
            ("loss_info_cat", self.loss_info_cat),
            ("loss_info_cont", self.loss_info_cont),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    loss: name,
                    value: v,
                    step: self.step,
                });
            }
        }
        Ok(())
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub bundle: NetworkBundle<f32>,
    /// Encoder and decoder.
    pub opt_ae: Adam<f32>,
    /// Discriminator trunk and real/fake head.
    pub opt_d: Adam<f32>,
    /// Generator, trunk and code-posterior heads.
    pub opt_gq: Adam<f32>,
    pub step: u64,
    pub epoch: u64,
    pub rng: ChaCha8Rng,
    pub config: ExperimentConfig,
}

impl TrainState {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let bundle = NetworkBundle::build(&config.arch(), config.seed)?;
        let adam = config.optim.adam();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            bundle,
            opt_ae: Adam::new(adam),
            opt_d: Adam::new(adam),
            opt_gq: Adam::new(adam),
            step: 0,
            epoch: 0,
            rng,
            config: config.clone(),
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        for opt in [&mut self.opt_ae, &mut self.opt_d, &mut self.opt_gq] {
            opt.settings.learning_rate = lr;
        }
    }
}

/// Minimises the reconstruction loss over encoder and decoder.
pub fn autoencoder_phase<T: Real>(bundle: &mut NetworkBundle<T>, opt: &mut Adam<T>, batch: &Tensor<T>) -> Result<f64> {
    bundle.enc.zero_grad();
    bundle.dec.zero_grad();
    let z = bundle.enc.forward(batch, Mode::Train);
    let x_hat = bundle.dec.forward(&z, Mode::Train);
    let (loss, g) = reconstruction_loss_grad(batch, &x_hat)?;
    let gz = bundle.dec.backward(&g);
    bundle.enc.backward(&gz);
    bundle.enc.visit_params_mut("enc", &mut |n, p| opt.update(n, p));
    bundle.dec.visit_params_mut("dec", &mut |n, p| opt.update(n, p));
    Ok(loss)
}

/// One discriminator update: `real` latents are constant data, generated
/// latents come from fresh codes. Only the trunk and the real/fake head move.
pub fn discriminator_phase<T: Real>(
    gan: &mut LatentGan<T>,
    opt: &mut Adam<T>,
    real: &Tensor<T>,
    policy: &NoisyLabelPolicy,
    rng: &mut impl Rng,
) -> Result<f64> {
    let n = real.rows();
    let (_, inputs) = sample_batch::<T>(&gan.code_spec, n, rng);
    let fake = gan.gen.infer(&inputs);
    let both = Tensor::concat_rows(&[real, &fake])?;
    gan.dq.zero_grad();
    let out = gan.dq.forward(&both);
    let logits = out.d_logits.data();
    let (rt, ft) = policy.targets(n, n, rng);
    let (loss, mut gr, gf) = d_loss_logits(&logits[..n], &logits[n..], &rt, &ft);
    gr.extend(gf);
    let g = Tensor::from_vec(&[2 * n, 1], gr)?;
    gan.dq.backward(Some(&g), None);
    gan.dq.visit_trunk_mut(&mut |name, p| opt.update(name, p));
    gan.dq.visit_d_head_mut(&mut |name, p| opt.update(name, p));
    Ok(loss)
}

/// One generator + posterior update on fresh codes. The generator follows
/// `g_adv + info`; trunk and code heads follow `info` only.
pub fn generator_phase<T: Real>(
    gan: &mut LatentGan<T>,
    opt: &mut Adam<T>,
    batch_size: usize,
    weights: &LossWeights,
    rng: &mut impl Rng,
) -> Result<(f64, InfoLoss)> {
    let (codes, inputs) = sample_batch::<T>(&gan.code_spec, batch_size, rng);
    gan.gen.zero_grad();
    let fake = gan.gen.forward(&inputs, Mode::Train);
    let out = gan.dq.forward(&fake);
    let (g_adv, gl) = g_adv_loss_logits(out.d_logits.data());
    let (info, ig) = info_loss_grad(&out.posterior, &codes, weights)?;
    let gl = Tensor::from_vec(&[batch_size, 1], gl)?;
    let mut dx = gan.dq.backward(Some(&gl), None);
    // discard what the adversarial term left on the discriminator side
    gan.dq.zero_grad();
    let dx_info = gan.dq.backward(None, Some((&ig.cat_logits, &ig.cont_means)));
    dx.add_assign(&dx_info);
    gan.gen.backward(&dx);
    gan.gen.visit_params_mut("gen", &mut |name, p| opt.update(name, p));
    gan.dq.visit_trunk_mut(&mut |name, p| opt.update(name, p));
    gan.dq.visit_q_heads_mut(&mut |name, p| opt.update(name, p));
    Ok((g_adv, info))
}

/// Optional encoder update that pushes `D(Enc(X))` toward the generated label.
fn encoder_adversarial_phase(state: &mut TrainState, batch: &Tensor<f32>) -> f64 {
    let b = &mut state.bundle;
    b.enc.zero_grad();
    let z = b.enc.forward(batch, Mode::Train);
    let out = b.gan.dq.forward(&z);
    let n = z.rows() as f64;
    let logits = out.d_logits.data();
    let loss = logits.iter().map(|&l| bce_logit(l as f64, 0.0)).sum::<f64>() / n;
    let g: Vec<f32> = logits.iter().map(|&l| (sigmoid(l as f64) / n) as f32).collect();
    let g = Tensor::from_vec(&[z.rows(), 1], g).expect("one logit per row");
    let gz = b.gan.dq.backward(Some(&g), None);
    b.gan.dq.zero_grad();
    b.enc.backward(&gz);
    let opt = &mut state.opt_ae;
    b.enc.visit_params_mut("enc", &mut |n, p| opt.update(n, p));
    loss
}

/// Autoencoder, discriminator, then generator + posterior, on one batch.
pub fn train_step(state: &mut TrainState, batch: &ImageBatch<f32>) -> Result<StepMetrics> {
    let (c, h, w) = state.bundle.preset.image_shape;
    if batch.image_shape() != (c, h, w) {
        return Err(Error::Argument(format!(
            "batch images are {:?}, preset expects {:?}",
            batch.image_shape(),
            (c, h, w)
        )));
    }
    let x = batch.tensor();
    let cfg = &state.config;
    let (weights, policy, adversarial_enc) = (cfg.loss, cfg.noisy_labels, cfg.training.encoder_adversarial);

    let loss_ae = autoencoder_phase(&mut state.bundle, &mut state.opt_ae, x)?;
    let real = state.bundle.enc.infer(x);
    let loss_d = discriminator_phase(&mut state.bundle.gan, &mut state.opt_d, &real, &policy, &mut state.rng)?;
    if adversarial_enc {
        encoder_adversarial_phase(state, x);
    }
    let (loss_g_adv, info) =
        generator_phase(&mut state.bundle.gan, &mut state.opt_gq, x.rows(), &weights, &mut state.rng)?;

    let metrics = StepMetrics {
        step: state.step,
        epoch: state.epoch,
        loss_ae,
        loss_d,
        loss_g_adv,
        loss_info_cat: info.cat,
        loss_info_cont: info.cont,
    };
    metrics.check()?;
    state.step += 1;
    Ok(metrics)
}

/// Final state and the metrics of the steps this call executed.
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
}

/// Loads the configured training images, preprocessed to the preset's shape.
pub fn load_training_images(config: &ExperimentConfig) -> Result<ImageBatch<f32>> {
    let preset = config.arch();
    let raw = read_idx(&config.data.train_images, IdxKind::Images)?;
    if raw.channels != preset.image_shape.0 {
        return Err(Error::Argument(format!(
            "{} has {} channels, preset {} expects {}",
            raw.source,
            raw.channels,
            preset.name.as_str(),
            preset.image_shape.0
        )));
    }
    preprocess(&raw, preset.image_shape.1)
}

/// Reads `config.data`, then trains (see [`train_on`]).
pub fn train(config: &ExperimentConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let images = load_training_images(config)?;
    train_on(config, &images)
}

fn rewrite_metrics_up_to(path: &Path, step: u64) -> Result<()> {
    let mut keep = vec![METRICS_HEADER.to_string()];
    if path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io(path, e))?;
            let s: Option<u64> = line.split(',').next().and_then(|v| v.parse().ok());
            if matches!(s, Some(s) if s < step) {
                keep.push(line);
            }
        }
    }
    let mut text = keep.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains for `config.optim.epochs` epochs of ⌊N/batch⌋ steps. Resumes from
/// `output_dir/latest.ckpt` when present; writes a checkpoint every
/// `checkpoint_interval` steps and at the end; appends one metrics row per step.
pub fn train_on(config: &ExperimentConfig, images: &ImageBatch<f32>) -> Result<TrainOutcome> {
    config.validate()?;
    let out_dir = config.output_dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);

    let mut state = if ckpt_path.exists() {
        let mut s = checkpoint::load(&ckpt_path)?;
        if !s.config.resumable_from(config) {
            return Err(Error::Config(format!(
                "{} was written by an incompatible configuration",
                ckpt_path.display()
            )));
        }
        log::info!("resuming from {} at step {}", ckpt_path.display(), s.step);
        s.config = config.clone();
        s
    } else {
        TrainState::new(config)?
    };
    rewrite_metrics_up_to(&metrics_path, state.step)?;
    let file = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut csv = BufWriter::new(file);

    let n = images.len();
    let bs = config.optim.batch_size;
    let per_epoch = (n / bs) as u64;
    if per_epoch == 0 && config.optim.epochs > 0 {
        return Err(Error::Argument(format!("{n} images cannot fill one batch of {bs}")));
    }
    let mut metrics = Vec::new();
    let started = Instant::now();
    let first_step = state.step;
    while state.epoch < config.optim.epochs {
        let epoch = state.epoch;
        let batches = epoch_batches(n, bs, config.seed, epoch);
        let done = (state.step - epoch * per_epoch) as usize;
        for idx in &batches[done.min(batches.len())..] {
            let batch = images.select(idx);
            let m = train_step(&mut state, &batch)?;
            writeln!(csv, "{}", m.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
            if state.step % 100 == 0 {
                let rate = (state.step - first_step) as f64 / started.elapsed().as_secs_f64();
                log::info!(
                    "epoch {epoch} step {} ae {:.4} d {:.4} g {:.4} info {:.4}/{:.4} ({rate:.2} steps/s)",
                    state.step,
                    m.loss_ae,
                    m.loss_d,
                    m.loss_g_adv,
                    m.loss_info_cat,
                    m.loss_info_cont
                );
            }
            metrics.push(m);
            if state.step % config.checkpoint_interval == 0 {
                csv.flush().map_err(|e| Error::io(&metrics_path, e))?;
                checkpoint::save(&state, &ckpt_path)?;
            }
        }
        state.epoch += 1;
    }
    csv.flush().map_err(|e| Error::io(&metrics_path, e))?;
    checkpoint::save(&state, &ckpt_path)?;
    Ok(TrainOutcome { state, metrics })
}

/// Path of the checkpoint a run writes under `dir`.
pub fn checkpoint_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join(CHECKPOINT_FILE)
}
