use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use latentgan::checkpoint;
use latentgan::config::ExperimentConfig;
use latentgan::data::{load_labelled, MixtureSpec};
use latentgan::evaluation::{category_round_trip, emit_samples, emit_traversal, evaluate_classification, write_report};
use latentgan::oracle::{run_oracle, OracleSettings};
use latentgan::training::{load_training_images, train_on, TrainState};
use latentgan::{CodeSelector, DataPaths, Error};

use crate::{Command, EXIT_CORRUPT, EXIT_TRAINING, EXIT_USAGE};

pub const OUT_ENV: &str = "LATENTGAN_OUT";

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

fn classify(error: anyhow::Error) -> Failure {
    let code = match error.downcast_ref::<Error>() {
        Some(Error::Corrupt { .. }) => EXIT_CORRUPT,
        Some(Error::NonFinite { .. }) => EXIT_TRAINING,
        _ => EXIT_USAGE,
    };
    Failure { code, error }
}

fn training_failure(error: Error) -> Failure {
    let code = match error {
        Error::Corrupt { .. } => EXIT_CORRUPT,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_TRAINING,
    };
    Failure {
        code,
        error: error.into(),
    }
}

fn env_out() -> Option<PathBuf> {
    std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Where a command writes: `LATENTGAN_OUT`, else `fallback`.
fn out_dir(fallback: &Path) -> anyhow::Result<PathBuf> {
    let dir = env_out().unwrap_or_else(|| fallback.to_path_buf());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Explicit `--out` wins; otherwise `name` inside the output directory.
fn output_file(explicit: Option<PathBuf>, fallback_dir: &Path, name: &str) -> anyhow::Result<PathBuf> {
    match explicit {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            Ok(p)
        }
        None => Ok(out_dir(fallback_dir)?.join(name)),
    }
}

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { config, epochs } => train(&config, epochs),
        other => run_simple(other).map_err(classify),
    }
}

fn train(config_path: &Path, epochs: Option<u64>) -> Result<(), Failure> {
    let mut config = ExperimentConfig::load(config_path).map_err(|e| classify(e.into()))?;
    if let Some(e) = epochs {
        config.optim.epochs = e;
    }
    if let Some(dir) = env_out() {
        config.output_dir = dir;
    }
    let images = load_training_images(&config).map_err(|e| classify(e.into()))?;
    log::info!(
        "training preset {} on {} images for {} epochs into {}",
        config.preset.as_str(),
        images.len(),
        config.optim.epochs,
        config.output_dir.display()
    );
    let outcome = train_on(&config, &images).map_err(training_failure)?;
    println!(
        "trained to step {} (epoch {}); checkpoint {}",
        outcome.state.step,
        outcome.state.epoch,
        config.output_dir.join(latentgan::training::CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn load_state(path: &Path) -> anyhow::Result<TrainState> {
    Ok(checkpoint::load(path)?)
}

fn run_simple(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train { .. } => unreachable!("handled by train"),
        Command::InitConfig {
            preset,
            out,
            data_dir,
            seed,
        } => {
            let mut c = ExperimentConfig::preset_default(preset);
            if let Some(dir) = data_dir {
                c.data = DataPaths::mnist_dir(dir);
            }
            if let Some(s) = seed {
                c.seed = s;
            }
            match out {
                Some(p) => c.save(&p)?,
                None => print!("{}", c.to_toml()),
            }
        }
        Command::Eval {
            checkpoint,
            data,
            method,
            out,
        } => {
            let state = load_state(&checkpoint)?;
            let paths = match data {
                Some(dir) => DataPaths::mnist_dir(dir),
                None => state.config.data.clone(),
            };
            let need = |p: &Option<PathBuf>, what: &str| {
                p.clone()
                    .ok_or_else(|| anyhow!(Error::Config(format!("no {what} path configured"))))
            };
            let size = state.bundle.preset.image_shape.1;
            let train_labels = need(&paths.train_labels, "training label")?;
            let (test_images, test_labels) = (need(&paths.test_images, "test image")?, need(&paths.test_labels, "test label")?);
            let train = load_labelled::<f32>(&paths.train_images, &train_labels, size)?;
            let test = load_labelled::<f32>(&test_images, &test_labels, size)?;
            let report = evaluate_classification(&state.bundle, (&train.0, &train.1), (&test.0, &test.1), method)?;
            let path = output_file(out, &checkpoint_dir(&checkpoint), "eval_report.csv")?;
            write_report(
                &path,
                &[
                    ("test_error", report.test_error),
                    ("train_accuracy", report.train_accuracy),
                    ("n_train", train.1.len() as f64),
                    ("n_test", test.1.len() as f64),
                    ("step", state.step as f64),
                ],
            )?;
            println!("test_error {:.4} (mapping {:?}); report {}", report.test_error, report.assignment.mapping, path.display());
        }
        Command::Sample { checkpoint, n, seed, out } => {
            let state = load_state(&checkpoint)?;
            let path = output_file(out, &checkpoint_dir(&checkpoint), &format!("samples_seed{seed}.png"))?;
            let r = emit_samples(&state.bundle, n, seed, &path)?;
            println!("wrote {}×{} grid to {}", r.width, r.height, path.display());
        }
        Command::Traverse {
            checkpoint,
            vary,
            rows,
            cols,
            range,
            seed,
            out,
        } => {
            let state = load_state(&checkpoint)?;
            let range = range.map(|v| (v[0], v[1]));
            let path = output_file(out, &checkpoint_dir(&checkpoint), &format!("traverse_{vary}_seed{seed}.png"))?;
            let r = emit_traversal(&state.bundle, vary, rows, cols, range, seed, &path)?;
            println!("wrote {}×{} grid to {}", r.width, r.height, path.display());
            if vary == CodeSelector::Categorical(0) {
                let hits = category_round_trip(&state.bundle, rows, seed)?;
                let n = hits.iter().filter(|&&h| h).count();
                println!("category round trip: {n}/{} columns recovered", hits.len());
            }
        }
        Command::Oracle {
            k,
            components,
            radius,
            stddev,
            steps,
            lambda_disc,
            learning_rate,
            noise_dim,
            batch_size,
            eval_samples,
            seed,
            out_dir: dir,
            no_scatter,
        } => {
            let ring = MixtureSpec::ring(components, radius, stddev)?;
            let mut s = OracleSettings {
                code_k: k,
                seed,
                ..OracleSettings::default()
            };
            if let Some(v) = steps {
                s.steps = v;
            }
            if let Some(v) = lambda_disc {
                s.lambda_disc = v;
            }
            if let Some(v) = learning_rate {
                s.adam.learning_rate = v;
            }
            if let Some(v) = noise_dim {
                s.noise_dim = v;
            }
            if let Some(v) = batch_size {
                s.batch_size = v;
            }
            if let Some(v) = eval_samples {
                s.eval_samples = v;
            }
            let report = run_oracle(&ring, &s).map_err(|e| match e {
                Error::NonFinite { .. } => anyhow!(e).context("oracle diverged"),
                other => anyhow!(other),
            })?;
            let dir = match dir {
                Some(d) if env_out().is_none() => {
                    fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
                    d
                }
                _ => out_dir(Path::new("runs/oracle"))?,
            };
            report.write_csv(dir.join("oracle_report.csv"))?;
            report.write_curves(dir.join("oracle_curves.csv"))?;
            if !no_scatter && ring.dim() == 2 {
                report.write_scatter(dir.join("oracle_scatter.png"))?;
            }
            println!(
                "mmd2 {:.5} (untrained {:.5}) purity {:.4} (null sigma {:.4}); report in {}",
                report.mmd2,
                report.mmd2_untrained,
                report.purity,
                report.null_sigma(),
                dir.display()
            );
        }
    }
    Ok(())
}
