//! Convolutional autoencoder with a GAN over its latent space. The generator
//! takes noise plus categorical and continuous control codes; a posterior head
//! on the discriminator trunk recovers the codes, and its categorical head
//! doubles as an unsupervised classifier.

pub mod adam;
pub mod checkpoint;
pub mod codes;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod oracle;
pub mod tensor;
pub mod training;

pub use adam::{Adam, AdamSettings};
pub use codes::{CodeSelector, CodeSpec, GeneratorInput, LatentCode};
pub use config::{DataPaths, ExperimentConfig, OptimSettings, TrainingOptions};
pub use data::{ImageBatch, MixtureSpec, RawImageSet};
pub use error::{Error, Result};
pub use evaluation::{AssignmentMethod, ClusterAssignment, Mmd2Result};
pub use losses::{InfoLoss, LossWeights, NoisyLabelPolicy};
pub use networks::{ArchPreset, NetworkBundle, PresetName};
pub use oracle::{OracleReport, OracleSettings};
pub use tensor::{Real, Tensor};
pub use training::{StepMetrics, TrainState};
