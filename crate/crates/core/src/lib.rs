//! Semi-supervised binary segmentation of particle images.
//!
//! A shared encoder feeds a main decoder (with skip connections, used for
//! inference) and an auxiliary decoder that sees a perturbed latent and is
//! only used during training. Unlabelled tiles contribute through a consensus
//! loss between the decoders, a class-prior loss and an input reconstruction
//! loss. The [`blindspot`] module quantifies why consensus alone favours the
//! majority class.

pub mod blindspot;
pub mod class;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod perturb;
pub mod tensor;
pub mod trainer;

pub use blindspot::{bias_report, bias_report_csv, BiasRow, BlindSpotModel, SimulationResult};
pub use class::{Class, NUM_CLASSES};
pub use config::ExperimentConfig;
pub use data::{DatasetSplit, ImageTile, LabelMask, LabelledTile, SynthConfig, UnlabelledTile};
pub use error::{Error, Result};
pub use losses::{ClassPrior, ClassWeights, LossComponents, LossWeights};
pub use metrics::{ConfusionCounts, MetricsRow};
pub use model::{ArchConfig, LatentFeatureMap, RsNet, Scope};
pub use perturb::PerturbConfig;
pub use tensor::{Real, Tensor};
pub use trainer::{TrainConfig, TrainHistory, Variant};
