//! Synthetic brain MRI training pairs from label maps, and a Bayesian EM
//! segmenter that inverts the same generative model.
//!
//! A pair is produced by warping a label map with a random affine plus
//! diffeomorphic deformation, painting each label with a random Gaussian,
//! then blurring, multiplying by a smooth bias field and applying a random
//! gamma. Every pair is a pure function of `(maps, config, sample_index)`.

pub mod bayes;
pub mod config;
pub mod deform;
pub mod error;
pub mod generator;
pub mod intensity;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod volume;

pub use bayes::{build_atlas, em_segment, log_likelihood, Atlas, EmOptions, EmResult};
pub use config::{load_config, ContrastMode, GenConfig};
pub use error::{Error, Result};
pub use generator::{generate_pair, generate_stream, Generator, ParameterRecord, TrainingPair};
pub use metrics::{dice, dice_report, soft_dice_loss, DiceReport};
pub use volume::{Dims, LabelMap, VectorField, Volume};
