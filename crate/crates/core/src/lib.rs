//! Metadata-free population bias detection and remediation for binary image
//! classifiers.
//!
//! Validation images are laid out on a PCA similarity grid and tinted by how
//! badly the classifier does on each one. Hard examples are then drawn in
//! proportion to their failure probability, matched to nearby images in an
//! augmentation pool, and used to fine-tune the classifier, iteratively.

pub mod classifier;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod pca;
pub mod remediation;
pub mod saliency;
pub mod sampler;
pub mod seed;
pub mod synth;

pub use classifier::{ExternalScorer, LogisticTrainer, RefModel, Scorer, TrainHyper, Trainer};
pub use dataset::{load_manifest, save_manifest, Dataset, ImageRecord, Label};
pub use error::{Error, ErrorClass, Result};
pub use grid::{make_grid, GridLayout};
pub use pca::{Coords2D, PcaBasis};
pub use remediation::{run_loop, run_random_baseline, Arm, LoopConfig, LoopState};
pub use saliency::{compute_failures, render, FailureScores, SaliencyImage};
pub use sampler::{make_weights, match_pool, sample, MatchSet, SampleWeights, WeightMode};
pub use synth::{generate_corpus, Corpus, CorpusSpec};
