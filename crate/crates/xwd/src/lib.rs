//! Cross-window knowledge distillation for volumetric CT classification.
//!
//! The pipeline turns raw Hounsfield-unit volumes into a small committee of
//! 3D convolutional classifiers, one per intensity window, and then improves
//! the weaker committee members by distilling features from the strongest one:
//!
//! 1. **Ingestion** ([`ingestion`]): read per-patient slice series (or
//!    synthesize phantoms), trim and resample slices, and resize in the HU
//!    domain.
//! 2. **Windowing** ([`windowing`]): apply clinical window transforms
//!    (width/level clamp-and-rescale) to produce one normalized volume per
//!    window.
//! 3. **Per-window encoders** ([`model`], [`train`]): train a squeeze-and-
//!    excitation residual 3D CNN per window, supervised on binary labels.
//! 4. **Teacher selection and distillation** ([`train`]): pick the window
//!    whose encoder has the best validation AUC, freeze it, and retrain the
//!    remaining windows with an added feature-alignment (MSE) loss.
//! 5. **Ensembling** ([`ensemble`]): fuse per-window probabilities with a
//!    logistic meta-learner fitted on validation predictions only.
//! 6. **Transfer** ([`train::transfer`]): evaluate frozen pipelines on a
//!    shifted cohort, directly and after head-only refits.
//! 7. **Analysis** ([`analysis`]): AUC/accuracy/F1 with bootstrap confidence
//!    intervals, paired t-tests, error-overlap (Venn) counts, and Grad-CAM
//!    attribution volumes.
//!
//! Every random choice is drawn from a ChaCha generator seeded by a named
//! derivation from the experiment's root seed ([`seed`]), so a full run is
//! reproducible byte-for-byte: artifacts are content-hashed into a manifest
//! and re-runs are expected to produce identical hashes.

pub mod analysis;
pub mod ensemble;
pub mod error;
pub mod ingestion;
pub mod model;
pub mod orchestrator;
pub mod seed;
pub mod train;
pub mod windowing;

pub use error::XwdError;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, XwdError>;
