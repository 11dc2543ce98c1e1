//! Crate-wide error type.
//!
//! Validation problems (bad configs, degenerate inputs, contract violations)
//! and pipeline stage failures are kept distinct so the CLI can map them to
//! different exit codes.

use thiserror::Error;

/// All errors surfaced by the library.
#[derive(Debug, Error)]
pub enum XwdError {
    // --- validation / contract violations -----------------------------------
    /// A window was constructed with a non-positive width.
    #[error("degenerate window '{name}': width must be positive, got {width}")]
    WindowDegenerate { name: String, width: f64 },

    /// A window name was requested that is not part of the active window set.
    #[error("unknown window '{0}'")]
    UnknownWindow(String),

    /// An input value that must be finite was NaN or infinite.
    #[error("non-finite input in {context}")]
    NonFiniteInput { context: &'static str },

    /// An operation received an empty collection where at least one element
    /// is required (e.g. fitting statistics on zero voxels).
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Tensor or volume shapes do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A split fraction or patient count produced an empty partition.
    #[error("split produces an empty partition: {0}")]
    EmptyPartition(String),

    /// A phantom specification is internally inconsistent.
    #[error("invalid phantom spec: {0}")]
    InvalidPhantomSpec(String),

    /// A sampling plan is unusable for the given stack.
    #[error("invalid sampling: {0}")]
    InvalidSampling(String),

    /// A slice series on disk is unreadable or internally inconsistent.
    #[error("invalid series at {path}: {reason}")]
    InvalidSeries { path: String, reason: String },

    /// A stored volume file has a bad magic, header, or payload length.
    #[error("invalid volume file {path}: {reason}")]
    InvalidVolume { path: String, reason: String },

    /// An encoder configuration violates its structural invariants.
    #[error("invalid encoder config: {0}")]
    InvalidEncoderConfig(String),

    /// Checkpoint bytes do not describe a loadable model.
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: String, reason: String },

    /// A checkpoint's architecture does not match the requested one.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A distillation run was handed a teacher that is still trainable.
    #[error("teacher '{0}' must be frozen before distillation")]
    TeacherNotFrozen(String),

    /// A mutating operation was applied to a frozen model.
    #[error("model '{0}' is frozen; refusing to update its parameters")]
    Frozen(String),

    /// Meta-learner fitting was attempted on a partition other than
    /// validation, which would leak training or test information.
    #[error("leakage guard: meta-learner must be fitted on the validation partition, got {0}")]
    LeakageGuard(String),

    /// Normalization statistics were requested from a partition other than
    /// train, which would leak validation or test information.
    #[error("leakage guard: normalization stats must be fitted on the train partition, got {0}")]
    NormStatsLeakage(String),

    /// A label vector contains a single class where both are required.
    #[error("degenerate labels in {context}: need both classes")]
    DegenerateLabels { context: &'static str },

    /// Two paired sequences differ in length.
    #[error("length mismatch in {context}: {a} vs {b}")]
    LengthMismatch {
        context: &'static str,
        a: usize,
        b: usize,
    },

    /// Pipelines being compared mix supervised and distilled members.
    #[error("provenance mismatch: {0}")]
    ProvenanceMismatch(String),

    /// An ensemble expects one frozen model per window and one is absent.
    #[error("no model for window '{0}'")]
    MissingWindowModel(String),

    /// A split references a patient with no preprocessed data.
    #[error("no preprocessed data for patient '{0}'")]
    MissingPatient(String),

    /// A pipeline and a dataset were preprocessed under different window sets.
    #[error("window set mismatch: {0}")]
    WindowSetMismatch(String),

    /// A Grad-CAM target layer name does not exist in the encoder.
    #[error("unknown layer '{0}'")]
    UnknownLayer(String),

    /// The experiment configuration failed validation.
    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    /// Another process holds the experiment directory lock.
    #[error("experiment directory is locked by another run: {0}")]
    LockHeld(String),

    /// A stored manifest cannot be parsed or is inconsistent.
    #[error("corrupt manifest: {0}")]
    ManifestCorrupt(String),

    // --- runtime failures ----------------------------------------------------
    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    /// The meta-learner solver failed to make progress.
    #[error("meta-learner fit failed: {0}")]
    MetaFitFailed(String),

    /// A pipeline stage failed; wraps the underlying error.
    #[error("stage '{stage}' failed: {source}")]
    StageFailure {
        stage: &'static str,
        #[source]
        source: Box<XwdError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl XwdError {
    /// Wrap any error as a failure of the named pipeline stage.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            // Don't double-wrap: keep the innermost stage attribution.
            e @ XwdError::StageFailure { .. } => e,
            other => XwdError::StageFailure {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Process exit code for the CLI: 1 for validation errors, 2 once a
    /// pipeline stage has actually failed.
    pub fn exit_code(&self) -> i32 {
        match self {
            XwdError::StageFailure { .. } => 2,
            _ => 1,
        }
    }
}
