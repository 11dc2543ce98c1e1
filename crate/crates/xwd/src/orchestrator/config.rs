//! Experiment configuration: a schema-versioned TOML document that names a
//! data source, the preprocessing plan, the architecture, and the training
//! hyperparameters, resolved into the component configs the stages consume.
//!
//! The configuration's identity is `config_hash()`: the SHA-256 of its
//! canonical JSON serialization. Hashing the parsed struct rather than the
//! raw file makes the hash invariant under TOML key reordering, comments,
//! and whitespace — semantically identical documents collide on purpose.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::DEFAULT_L2;
use crate::ingestion::{plan_indices, PhantomSpec, SamplingPlan, TaskMode, TissueComponent};
use crate::model::EncoderConfig;
use crate::seed::{derive_seed, sha256_hex};
use crate::train::TrainConfig;
use crate::windowing::WindowSet;
use crate::{Result, XwdError};

/// Schema understood by this build. Bumped on breaking layout changes.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Environment variable providing a default root for output directories.
pub const OUTPUT_DIR_ENV: &str = "XWD_OUTPUT_DIR";

/// Where volumes come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// On-disk cohort: per-patient slice directories plus `labels.tsv`.
    Real,
    /// Synthesized cohort described by the `[data.phantom]` section.
    Phantom,
}

/// The `[data]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: SourceKind,
    /// Cohort root; required when `source = "real"`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Synthetic cohort description; required when `source = "phantom"`.
    #[serde(default)]
    pub phantom: Option<PhantomSection>,
}

/// The `[data.phantom]` section: a [`PhantomSpec`] whose generator seed may
/// be omitted and derived from the root training seed instead, so one root
/// seed reproduces the whole experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub n_patients: usize,
    pub class_balance: f64,
    pub signal_band: (f64, f64),
    pub signal_texture_amplitude: f64,
    pub background_tissue_mix: Vec<TissueComponent>,
    pub volume_shape: (usize, usize, usize),
    /// Explicit generator seed; derived from the root seed when omitted.
    #[serde(default)]
    pub rng_seed: Option<u64>,
}

impl PhantomSection {
    /// Materializes the generator spec, deriving the cohort seed from the
    /// root seed unless one was pinned explicitly.
    pub fn resolve(&self, root_seed: u64) -> PhantomSpec {
        PhantomSpec {
            n_patients: self.n_patients,
            class_balance: self.class_balance,
            signal_band: self.signal_band,
            signal_texture_amplitude: self.signal_texture_amplitude,
            background_tissue_mix: self.background_tissue_mix.clone(),
            volume_shape: self.volume_shape,
            rng_seed: self
                .rng_seed
                .unwrap_or_else(|| derive_seed(root_seed, "data", "phantom-cohort")),
        }
    }
}

/// The `[encoder]` section: either a named preset or explicit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    /// One of `tiny`, `grad_check`, `full_scale`.
    #[serde(default)]
    pub preset: Option<String>,
    /// Explicit architecture, mutually exclusive with `preset`.
    #[serde(default)]
    pub custom: Option<EncoderConfig>,
}

impl EncoderSection {
    pub fn resolve(&self) -> Result<EncoderConfig> {
        let cfg = match (&self.preset, &self.custom) {
            (Some(name), None) => match name.as_str() {
                "tiny" => EncoderConfig::tiny(),
                "grad_check" => EncoderConfig::grad_check(),
                "full_scale" => EncoderConfig::full_scale(),
                other => {
                    return Err(XwdError::ConfigInvalid(format!(
                        "unknown encoder preset '{other}' \
                         (expected tiny, grad_check, or full_scale)"
                    )))
                }
            },
            (None, Some(custom)) => custom.clone(),
            (Some(_), Some(_)) => {
                return Err(XwdError::ConfigInvalid(
                    "[encoder] sets both preset and custom; pick one".into(),
                ))
            }
            (None, None) => {
                return Err(XwdError::ConfigInvalid(
                    "[encoder] needs either preset or custom".into(),
                ))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The `[split]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    /// (train, val, test) patient fractions; must sum to 1.
    pub fractions: (f64, f64, f64),
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            fractions: (0.7, 0.15, 0.15),
        }
    }
}

/// The `[evaluation]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Bootstrap resamples behind every confidence interval.
    pub n_bootstrap: usize,
    /// Ridge strength of the stacking meta-learner.
    pub l2_strength: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            n_bootstrap: 1000,
            l2_strength: DEFAULT_L2,
        }
    }
}

/// The `[transfer]` section: how the cross-cohort stage finds its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    /// Disable to record the stage as skipped.
    pub enabled: bool,
    /// Phantom target size; defaults to the source cohort's size.
    pub n_patients: Option<usize>,
    /// Invert the target's labels, emulating a domain whose signal polarity
    /// is reversed (direct transfer then scores below chance and only a
    /// head refit can recover).
    pub label_flip: bool,
    /// External cohort root for real-data sources; without it a real-data
    /// experiment records the stage as skipped.
    pub target_path: Option<PathBuf>,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection {
            enabled: true,
            n_patients: None,
            label_flip: false,
            target_path: None,
        }
    }
}

/// The `[output]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Experiment directory; every artifact lives under it.
    pub dir: PathBuf,
}

/// The whole experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data: DataConfig,
    pub sampling: SamplingPlan,
    pub encoder: EncoderSection,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub transfer: TransferSection,
    /// Excluded from the identity hash (`skip_serializing`): where an
    /// experiment writes is not part of what it computes.
    #[serde(default, skip_serializing)]
    pub output: Option<OutputSection>,
}

impl ExperimentConfig {
    /// Parses a TOML document into a config. Parse errors become
    /// `ConfigInvalid` with the parser's message (line/column included).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| XwdError::ConfigInvalid(format!("config parse: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            XwdError::ConfigInvalid(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    /// The window set implied by the sampling task mode.
    pub fn window_set(&self) -> WindowSet {
        match self.sampling.task_mode {
            TaskMode::Diffuse => WindowSet::diffuse(),
            TaskMode::Focal => WindowSet::focal(),
        }
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        self.encoder.resolve()
    }

    /// Cross-checks every section and their interactions.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(XwdError::ConfigInvalid(msg));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return fail(format!(
                "schema_version {} unsupported; this build reads {}",
                self.schema_version, CONFIG_SCHEMA_VERSION
            ));
        }

        match self.data.source {
            SourceKind::Real => {
                if self.data.path.is_none() {
                    return fail("[data] source = \"real\" requires path".into());
                }
                if self.data.phantom.is_some() {
                    return fail("[data] source = \"real\" must not set [data.phantom]".into());
                }
            }
            SourceKind::Phantom => {
                if self.data.phantom.is_none() {
                    return fail("[data] source = \"phantom\" requires [data.phantom]".into());
                }
                if self.data.path.is_some() {
                    return fail("[data] source = \"phantom\" must not set path".into());
                }
            }
        }

        self.sampling.validate()?;
        let enc = self.encoder.resolve()?;
        if self.sampling.target_slices != enc.input_shape.0 {
            return fail(format!(
                "sampling produces {} slices but the encoder expects {}",
                self.sampling.target_slices, enc.input_shape.0
            ));
        }
        if let Some(section) = &self.data.phantom {
            // The resolved spec's own checks plus: the raw extent must
            // survive trimming with enough slices left to sample.
            let spec = section.resolve(self.training.seed);
            spec.validate()?;
            plan_indices(spec.volume_shape.0, &self.sampling)?;
        }

        self.training.validate()?;

        let (ft, fv, fs) = self.split.fractions;
        if !(ft > 0.0 && fv > 0.0 && fs > 0.0) {
            return fail(format!(
                "split fractions must all be positive, got ({ft}, {fv}, {fs})"
            ));
        }
        if (ft + fv + fs - 1.0).abs() > 1e-9 {
            return fail(format!(
                "split fractions must sum to 1, got {}",
                ft + fv + fs
            ));
        }

        if self.evaluation.n_bootstrap == 0 {
            return fail("n_bootstrap must be at least 1".into());
        }
        if !(self.evaluation.l2_strength.is_finite() && self.evaluation.l2_strength >= 0.0) {
            return fail(format!(
                "l2_strength must be finite and ≥ 0, got {}",
                self.evaluation.l2_strength
            ));
        }

        if let Some(n) = self.transfer.n_patients {
            if n < 2 {
                return fail(format!("[transfer] n_patients must be ≥ 2, got {n}"));
            }
        }
        if let Some(out) = &self.output {
            if out.dir.as_os_str().is_empty() {
                return fail("[output] dir must not be empty".into());
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization: the experiment's
    /// identity, stable under key reordering in the source document.
    pub fn config_hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    /// Picks the experiment directory: the `[output]` section if present,
    /// else `$XWD_OUTPUT_DIR/<config file stem>`.
    pub fn resolve_output_dir(&self, config_path: &Path) -> Result<PathBuf> {
        if let Some(out) = &self.output {
            return Ok(out.dir.clone());
        }
        if let Some(root) = std::env::var_os(OUTPUT_DIR_ENV) {
            let stem = config_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "experiment".to_string());
            return Ok(PathBuf::from(root).join(stem));
        }
        Err(XwdError::ConfigInvalid(format!(
            "no output directory: set [output] dir or the {OUTPUT_DIR_ENV} environment variable"
        )))
    }
}
