//! The experiment manifest: one JSON document per output directory that
//! records the configuration hash, every completed stage with the SHA-256
//! of each artifact it produced, the teacher-selection evidence, and every
//! metrics report.
//!
//! The manifest is the resumability contract: a stage whose record exists
//! and whose artifacts all still hash to their recorded values is skipped.
//! Nothing time-dependent is stored, so two runs of the same configuration
//! produce byte-identical manifests. The `history` list is append-only —
//! an event is pushed for every stage decision and none is ever removed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::MetricsReport;
use crate::seed::sha256_file;
use crate::train::TeacherSelection;
use crate::{Result, XwdError};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// One completed stage: artifact path (relative to the output directory,
/// `/`-separated) → SHA-256 of its bytes.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub artifacts: BTreeMap<String, String>,
}

/// One orchestrator decision about one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub stage: String,
    /// `"ran"`, `"ran (retrained: …)"`, or `"skipped (…)"`.
    pub action: String,
}

/// The whole manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    /// Hash of the effective configuration that owns this directory.
    pub config_hash: String,
    /// Completed stages by name.
    pub stages: BTreeMap<String, StageRecord>,
    /// Validation AUC per window, filled by the baseline stage.
    #[serde(default)]
    pub val_auc: BTreeMap<String, f64>,
    /// Teacher choice and its evidence, filled by the selection stage.
    #[serde(default)]
    pub teacher: Option<TeacherSelection>,
    /// Every metrics report, keyed `"<context>/<pipeline>"`
    /// (e.g. `"test/distilled"`, `"transfer/direct"`).
    #[serde(default)]
    pub reports: BTreeMap<String, MetricsReport>,
    /// Append-only log of stage decisions.
    #[serde(default)]
    pub history: Vec<HistoryEvent>,
}

impl ExperimentManifest {
    pub fn new(config_hash: String) -> Self {
        ExperimentManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            config_hash,
            stages: BTreeMap::new(),
            val_auc: BTreeMap::new(),
            teacher: None,
            reports: BTreeMap::new(),
            history: Vec::new(),
        }
    }

    /// Reads the manifest of an output directory; `None` when the directory
    /// has no manifest yet. A present-but-unreadable manifest is corrupt:
    /// guessing at stage state would risk silently redoing or skipping work.
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => {
                return Err(XwdError::ManifestCorrupt(format!(
                    "{}: {e}",
                    path.display()
                )))
            }
        };
        let manifest: ExperimentManifest = serde_json::from_slice(&bytes)
            .map_err(|e| XwdError::ManifestCorrupt(format!("{}: {e}", path.display())))?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(XwdError::ManifestCorrupt(format!(
                "{}: schema_version {} unsupported (this build reads {})",
                path.display(),
                manifest.schema_version,
                MANIFEST_SCHEMA_VERSION
            )));
        }
        Ok(Some(manifest))
    }

    /// Writes the manifest atomically (temp file + rename within `dir`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(".manifest.json.tmp");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Marks a stage complete with its artifact hashes and logs the event.
    pub fn record_stage(
        &mut self,
        stage: &str,
        artifacts: BTreeMap<String, String>,
        action: String,
    ) {
        self.stages.insert(stage.to_string(), StageRecord { artifacts });
        self.history.push(HistoryEvent {
            stage: stage.to_string(),
            action,
        });
    }

    pub fn push_skip(&mut self, stage: &str, reason: &str) {
        self.history.push(HistoryEvent {
            stage: stage.to_string(),
            action: format!("skipped ({reason})"),
        });
    }

    /// True when the stage completed before and every artifact it recorded
    /// still exists with unchanged bytes.
    pub fn stage_satisfied(&self, dir: &Path, stage: &str) -> bool {
        let Some(record) = self.stages.get(stage) else {
            return false;
        };
        record
            .artifacts
            .iter()
            .all(|(rel, expected)| hash_artifact(dir, rel).as_deref() == Some(expected.as_str()))
    }
}

/// SHA-256 of one artifact; `None` when missing or unreadable (an
/// unreadable artifact is treated as stale, and re-running the stage then
/// surfaces the underlying problem).
pub fn hash_artifact(dir: &Path, rel: &str) -> Option<String> {
    sha256_file(&dir.join(rel)).ok()
}
