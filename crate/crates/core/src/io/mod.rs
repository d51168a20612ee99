//! Corpus ingestion, synthetic corpus generation, and persistence.
//!
//! Everything in this module is pinned to `f64`: files are exchange formats,
//! and the on-disk encodings (decimal-exact JSON numbers, little-endian
//! 64-bit float blobs) are defined in double precision no matter what the
//! in-memory pipeline computes with.
//!
//! * [`highd`] — drone-recording CSV ingestion (tracks + recording meta),
//!   resampling to the model rate and windowing into [`Scene`]s.
//! * [`synthetic`] — license-free generated corpus: car-following, sigmoid
//!   lane changes, and braking pulses on straight and curved roads.
//! * [`persist`] — scenario documents, corpus JSONL, model checkpoints.
//! * [`export`] — plot-ready CSV dumps: indicator time series, loss curves,
//!   risk histograms.

pub mod export;
pub mod highd;
pub mod persist;
pub mod synthetic;

pub use export::export_plot_data;
pub use highd::{
    parse_highd, read_raw_tracks, read_recording_meta, HighdOptions, RawTrackRow, RecordingMeta,
};
pub use persist::{
    load_checkpoint, load_corpus, load_scenario, save_checkpoint, save_corpus, save_scenario,
};
pub use synthetic::{
    generate_synthetic_corpus, generate_synthetic_corpus_with, ManeuverMix, SyntheticCorpusConfig,
};

use crate::controller::LossWeightVector;
use crate::metrics::{
    classify, step_worst_indicators, worst_case_indicators, LongTailCut, MetricsError, RiskLevel,
    RiskThresholds,
};
use crate::risk_field::IndicatorSet;
use crate::scene::{Scene, SceneError};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Version written into scenario documents.
pub const SCENARIO_SCHEMA_VERSION: u32 = 1;
/// Version written into corpus JSONL headers.
pub const CORPUS_SCHEMA_VERSION: u32 = 1;
/// Version written into model checkpoint headers.
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// The file does not follow the expected column/field layout.
    #[error("schema violation: {0}")]
    Schema(String),
    /// A track inside an otherwise well-formed file is unusable.
    #[error("track {id}: {reason}")]
    CorruptTrack { id: i64, reason: String },
    #[error("invalid corpus config: {0}")]
    InvalidConfig(&'static str),
    /// Syntactically broken file; `offset` is a byte position into it.
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("unsupported schema version {found}, this build reads version {expected}")]
    UnsupportedSchema { found: u64, expected: u32 },
    /// Well-formed file whose content breaks a document invariant.
    #[error("invalid document: {0}")]
    InvalidDocument(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Where a scenario came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioSource {
    /// Windowed out of a recorded corpus.
    Recorded,
    /// Decoded from a prior sample, no optimization.
    Cvae,
    /// Latent-space adversarial optimization.
    Optimizer,
    /// Direct trajectory perturbation (baseline method).
    Perturbation,
}

/// How a scenario was produced, for audit and reproduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: ScenarioSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Loss weights the optimizer ran with, when one was involved.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<LossWeightVector>,
    /// Free-form record of how the weights were chosen (rule hits,
    /// endpoint fallbacks, directive text).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller_trace: Option<String>,
    /// Latent vector the scenario was decoded from. Present on generated
    /// and attacked scenarios; recorded data has none. Realism scoring
    /// needs it, so dropping it limits later evaluation, not validity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Vec<f64>>,
}

impl Provenance {
    pub fn new(source: ScenarioSource) -> Self {
        Self {
            source,
            seed: None,
            weights: None,
            controller_trace: None,
            latent: None,
        }
    }
}

/// One scenario as persisted: the scene itself plus everything needed to
/// audit it — provenance, the per-step worst-case indicator series, the risk
/// band, and the optimizer's accepted-iterate losses when it was attacked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDocument {
    pub schema_version: u32,
    pub scene: Scene<f64>,
    pub provenance: Provenance,
    /// Worst case over all ordered agent pairs, one entry per stored step.
    pub indicators: Vec<IndicatorSet<f64>>,
    pub risk_label: RiskLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_history: Option<Vec<f64>>,
}

impl ScenarioDocument {
    /// Assemble a document from a scene. The indicator series and the risk
    /// label are derived on the spot so they cannot drift out of sync with
    /// the trajectories.
    pub fn from_scene(
        scene: Scene<f64>,
        provenance: Provenance,
        loss_history: Option<Vec<f64>>,
        thresholds: &RiskThresholds<f64>,
        cut: LongTailCut,
    ) -> Result<Self, IoError> {
        let indicators = step_worst_indicators(&scene)?;
        let worst = worst_case_indicators(&indicators).expect("trajectories are never empty");
        let risk_label = classify(&worst, thresholds, cut);
        Ok(Self {
            schema_version: SCENARIO_SCHEMA_VERSION,
            scene,
            provenance,
            indicators,
            risk_label,
            loss_history,
        })
    }

    pub fn validate(&self) -> Result<(), IoError> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(IoError::UnsupportedSchema {
                found: u64::from(self.schema_version),
                expected: SCENARIO_SCHEMA_VERSION,
            });
        }
        let steps = self
            .scene
            .agents
            .first()
            .map(|t| t.len())
            .unwrap_or_default();
        if self.indicators.len() != steps {
            return Err(IoError::InvalidDocument(format!(
                "indicator series has {} entries for {} trajectory steps",
                self.indicators.len(),
                steps
            )));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_file_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Byte offset of a serde_json error inside `text` (serde_json reports
/// 1-based line/column).
pub(crate) fn json_error_offset(text: &str, err: &serde_json::Error) -> usize {
    let line = err.line().max(1);
    let column = err.column().max(1);
    text.split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum::<usize>()
        + (column - 1)
}

/// Peek at `schema_version` before committing to a full decode, so version
/// mismatches surface as such instead of as shape errors.
pub(crate) fn check_schema_version(
    value: &serde_json::Value,
    expected: u32,
    path: &Path,
) -> Result<(), IoError> {
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(found) if found == u64::from(expected) => Ok(()),
        Some(found) => Err(IoError::UnsupportedSchema { found, expected }),
        None => Err(IoError::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: "missing schema_version field".into(),
        }),
    }
}
