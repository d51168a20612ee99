//! Run configuration: a single JSON document with one optional section per
//! concern, merged with command-line overrides before any command runs.
//! Unknown keys are rejected outright — a typo in a config file should stop
//! the run, not silently fall back to a default.

use crate::error::{missing, read_err, CliError};
use riskforge_core::controller::LossWeightVector;
use riskforge_core::io::{HighdOptions, SyntheticCorpusConfig};
use riskforge_core::metrics::{IndicatorTriple, LongTailCut, RiskThresholds};
use riskforge_core::motion_prior::{ModelConfig, TrainingConfig};
use riskforge_core::optimizer::{LossTermParams, OptimizerConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Target fractions per risk band for the distribution loop.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetMix {
    pub low: f64,
    pub intermediate: f64,
    pub high: f64,
    pub long_tail: f64,
}

impl Default for TargetMix {
    fn default() -> Self {
        Self {
            low: 0.25,
            intermediate: 0.25,
            high: 0.25,
            long_tail: 0.25,
        }
    }
}

impl TargetMix {
    pub fn fractions(&self) -> [f64; 4] {
        [self.low, self.intermediate, self.high, self.long_tail]
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let f = self.fractions();
        if f.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(CliError::config(
                "target mix fractions must be finite and non-negative",
            ));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!(
                "target mix fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Adversarial intent override: which side to strike from, what maneuver,
/// and how aggressively (0 = barely unsafe, 1 = critical).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectiveSpec {
    pub side: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub strength: f64,
}

/// Everything a run can be told, resolved before execution. Every field is
/// optional here; each command checks for the pieces it needs and reports
/// the missing key by name.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // -- shared ------------------------------------------------------------
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub llm: Option<bool>,
    pub strict_longtail: Option<bool>,
    pub thresholds: Option<RiskThresholds<f64>>,

    // -- ingest ------------------------------------------------------------
    /// Recorded trajectory export (CSV) to ingest.
    pub tracks: Option<PathBuf>,
    /// Recording metadata CSV that pairs with `tracks`.
    pub recording_meta: Option<PathBuf>,
    pub highd: Option<HighdOptions>,
    pub synthetic: Option<SyntheticCorpusConfig>,

    // -- train -------------------------------------------------------------
    /// Corpus file (JSON lines) to train on or condition from.
    pub corpus: Option<PathBuf>,
    pub model: Option<ModelConfig>,
    pub training: Option<TrainingConfig>,

    // -- generate / attack / distribute ------------------------------------
    /// Trained model checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Number of scenarios to produce.
    pub count: Option<usize>,
    pub optimizer: Option<OptimizerConfig<f64>>,
    pub loss_params: Option<LossTermParams<f64>>,
    /// Fixed loss weights; set to bypass the controller entirely.
    pub weights: Option<LossWeightVector>,
    /// Fixed maneuver directive; default derives one from scene geometry.
    pub directive: Option<DirectiveSpec>,

    // -- classify / report -------------------------------------------------
    /// Directory of scenario documents.
    pub scenarios: Option<PathBuf>,
    /// Raw (ttc, tlc, thw) triples to classify without scene files.
    pub triples: Option<Vec<IndicatorTriple<f64>>>,

    // -- evaluate ------------------------------------------------------------
    /// Directory of generated scenario documents.
    pub generated: Option<PathBuf>,
    /// Directory of reference documents, or a corpus file.
    pub reference: Option<PathBuf>,

    // -- distribute ----------------------------------------------------------
    pub target_mix: Option<TargetMix>,
    pub budget: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &PathBuf) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| read_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::Config(format!("{}: {e}", path.display()))
        })
    }

    /// Fold a flag override into the config; flags win over file values.
    pub fn override_with(
        &mut self,
        seed: Option<u64>,
        out: Option<PathBuf>,
        threads: Option<usize>,
        llm: bool,
        strict_longtail: bool,
    ) {
        if seed.is_some() {
            self.seed = seed;
        }
        if out.is_some() {
            self.out = out;
        }
        if threads.is_some() {
            self.threads = threads;
        }
        if llm {
            self.llm = Some(true);
        }
        if strict_longtail {
            self.strict_longtail = Some(true);
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Artifact directory; the working directory's `out/` when unset.
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn cut(&self) -> LongTailCut {
        if self.strict_longtail.unwrap_or(false) {
            LongTailCut::Strict
        } else {
            LongTailCut::Standard
        }
    }

    pub fn thresholds(&self) -> Result<RiskThresholds<f64>, CliError> {
        let t = self.thresholds.unwrap_or_default();
        t.validate()?;
        Ok(t)
    }

    /// The LLM path runs only when asked for twice: the `--llm` opt-in (or
    /// config key) and the endpoint URL in the environment. Everything else
    /// stays on the deterministic rule engine.
    pub fn llm_enabled(&self) -> bool {
        self.llm.unwrap_or(false) && std::env::var("RISKFORGE_LLM_URL").is_ok()
    }

}

/// Unwrap a config field the command cannot run without, naming the key
/// (and its flag twin) in the error.
pub fn require<T>(field: &Option<T>, name: &str) -> Result<T, CliError>
where
    T: Clone,
{
    field.clone().ok_or_else(|| missing(name))
}

/// Create the artifact directory (and parents) if it does not exist yet.
pub fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}
