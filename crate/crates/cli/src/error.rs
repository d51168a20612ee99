//! Process-level error taxonomy. Three failure families map onto three
//! non-zero exit codes; everything a command can raise funnels into one of
//! them so `main` never has to inspect errors case by case.

use riskforge_core::controller::ControllerError;
use riskforge_core::io::IoError;
use riskforge_core::metrics::MetricsError;
use riskforge_core::motion_prior::PriorError;
use riskforge_core::optimizer::OptimizerError;
use riskforge_core::risk_field::RiskFieldError;
use riskforge_core::scene::SceneError;
use std::path::PathBuf;
use thiserror::Error;

/// Exit code for malformed flags, config files, or parameter combinations.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for unreadable, corrupt, or insufficient input data.
pub const EXIT_DATA: i32 = 3;
/// Exit code for numerical failures (divergence, non-finite losses).
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

/// A config key (or flag) the active command cannot run without.
pub fn missing(what: &str) -> CliError {
    CliError::Config(format!("missing required setting: {what}"))
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PriorError> for CliError {
    fn from(e: PriorError) -> Self {
        match e {
            // Divergence and autodiff breakdowns are numerical outcomes;
            // the rest describe unusable inputs.
            PriorError::TrainingDiverged { .. } | PriorError::Diff(_) => {
                CliError::Numerical(e.to_string())
            }
            PriorError::LatentDim { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<OptimizerError> for CliError {
    fn from(e: OptimizerError) -> Self {
        match e {
            OptimizerError::InvalidConfig(_) | OptimizerError::UnknownLossTerm(_) => {
                CliError::Config(e.to_string())
            }
            OptimizerError::OptimizationAborted { .. } | OptimizerError::Diff(_) => {
                CliError::Numerical(e.to_string())
            }
            OptimizerError::NoVictim | OptimizerError::Scene(_) => {
                CliError::Data(e.to_string())
            }
            OptimizerError::Prior(p) => p.into(),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::BadThresholds(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<RiskFieldError> for CliError {
    fn from(e: RiskFieldError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ControllerError> for CliError {
    fn from(e: ControllerError) -> Self {
        // Directive/weight construction is configuration; endpoint trouble
        // never surfaces here because the callers fall back to the rule
        // engine instead of propagating.
        CliError::Config(e.to_string())
    }
}

/// Read failures on paths the user handed us are data errors with the path
/// spelled out.
pub fn read_err(path: &PathBuf, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
