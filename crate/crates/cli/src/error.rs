use std::fmt;

use vistree::features::FeatureError;
use vistree::segment::SegmentError;
use vistree::trainer::TrainError;
use vistree::tree::TreeError;
use vistree::vlm::VlmError;

/// Failure classes mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or input files (exit 2).
    Input(String),
    /// Missing fixture or failed transport (exit 3).
    Transport(String),
    /// Non-finite values during computation (exit 4).
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Transport(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "error: {m}"),
            CliError::Transport(m) => write!(f, "transport error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<VlmError> for CliError {
    fn from(e: VlmError) -> Self {
        match e {
            VlmError::FixtureMiss { .. } => CliError::Transport(e.to_string()),
            e if e.is_transport() => CliError::Transport(e.to_string()),
            VlmError::Feature(f) => f.into(),
            e => CliError::Input(e.to_string()),
        }
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::Numeric(_) => CliError::Numeric(e.to_string()),
            e => CliError::Input(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numeric { .. } => CliError::Numeric(e.to_string()),
            TrainError::Feature(f) => f.into(),
            TrainError::Tree(t) => t.into(),
            e => CliError::Input(e.to_string()),
        }
    }
}

impl From<TreeError> for CliError {
    fn from(e: TreeError) -> Self {
        match e {
            TreeError::Numeric(_) => CliError::Numeric(e.to_string()),
            e => CliError::Input(e.to_string()),
        }
    }
}

impl From<SegmentError> for CliError {
    fn from(e: SegmentError) -> Self {
        CliError::Input(e.to_string())
    }
}
