use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vistree::env::RenderConfig;
use vistree::features::SurrogateHyper;
use vistree::trainer::TrainConfig;
use vistree::vlm::bundle::{DEFAULT_MODEL, DEFAULT_QUERIES};
use vistree::vlm::transport::DEFAULT_CREDENTIAL_ENV;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    Replay,
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VlmSettings {
    pub transport: TransportKind,
    /// Fixture corpus; the bundled one when unset.
    pub fixtures: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub credential_env: String,
    pub model: String,
    pub n: usize,
    pub task: String,
    /// Recorded answers of a live session go here when set.
    pub record: Option<PathBuf>,
}

impl Default for VlmSettings {
    fn default() -> Self {
        VlmSettings {
            transport: TransportKind::Replay,
            fixtures: None,
            endpoint: None,
            credential_env: DEFAULT_CREDENTIAL_ENV.into(),
            model: DEFAULT_MODEL.into(),
            n: DEFAULT_QUERIES,
            task: "cartpole".into(),
            record: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Labeler {
    /// Native segmentation-based extractor of the bundled cart-pole spec.
    Reference,
    /// Selected single-frame program from the VLM steps.
    Program,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSettings {
    pub n: usize,
    pub fractions: [f64; 2],
    pub labeler: Labeler,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        DatasetSettings {
            n: 10_000,
            fractions: [0.7, 0.2],
            labeler: Labeler::Reference,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub batches: Vec<usize>,
    pub iterations: usize,
    pub frames: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            batches: vec![8, 16, 32, 64, 128],
            iterations: 10,
            frames: 256,
        }
    }
}

/// Everything one run needs. Command-line flags override fields after
/// loading; the resolved document is echoed into the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub render: RenderConfig,
    /// Feature spec used for dataset labelling and feature-based training.
    /// Defaults to the VLM spec of the run when present, else the bundled
    /// cart-pole spec.
    pub feature_spec: Option<PathBuf>,
    pub vlm: VlmSettings,
    pub dataset: DatasetSettings,
    pub surrogate: SurrogateHyper,
    pub train: TrainConfig,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("run"),
            seed: 0,
            render: RenderConfig::default(),
            feature_spec: None,
            vlm: VlmSettings::default(),
            dataset: DatasetSettings::default(),
            surrogate: SurrogateHyper::default(),
            train: TrainConfig::default(),
            bench: BenchSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    /// Writes `config.<command>.json` into the run directory.
    pub fn echo(&self, command: &str) -> Result<(), CliError> {
        let dir = &self.out_dir;
        std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
        let path = dir.join(format!("config.{command}.json"));
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }
}
