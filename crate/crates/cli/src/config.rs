use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use ssgan_core::eval::ReportFormat;
use ssgan_core::models::ModelConfig;
use ssgan_core::training::TrainingConfig;

/// Everything a command may need, read from a TOML file and then
/// overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of the `<class>/<image>` tree.
    pub data_root: Option<PathBuf>,
    /// Split manifest; defaults to `<data_root>/manifest.json`.
    pub manifest: Option<PathBuf>,
    pub protocol: String,
    /// `[C, H, W]` images are resized to when a tree is split.
    pub image_shape: [usize; 3],
    pub out: PathBuf,
    /// Checkpoint read by `eval` and `generate`.
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint `train` continues from.
    pub resume: Option<PathBuf>,
    pub report_formats: Vec<ReportFormat>,
    /// Wall-clock limit for `train`, in seconds.
    pub time_budget_secs: Option<f64>,
    pub training: TrainingConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: None,
            manifest: None,
            protocol: "eth".into(),
            image_shape: [3, 64, 64],
            out: PathBuf::from("runs"),
            checkpoint: None,
            resume: None,
            report_formats: vec![ReportFormat::Csv, ReportFormat::Text],
            time_budget_secs: None,
            training: TrainingConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| ssgan_core::Error::Config(e.to_string()).into())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn manifest_path(&self) -> Option<PathBuf> {
        self.manifest.clone().or_else(|| self.data_root.as_ref().map(|r| r.join("manifest.json")))
    }

    /// The explicit data root, or the directory holding the manifest.
    pub fn data_root_for(&self, manifest: &Path) -> PathBuf {
        self.data_root
            .clone()
            .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default())
    }
}
