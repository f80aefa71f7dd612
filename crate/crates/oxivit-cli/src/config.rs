//! Run configuration: one JSON document per run, archived into the output
//! directory. Flags override file values, which override defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use oxivit::data::{AugmentPolicy, SynthSpec};
use oxivit::loss::JointLossConfig;
use oxivit::train::OptimizerConfig;
use oxivit::vit::ViTConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthSpec),
    Folder {
        root: PathBuf,
        #[serde(default)]
        manifest: Option<PathBuf>,
        /// resize slices to this square resolution on load
        #[serde(default)]
        target_size: Option<usize>,
        #[serde(default = "one")]
        volume_stride: usize,
    },
}

fn one() -> usize {
    1
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthSpec::default())
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default)]
    pub source: DataSource,
    /// balance classes by augmentation before training (cross-validation
    /// always balances per fold instead)
    #[serde(default = "yes")]
    pub balance: bool,
    #[serde(default)]
    pub augment: AugmentPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::default(),
            balance: true,
            augment: AugmentPolicy::default(),
        }
    }
}

fn d_k() -> usize {
    3
}
fn d_seed() -> u64 {
    7
}
fn d_epochs() -> usize {
    20
}
fn d_batch() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolConfig {
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            k: d_k(),
            seed: d_seed(),
            epochs: d_epochs(),
            max_steps: None,
            batch_size: d_batch(),
        }
    }
}

fn d_output() -> PathBuf {
    PathBuf::from("runs/out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ViTConfig,
    #[serde(default)]
    pub loss: JointLossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default = "d_output")]
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ViTConfig::default(),
            loss: JointLossConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            protocol: ProtocolConfig::default(),
            output: d_output(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))
    }

    /// Writes the fully resolved config into the output directory so every
    /// run carries its own reproduction record.
    pub fn archive(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.output)
            .with_context(|| format!("cannot create {}", self.output.display()))?;
        let path = self.output.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }
}
