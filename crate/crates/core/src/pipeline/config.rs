//! Experiment configuration (TOML).
//!
//! ```toml
//! seed = 7
//! patch_size = 32
//! batch_size = 2
//!
//! [phases]
//! search = true
//! meta = true
//! joint = true
//!
//! [search]
//! epochs = 4
//!
//! [[data.tasks]]
//! id = "ivif"
//! synthetic = { style = "infrared-visible", pairs = 4, size = 64 }
//!
//! [[data.tasks]]
//! id = "own"
//! dir = "data/own"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ias::SearchConfig;
use crate::losses::{FeatureWeightMode, LossWeights};
use crate::metrics::MetricConfig;
use crate::pmi::MetaConfig;
use crate::search_space::{LatencyTable, SearchSpaceConfig};

use super::ingest::{ingest, ImagePair};
use super::patch::Augment;
use super::synth::{synthesize, SynthStyle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Square training patch side.
    pub patch_size: usize,
    pub batch_size: usize,
    pub augment: Augment,
    pub phases: PhaseToggles,
    /// Substitute random architectures / initializations for skipped
    /// phases instead of failing.
    pub fallbacks: bool,
    pub space: SearchSpaceConfig,
    /// Optional TOML table `id = latency`; overrides synthetic and
    /// in-space entries.
    pub latency_table: Option<PathBuf>,
    pub search: SearchConfig,
    pub meta: MetaConfig,
    pub joint: JointConfig,
    pub losses: LossWeights,
    pub metrics: MetricConfig,
    pub data: DataConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseToggles {
    pub search: bool,
    pub meta: bool,
    pub joint: bool,
}

impl Default for PhaseToggles {
    fn default() -> Self {
        Self {
            search: true,
            meta: true,
            joint: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Keep the fusion parameters fixed and train the task head only.
    pub freeze_fusion: bool,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-4,
            optimizer: Optimizer::Adam,
            freeze_fusion: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Fraction of each task's patches held out for validation.
    pub val_fraction: f64,
    /// Task used by the joint phase; the first task when unset.
    pub joint_task: Option<String>,
    pub tasks: Vec<TaskSource>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.25,
            joint_task: None,
            tasks: vec![
                TaskSource::synthetic("ivif", SynthStyle::InfraredVisible, 8, 64),
                TaskSource::synthetic("mif", SynthStyle::MedicalLike, 8, 64),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSource {
    pub id: String,
    /// Free-form modality label; defaults to the synthetic style or `custom`.
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Held-out pairs; when absent the validation split is carved from
    /// `dir` using `val_fraction`.
    #[serde(default)]
    pub val_dir: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub style: SynthStyle,
    pub pairs: usize,
    pub size: usize,
}

impl TaskSource {
    pub fn synthetic(id: &str, style: SynthStyle, pairs: usize, size: usize) -> Self {
        Self {
            id: id.into(),
            kind: None,
            dir: None,
            val_dir: None,
            synthetic: Some(SyntheticSource { style, pairs, size }),
        }
    }

    pub fn kind(&self) -> String {
        match (&self.kind, &self.synthetic) {
            (Some(k), _) => k.clone(),
            (None, Some(s)) => s.style.name().to_string(),
            (None, None) => "custom".to_string(),
        }
    }

    /// Loads (or renders) the task's pairs; synthetic data is seeded by
    /// the experiment seed and the task's position.
    pub fn load(&self, seed: u64, index: usize, base: &Path) -> Result<Vec<ImagePair>> {
        match (&self.dir, &self.synthetic) {
            (Some(dir), None) => ingest(&base.join(dir)),
            (None, Some(s)) => synthesize(
                s.style,
                s.pairs,
                s.size,
                s.size,
                seed.wrapping_add(1000 + index as u64),
            ),
            _ => Err(Error::Config(format!(
                "task `{}` needs exactly one of `dir` or `synthetic`",
                self.id
            ))),
        }
    }

    pub fn load_val(&self, base: &Path) -> Result<Option<Vec<ImagePair>>> {
        self.val_dir
            .as_ref()
            .map(|d| ingest(&base.join(d)))
            .transpose()
    }
}

/// The task list read by `meta-init --tasks`: one `[[tasks]]` table per
/// task with `id`, `dir`, `val_dir` and `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub tasks: Vec<TaskSource>,
}

impl TaskManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if manifest.tasks.is_empty() {
            return Err(Error::Config(format!(
                "{}: no tasks listed",
                path.display()
            )));
        }
        // Relative directories are resolved against the manifest's folder.
        let root = path.parent().unwrap_or(Path::new("."));
        let tasks = manifest
            .tasks
            .into_iter()
            .map(|mut t| {
                t.dir = t.dir.map(|d| root.join(d));
                t.val_dir = t.val_dir.map(|d| root.join(d));
                t
            })
            .collect();
        Ok(Self { tasks })
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            patch_size: 64,
            batch_size: 4,
            augment: Augment {
                flip: true,
                rotate: true,
            },
            phases: PhaseToggles::default(),
            fallbacks: true,
            space: SearchSpaceConfig::default(),
            latency_table: None,
            search: SearchConfig::default(),
            meta: MetaConfig::default(),
            joint: JointConfig::default(),
            losses: LossWeights::default(),
            metrics: MetricConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "patch_size and batch_size must be positive".into(),
            ));
        }
        if !(0.0 < self.data.val_fraction && self.data.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.data.val_fraction
            )));
        }
        if self.data.tasks.is_empty() {
            return Err(Error::Config("at least one data task is required".into()));
        }
        let mut ids: Vec<&str> = self.data.tasks.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("task ids must be unique".into()));
        }
        if let Some(j) = &self.data.joint_task {
            if !ids.contains(&j.as_str()) {
                return Err(Error::Config(format!(
                    "joint_task `{j}` is not a configured task"
                )));
            }
        }
        for t in &self.data.tasks {
            if t.val_dir.is_some() && t.dir.is_none() {
                return Err(Error::Config(format!(
                    "task `{}`: val_dir requires dir",
                    t.id
                )));
            }
            if let Some(s) = &t.synthetic {
                if s.size < self.patch_size {
                    return Err(Error::Config(format!(
                        "task `{}`: synthetic size {} is smaller than patch_size {}",
                        t.id, s.size, self.patch_size
                    )));
                }
            }
        }
        if !(self.joint.lr > 0.0) {
            return Err(Error::Config("joint.lr must be positive".into()));
        }
        if self.losses.feature_weights == FeatureWeightMode::External {
            return Err(Error::Config(
                "feature_weights = external needs a FeatureWeighting supplied through the library API; the pipeline only runs gradient weights".into(),
            ));
        }
        self.search.validate()?;
        self.meta.validate()?;
        self.losses.validate()
    }

    /// Synthetic costs, overridden by the space's `[latency]` entries and
    /// then by the external table.
    pub fn latency(&self, base: &Path) -> Result<LatencyTable> {
        let mut entries = LatencyTable::synthetic(&self.space)?.entries().clone();
        entries.extend(self.space.latency.clone());
        if let Some(path) = &self.latency_table {
            let path = base.join(path);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let table: BTreeMap<String, f64> = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            entries.extend(table);
        }
        LatencyTable::new(entries)
    }

    pub fn joint_task(&self) -> &TaskSource {
        match &self.data.joint_task {
            Some(id) => self
                .data
                .tasks
                .iter()
                .find(|t| &t.id == id)
                .expect("validated"),
            None => &self.data.tasks[0],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = ExperimentConfig::from_toml(
            "seed = 3\npatch_size = 16\n[search]\nepochs = 2\n[[data.tasks]]\nid = \"t\"\nsynthetic = { style = \"medical-like\", pairs = 2, size = 16 }\n",
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.search.epochs, 2);
        assert_eq!(c.search.inner_steps, SearchConfig::default().inner_steps);
        assert_eq!(c.joint_task().kind(), "medical-like");
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            seed: 1,
            ..a.clone()
        };
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn patch_larger_than_images_rejected() {
        let c = ExperimentConfig {
            patch_size: 128,
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("sed = 3").is_err());
    }
}
