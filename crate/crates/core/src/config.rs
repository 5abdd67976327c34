//! Run configuration: one TOML file with a section per component.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{build_backbone, BackboneConfig};
use crate::conflict::PairMode;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::tasks::{make_opposing_pair, make_separated, make_spectrum, ConditionFeaturizer, PairKind, TaskSpec};
use crate::train::{Experiment, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    ScalePair,
    RotationPair,
    /// `count` tasks on disjoint coordinate blocks.
    Separated,
    /// `count` tasks in `clusters` groups of shared edit directions.
    Spectrum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub family: TaskFamily,
    pub strength: f64,
    pub count: usize,
    pub clusters: usize,
    pub jitter: f64,
    pub opposed: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            family: TaskFamily::ScalePair,
            strength: 0.5,
            count: 2,
            clusters: 2,
            jitter: 0.2,
            opposed: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Token segment width; the gcd of module dimensions when absent.
    pub segment: Option<usize>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 4, segment: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaticTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for StaticTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            lr: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConflictConfig {
    pub samples_per_task: usize,
    /// Evaluate at the truncated-identity point (`true`) or the all-zero one.
    pub identity_point: bool,
    pub pairing: PairMode,
    pub clusters: usize,
    /// Arms trained by `conflict-suite` for the static baselines.
    pub static_arms: StaticTrainConfig,
}

impl Default for ConflictConfig {
    fn default() -> Self {
        Self {
            samples_per_task: 64,
            identity_point: true,
            pairing: PairMode::Matched,
            clusters: 2,
            static_arms: StaticTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifoldConfig {
    pub samples_per_task: usize,
    pub projection_dim: usize,
    pub clusters: usize,
    pub neighbors: usize,
    /// Independently optimized adapters per task for the spread comparison.
    pub optimized_seeds: usize,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        Self {
            samples_per_task: 100,
            projection_dim: 512,
            clusters: 4,
            neighbors: 5,
            optimized_seeds: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub tasks: TaskConfig,
    pub adapter: AdapterConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub conflict: ConflictConfig,
    pub manifold: ManifoldConfig,
}

impl Default for RunConfig {
    /// The strict-conflict scale pair on a linear width-8 backbone.
    fn default() -> Self {
        let mut backbone = BackboneConfig::linear(8);
        backbone.init_noise = 1e-3;
        let generator = GeneratorConfig::default();
        backbone.instruction_width = generator.condition_width;
        Self {
            seed: 7,
            backbone,
            tasks: TaskConfig::default(),
            adapter: AdapterConfig::default(),
            generator,
            train: TrainConfig {
                steps: 4000,
                ..TrainConfig::default()
            },
            conflict: ConflictConfig::default(),
            manifold: ManifoldConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Parses `text` over the defaults: a partial section keeps the run
    /// defaults for its missing keys, not the section type's own defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.generator.condition_width != self.backbone.instruction_width {
            return Err(Error::Config(format!(
                "generator.condition_width ({}) must equal backbone.instruction_width ({})",
                self.generator.condition_width, self.backbone.instruction_width
            )));
        }
        if self.adapter.rank == 0 || self.backbone.width == 0 || self.backbone.layers == 0 {
            return Err(Error::Config("rank, width and layers must be positive".into()));
        }
        if !self.train.task_mix.is_empty() && self.train.task_mix.len() != self.task_count() {
            return Err(Error::Config("train.task_mix needs one weight per task".into()));
        }
        Ok(())
    }

    pub fn task_count(&self) -> usize {
        match self.tasks.family {
            TaskFamily::ScalePair | TaskFamily::RotationPair => 2,
            _ => self.tasks.count,
        }
    }

    /// Content hash over the canonical (sorted-key JSON) form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn build_tasks(&self) -> Result<(Vec<TaskSpec>, Option<Vec<usize>>)> {
        let (w, c, t, s) = (
            self.backbone.width,
            self.generator.condition_width,
            &self.tasks,
            self.seed,
        );
        Ok(match t.family {
            TaskFamily::ScalePair | TaskFamily::RotationPair => {
                let kind = if t.family == TaskFamily::ScalePair {
                    PairKind::ScalePair
                } else {
                    PairKind::RotationPair
                };
                let (p, m) = make_opposing_pair(kind, w, t.strength, c, s)?;
                (vec![p, m], None)
            }
            TaskFamily::Separated => (make_separated(t.count, w, t.strength, c, s)?, None),
            TaskFamily::Spectrum => {
                let sp = make_spectrum(t.count, t.clusters, w, t.strength, t.jitter, t.opposed, c, s)?;
                (sp.tasks, Some(sp.clusters))
            }
        })
    }

    pub fn experiment(&self) -> Result<Experiment> {
        self.validate()?;
        let backbone = build_backbone(&self.backbone, self.seed)?;
        let layout = Arc::new(backbone.adapter_layout(self.adapter.rank, self.adapter.segment)?);
        let (tasks, _) = self.build_tasks()?;
        Ok(Experiment {
            featurizer: ConditionFeaturizer::new(self.backbone.width, self.generator.condition_width, self.seed),
            backbone,
            tasks,
            layout,
            generator: self.generator.clone(),
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[train]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.backbone, RunConfig::default().backbone);
    }

    #[test]
    fn partial_section_keeps_run_defaults() {
        let cfg = RunConfig::from_toml("[backbone]\nwidth = 6\n").unwrap();
        assert_eq!(cfg.backbone.width, 6);
        assert!(cfg.backbone.is_linear_mode());
        assert_eq!(cfg.backbone.instruction_width, cfg.generator.condition_width);
        assert!(RunConfig::from_toml("[backbone]\nwdth = 6\n").is_err());
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nsteps = -1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nsteps = 0"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content_only() {
        let a = RunConfig::default();
        let b = RunConfig::from_toml(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), a.clone().with_seed(8).hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn default_experiment_is_the_scale_pair() {
        let exp = RunConfig::default().experiment().unwrap();
        assert_eq!(exp.tasks.len(), 2);
        assert_eq!(exp.layout.token_shape(), [1, 2, 4, 8]);
        assert!(exp.backbone.config().is_linear_mode());
    }
}
