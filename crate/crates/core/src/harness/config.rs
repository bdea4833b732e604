use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{apply_domain_shift, DomainShift, SyntheticTaskSpec, WorldConfig};
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, PretextConfig};
use crate::steering::SteeringConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub seed: u64,
    /// Warm-up on pretext tasks; `null` leaves the backbone random.
    pub pretext: Option<PretextConfig>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretext: Some(PretextConfig::default()),
        }
    }
}

/// One unseen target domain derived from the source task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub name: String,
    #[serde(default)]
    pub shift: DomainShift,
    #[serde(default)]
    pub class_subset: Option<Vec<usize>>,
}

/// Everything a harness command needs; the JSON config file mirrors it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub world: WorldConfig,
    pub backbone: BackboneConfig,
    pub steering: SteeringConfig,
    pub train: TrainConfig,
    /// Source task for few-shot and domain-generalization runs.
    pub task: SyntheticTaskSpec,
    pub targets: Vec<TargetSpec>,
    /// Examples per evaluation set, split evenly over present classes.
    pub eval_examples: usize,
    /// Per-class size of the pool support sets are drawn from.
    pub support_pool: usize,
    pub seeds: Vec<u64>,
}

pub fn default_task() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        classes: 4,
        prototype_seed: 2,
        noise_sigma: 0.5,
        nuisance_dims: 3,
        nuisance_scale: 3.0,
        naming_noise: 1.0,
        shift: DomainShift::NONE,
        class_subset: None,
    }
}

pub fn default_targets() -> Vec<TargetSpec> {
    vec![
        TargetSpec {
            name: "rotated".into(),
            shift: DomainShift {
                rotation_deg: 30.0,
                ..DomainShift::NONE
            },
            class_subset: None,
        },
        TargetSpec {
            name: "biased".into(),
            shift: DomainShift {
                bias_scale: 0.5,
                noise_multiplier: 1.25,
                ..DomainShift::NONE
            },
            class_subset: None,
        },
        TargetSpec {
            name: "subset".into(),
            shift: DomainShift {
                noise_multiplier: 1.5,
                ..DomainShift::NONE
            },
            class_subset: Some(vec![0, 1, 2]),
        },
    ]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            world: WorldConfig::default(),
            backbone: BackboneConfig::default(),
            steering: SteeringConfig::default(),
            train: TrainConfig::default(),
            task: default_task(),
            targets: default_targets(),
            eval_examples: 500,
            support_pool: 64,
            seeds: vec![0, 1, 2],
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.steering.validate(self.encoder.layers)?;
        self.train.validate()?;
        self.task.validate()?;
        for t in &self.targets {
            self.target(t)?;
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.eval_examples == 0 {
            return Err(Error::Config("eval_examples must be >= 1".into()));
        }
        if self.support_pool < self.train.shots {
            return Err(Error::Config(format!(
                "support_pool {} smaller than {} shots",
                self.support_pool, self.train.shots
            )));
        }
        Ok(())
    }

    pub fn target(&self, t: &TargetSpec) -> Result<SyntheticTaskSpec> {
        apply_domain_shift(&self.task, t.shift, t.class_subset.clone())
    }
}
