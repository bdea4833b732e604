use std::path::PathBuf;
use std::time::Instant;

use super::{
    mean_record, round2, AblationVariant, Deltas, ExperimentConfig, RunRecord, TargetAccuracy,
};
use crate::data::{
    generate_task, prompt_tokens, sample_few_shot, LabeledExample, SyntheticTaskSpec,
    SyntheticWorld,
};
use crate::error::{Error, Result};
use crate::model::{build_backbone, ModelParams};
use crate::steering::SteeringConfig;
use crate::tensor::Tensor;
use crate::train::{history_csv, train, TrainConfig};

const POOL_SEED: u64 = 0x5eed_0000;
const EVAL_SEED: u64 = 0xe7a1_0000;

struct EvalSet {
    name: String,
    examples: Vec<LabeledExample>,
}

/// A built backbone plus the fixed evaluation sets of one configuration.
pub struct Harness {
    pub config: ExperimentConfig,
    pub world: SyntheticWorld,
    pub backbone: ModelParams,
    /// Record wall-clock seconds (makes output non-reproducible).
    pub timing: bool,
    /// Directory for per-run loss histories; records reference them relative
    /// to its parent.
    pub history_dir: Option<PathBuf>,
    prompts: Tensor,
    eos: Vec<usize>,
    source: EvalSet,
    targets: Vec<EvalSet>,
}

fn eval_set(
    world: &SyntheticWorld,
    spec: &SyntheticTaskSpec,
    total: usize,
    index: u64,
) -> Result<Vec<LabeledExample>> {
    let per_class = total.div_ceil(spec.present_classes().len());
    generate_task(world, spec, per_class, EVAL_SEED + index)
}

impl Harness {
    /// Validates `config` and builds (and pre-aligns) its backbone.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let world = SyntheticWorld::new(&config.encoder, config.world)?;
        let backbone = build_backbone(
            &config.encoder,
            &world,
            config.backbone.seed,
            config.backbone.pretext.as_ref(),
        )?;
        Self::with_backbone(config, backbone)
    }

    /// Uses an already built backbone, which must match `config.encoder`.
    pub fn with_backbone(config: ExperimentConfig, mut backbone: ModelParams) -> Result<Self> {
        config.validate()?;
        if backbone.config != config.encoder {
            return Err(Error::Config(format!(
                "backbone {:?} does not match encoder config {:?}",
                backbone.config, config.encoder
            )));
        }
        backbone.adapters.clear();
        let world = SyntheticWorld::new(&config.encoder, config.world)?;
        let (prompts, eos) = prompt_tokens(&world, &config.task)?;
        let source = EvalSet {
            name: "source".into(),
            examples: eval_set(&world, &config.task, config.eval_examples, 0)?,
        };
        let targets = config
            .targets
            .iter()
            .enumerate()
            .map(|(i, t)| {
                Ok(EvalSet {
                    name: t.name.clone(),
                    examples: eval_set(
                        &world,
                        &config.target(t)?,
                        config.eval_examples,
                        1 + i as u64,
                    )?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            world,
            backbone,
            timing: false,
            history_dir: None,
            prompts,
            eos,
            source,
            targets,
        })
    }

    pub fn prompts(&self) -> (&Tensor, &[usize]) {
        (&self.prompts, &self.eos)
    }

    pub fn source_eval(&self) -> &[LabeledExample] {
        &self.source.examples
    }

    /// Exactly `shots` examples per class, drawn from a pool that depends
    /// only on `seed`.
    pub fn support(&self, shots: usize, seed: u64) -> Result<Vec<LabeledExample>> {
        let pool = generate_task(
            &self.world,
            &self.config.task,
            self.config.support_pool.max(shots),
            POOL_SEED + seed,
        )?;
        sample_few_shot(&pool, shots, seed)
    }

    fn accuracy(&self, model: &ModelParams, set: &EvalSet, steering: &SteeringConfig) -> Result<f64> {
        Ok(round2(model.accuracy(
            &set.examples,
            &self.prompts,
            &self.eos,
            steering,
        )?))
    }

    fn blank_record(&self, protocol: &str, variant: &str, steering: &SteeringConfig) -> RunRecord {
        RunRecord {
            protocol: protocol.into(),
            variant: variant.into(),
            seed: None,
            shots: 0,
            depth: steering.d,
            rank: steering.r,
            accuracy_id: 0.0,
            accuracy_ood: Vec::new(),
            accuracy_ood_mean: None,
            hm: None,
            deltas: None,
            history: None,
            wall_clock_seconds: None,
            config: self.config.clone(),
        }
    }

    /// The frozen backbone on the source evaluation set.
    pub fn zero_shot(&self, protocol: &str, with_targets: bool) -> Result<RunRecord> {
        let start = Instant::now();
        let frozen = SteeringConfig {
            d: 0,
            ..self.config.steering
        };
        let mut rec = self.blank_record(protocol, "zero_shot", &frozen);
        rec.accuracy_id = self.accuracy(&self.backbone, &self.source, &frozen)?;
        if with_targets {
            rec.set_ood(self.target_accuracies(&self.backbone, &frozen)?)?;
        }
        if self.timing {
            rec.wall_clock_seconds = Some(start.elapsed().as_secs_f64());
        }
        Ok(rec)
    }

    fn target_accuracies(&self, model: &ModelParams, steering: &SteeringConfig) -> Result<Vec<TargetAccuracy>> {
        self.targets
            .iter()
            .map(|t| {
                Ok(TargetAccuracy {
                    name: t.name.clone(),
                    accuracy: self.accuracy(model, t, steering)?,
                })
            })
            .collect()
    }

    /// Trains fresh adapters for one seed and evaluates them.
    pub fn run_one(
        &self,
        protocol: &str,
        variant: &str,
        steering: &SteeringConfig,
        shots: usize,
        seed: u64,
        with_targets: bool,
    ) -> Result<RunRecord> {
        let start = Instant::now();
        let mut model = self.backbone.clone();
        model.attach_adapters(steering, seed)?;
        let mut rec = self.blank_record(protocol, variant, steering);
        rec.seed = Some(seed);
        rec.shots = shots;
        let trained = if steering.d == 0 {
            model
        } else {
            let support = self.support(shots, seed)?;
            let cfg = TrainConfig {
                seed,
                shots,
                ..self.config.train
            };
            let (trained, history) =
                train(&model, &support, &self.prompts, &self.eos, &cfg, steering)?;
            if let Some(dir) = &self.history_dir {
                std::fs::create_dir_all(dir)?;
                let file = format!(
                    "{protocol}_{variant}_k{shots}_d{}_r{}_seed{seed}.csv",
                    steering.d, steering.r
                );
                std::fs::write(dir.join(&file), history_csv(&history))?;
                let dir_name = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                rec.history = Some(format!("{dir_name}/{file}"));
            }
            trained
        };
        rec.accuracy_id = self.accuracy(&trained, &self.source, steering)?;
        if with_targets {
            rec.set_ood(self.target_accuracies(&trained, steering)?)?;
        }
        if self.timing {
            rec.wall_clock_seconds = Some(start.elapsed().as_secs_f64());
        }
        Ok(rec)
    }

    /// Per-seed records followed by their mean.
    fn seeds_and_mean(
        &self,
        protocol: &str,
        variant: &str,
        steering: &SteeringConfig,
        shots: usize,
        seeds: &[u64],
        with_targets: bool,
    ) -> Result<Vec<RunRecord>> {
        if seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seeds = seeds.to_vec();
        seeds.sort_unstable();
        seeds.dedup();
        let mut out = seeds
            .iter()
            .map(|&s| self.run_one(protocol, variant, steering, shots, s, with_targets))
            .collect::<Result<Vec<_>>>()?;
        out.push(mean_record(&out)?);
        Ok(out)
    }
}

/// Zero-shot row, then per-seed and mean rows for each shot count.
pub fn run_fewshot(h: &Harness, shots: &[usize], seeds: &[u64]) -> Result<Vec<RunRecord>> {
    let mut out = vec![h.zero_shot("fewshot", false)?];
    let mut shots = shots.to_vec();
    shots.sort_unstable();
    shots.dedup();
    for k in shots {
        out.extend(h.seeds_and_mean("fewshot", "evi_steer", &h.config.steering, k, seeds, false)?);
    }
    Ok(out)
}

/// Trains on the source task and evaluates on source and every target.
pub fn run_domain_generalization(
    h: &Harness,
    steering: &SteeringConfig,
    variant: &str,
    seeds: &[u64],
) -> Result<Vec<RunRecord>> {
    if h.targets.is_empty() {
        return Err(Error::Config("domain generalization needs at least one target".into()));
    }
    h.seeds_and_mean("domaingen", variant, steering, h.config.train.shots, seeds, true)
}

/// Domain generalization per variant; mean rows carry deltas against `full`,
/// which is always run.
pub fn run_ablation(h: &Harness, variants: &[AblationVariant], seeds: &[u64]) -> Result<Vec<RunRecord>> {
    let mut variants = variants.to_vec();
    variants.push(AblationVariant::Full);
    variants.sort_unstable();
    variants.dedup();
    let mut blocks = Vec::with_capacity(variants.len());
    for v in variants {
        let steering = SteeringConfig {
            components: v.components(h.config.steering.components),
            ..h.config.steering
        };
        blocks.push(h.seeds_and_mean(
            "ablation",
            v.name(),
            &steering,
            h.config.train.shots,
            seeds,
            true,
        )?);
    }
    let full = blocks[0].last().expect("mean row").clone();
    let mut out = Vec::new();
    for mut block in blocks {
        let mean = block.last_mut().expect("mean row");
        mean.deltas = Some(Deltas {
            id: round2(mean.accuracy_id - full.accuracy_id),
            ood: round2(mean.accuracy_ood_mean.unwrap_or(0.0) - full.accuracy_ood_mean.unwrap_or(0.0)),
            hm: round2(mean.hm.unwrap_or(0.0) - full.hm.unwrap_or(0.0)),
        });
        out.extend(block);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Depth,
    Dimension,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Depth => "depth",
            SweepAxis::Dimension => "dimension",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "depth" => Ok(SweepAxis::Depth),
            "dimension" => Ok(SweepAxis::Dimension),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }

    pub fn default_values(self, layers: usize) -> Vec<usize> {
        match self {
            SweepAxis::Depth => (0..=layers).collect(),
            SweepAxis::Dimension => vec![1, 2, 4, 8, 16],
        }
    }
}

/// Domain generalization at each value of `axis`, sorted by value.
pub fn run_sweep(h: &Harness, axis: SweepAxis, values: &[usize], seeds: &[u64]) -> Result<Vec<RunRecord>> {
    let mut values = values.to_vec();
    values.sort_unstable();
    values.dedup();
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let protocol = format!("sweep_{}", axis.name());
    let mut out = Vec::new();
    for v in values {
        let steering = match axis {
            SweepAxis::Depth => SteeringConfig {
                d: v,
                ..h.config.steering
            },
            SweepAxis::Dimension => SteeringConfig {
                r: v,
                ..h.config.steering
            },
        };
        steering.validate(h.config.encoder.layers)?;
        out.extend(h.seeds_and_mean(&protocol, "evi_steer", &steering, h.config.train.shots, seeds, true)?);
    }
    Ok(out)
}
