use serde::{Deserialize, Serialize};

use super::{classify, encode, init_backbone, EncoderConfig, ModelParams};
use crate::data::{generate_task, prompt_tokens, stack_images, SyntheticTaskSpec, SyntheticWorld};
use crate::error::Result;
use crate::steering::SteeringConfig;
use crate::tensor::Tape;
use crate::train::{adam_step, cross_entropy, AdamConfig, AdamState};

/// Pretext prototype seeds start here, far above any task seed.
pub const PRETEXT_SEED_BASE: u64 = 1 << 48;

/// Warm-up that aligns a random backbone on a stream of throwaway tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretextConfig {
    pub steps: usize,
    /// Classes per pretext batch.
    pub classes: usize,
    pub per_class: usize,
    pub noise_sigma: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            classes: 8,
            per_class: 2,
            noise_sigma: 0.3,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

impl PretextConfig {
    /// The pretext task drawn at `step`; its prototypes never coincide with
    /// a task whose prototype seed is below [`PRETEXT_SEED_BASE`].
    pub fn task(&self, step: usize) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            classes: self.classes,
            prototype_seed: PRETEXT_SEED_BASE + self.seed.wrapping_mul(1 << 20) + step as u64,
            noise_sigma: self.noise_sigma,
            nuisance_dims: 0,
            nuisance_scale: 1.0,
            naming_noise: 0.0,
            shift: Default::default(),
            class_subset: None,
        }
    }
}

/// Trains every backbone tensor to match images with their prompts on
/// pretext tasks, then freezes the backbone again. Returns the per-step loss.
pub fn pre_align(
    model: &mut ModelParams,
    world: &SyntheticWorld,
    cfg: &PretextConfig,
) -> Result<Vec<f64>> {
    model.set_backbone_trainable(true);
    let frozen = SteeringConfig {
        d: 0,
        ..SteeringConfig::default()
    };
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut state = AdamState::new(model.named().iter().map(|(_, t)| *t));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let spec = cfg.task(step);
        let data = generate_task(world, &spec, cfg.per_class, cfg.seed ^ step as u64)?;
        let (prompts, eos) = prompt_tokens(world, &spec)?;
        let refs: Vec<_> = data.iter().collect();
        let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let enc = encode(
            &bound,
            tape.constant(stack_images(&refs)?),
            tape.constant(prompts),
            &eos,
            &frozen,
        )?;
        let loss = cross_entropy(
            classify(enc.image, enc.text, bound.log_temperature)?,
            &labels,
        )?;
        let grads = tape.backward(loss)?;
        for (var, (_, t)) in bound.vars().into_iter().zip(model.named_mut()) {
            if t.requires_grad() {
                t.zero_grad();
                grads.accumulate_into(var, t)?;
            }
        }
        losses.push(loss.item()?);
        let mut params: Vec<_> = model.named_mut().into_iter().map(|(_, t)| t).collect();
        adam_step(&mut params, &mut state, &adam)?;
    }
    model.set_backbone_trainable(false);
    for (_, t) in model.named_mut() {
        t.zero_grad();
    }
    Ok(losses)
}

/// Random backbone from `seed`, pre-aligned on `world` when `pretext` is set.
pub fn build_backbone(
    cfg: &EncoderConfig,
    world: &SyntheticWorld,
    seed: u64,
    pretext: Option<&PretextConfig>,
) -> Result<ModelParams> {
    let mut model = init_backbone(cfg, seed)?;
    if let Some(p) = pretext {
        pre_align(&mut model, world, p)?;
    }
    Ok(model)
}
