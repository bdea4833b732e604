//! Few-shot optimization of the steering adapters.

mod adam;

pub use adam::{adam_step, AdamConfig, AdamState};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{rng_stream, stack_images, LabeledExample};
use crate::error::{Error, Result};
use crate::model::{classify, encode, ModelParams};
use crate::steering::SteeringConfig;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda_kl: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Examples per class in the support set.
    pub shots: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 7.5e-4,
            batch_size: 16,
            lambda_kl: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            shots: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.adam_eps];
        if self.epochs == 0 || self.batch_size == 0 || self.shots == 0 {
            return Err(Error::Config(
                "epochs, batch_size and shots must be >= 1".into(),
            ));
        }
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(
                "learning_rate and adam_eps must be positive".into(),
            ));
        }
        if !(self.lambda_kl >= 0.0) || !self.lambda_kl.is_finite() {
            return Err(Error::Config(format!(
                "lambda_kl must be >= 0, got {}",
                self.lambda_kl
            )));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("Adam beta {b} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn steps_per_epoch(&self, support_len: usize) -> usize {
        support_len.div_ceil(self.batch_size)
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shapes("cross_entropy", &shape, &[labels.len(), 0]));
    }
    let c = shape[1];
    let mut mask = vec![0.0; labels.len() * c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::Data(format!(
                "label {l} out of range for {c} classes"
            )));
        }
        mask[i * c + l] = 1.0;
    }
    let mask = logits.tape().constant(Tensor::new(&shape, mask)?);
    logits
        .log_softmax()?
        .mul(mask)?
        .sum()?
        .mul_scalar(-1.0 / labels.len() as f64)
}

pub fn total_loss<'t>(ce: Var<'t>, kl: Var<'t>, lambda_kl: f64) -> Result<Var<'t>> {
    if lambda_kl == 0.0 {
        return Ok(ce);
    }
    ce.add(kl.mul_scalar(lambda_kl)?)
}

/// Mean losses over one epoch's steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,ce,kl,total\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.8},{:.8},{:.8}\n",
            r.epoch, r.ce, r.kl, r.total
        ));
    }
    out
}

/// Losses and gradient of one batch; gradients land in `model`'s trainable
/// tensors.
fn step(
    model: &mut ModelParams,
    batch: &[&LabeledExample],
    prompts: &Tensor,
    eos: &[usize],
    cfg: &TrainConfig,
    steering: &SteeringConfig,
) -> Result<(f64, f64, f64)> {
    let images = stack_images(batch)?;
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let enc = encode(
        &bound,
        tape.constant(images),
        tape.constant(prompts.clone()),
        eos,
        steering,
    )?;
    let logits = classify(enc.image, enc.text, bound.log_temperature)?;
    let ce = cross_entropy(logits, &labels)?;
    let loss = total_loss(ce, enc.kl, cfg.lambda_kl)?;
    let grads = tape.backward(loss)?;
    for (var, (_, t)) in bound.vars().into_iter().zip(model.named_mut()) {
        if t.requires_grad() {
            t.zero_grad();
            grads.accumulate_into(var, t)?;
        }
    }
    Ok((ce.item()?, enc.kl.item()?, loss.item()?))
}

/// Trains the adapters (and a trainable temperature) of `model` on
/// `support` for `cfg.epochs` epochs.
///
/// Batches follow a per-epoch shuffle seeded by `cfg.seed`; the last partial
/// batch is kept.
pub fn train(
    model: &ModelParams,
    support: &[LabeledExample],
    prompts: &Tensor,
    eos: &[usize],
    cfg: &TrainConfig,
    steering: &SteeringConfig,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    cfg.validate()?;
    steering.validate(model.config.layers)?;
    if support.is_empty() {
        return Err(Error::Data("support set is empty".into()));
    }
    if model.adapters.len() < steering.d {
        return Err(Error::Config(format!(
            "model has {} adapter layers, steering needs {}",
            model.adapters.len(),
            steering.d
        )));
    }
    let mut model = model.clone();
    let mut state = AdamState::new(model.named().iter().map(|(_, t)| *t));
    let mut order: Vec<usize> = (0..support.len()).collect();
    let mut rng = rng_stream(cfg.seed, 6);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ce, mut kl, mut total) = (0.0, 0.0, 0.0);
        let steps = cfg.steps_per_epoch(support.len());
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledExample> = idx.iter().map(|&i| &support[i]).collect();
            let (c, k, t) = step(&mut model, &batch, prompts, eos, cfg, steering)?;
            let mut params: Vec<&mut Tensor> =
                model.named_mut().into_iter().map(|(_, t)| t).collect();
            adam_step(&mut params, &mut state, &cfg.adam())?;
            ce += c;
            kl += k;
            total += t;
        }
        let n = steps as f64;
        history.push(EpochRecord {
            epoch,
            ce: ce / n,
            kl: kl / n,
            total: total / n,
        });
    }
    for (_, t) in model.named_mut() {
        t.zero_grad();
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests;
