//! Toy CLIP-style dual encoder with steering adapters in its first layers.
//!
//! Both encoders are pre-LN transformers. The vision class token sits at
//! position 0; the text summary token is the last prompt token. Final
//! features go through a frozen projection head and are L2-normalized, and
//! logits are temperature-scaled cosines.

mod checkpoint;
mod config;
mod pretrain;
mod weights;

pub use config::EncoderConfig;
pub use pretrain::{build_backbone, pre_align, PretextConfig};
pub use weights::{EncoderHead, EncoderWeights, LayerWeights};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::data::{rng_stream, stack_images, LabeledExample};
use crate::error::{Error, Result};
use crate::steering::{adapter_forward, AdapterLayerParams, SteeringConfig};
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const NORM_TOLERANCE: f64 = 1e-6;

/// Frozen backbone, steering adapters and the logit temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub vision: EncoderWeights,
    pub text: EncoderWeights,
    pub adapters: Vec<AdapterLayerParams>,
    /// `[1]`, fixed at ln 20 unless made trainable.
    pub log_temperature: Tensor,
}

/// A model's parameters as leaves of one tape.
pub struct BoundModel<'t> {
    pub config: EncoderConfig,
    pub vision: EncoderWeights<Var<'t>>,
    pub text: EncoderWeights<Var<'t>>,
    pub adapters: Vec<AdapterLayerParams<Var<'t>>>,
    pub log_temperature: Var<'t>,
}

/// Deterministic random backbone without adapters.
pub fn init_backbone(cfg: &EncoderConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = rng_stream(seed, 0);
    let vision = EncoderWeights::init(
        cfg.layers,
        cfg.d_vision,
        cfg.p_vision,
        cfg.hidden_mult,
        cfg.embed_dim,
        &mut rng,
    );
    let text = EncoderWeights::init(
        cfg.layers,
        cfg.d_text,
        cfg.p_text,
        cfg.hidden_mult,
        cfg.embed_dim,
        &mut rng,
    );
    Ok(ModelParams {
        config: *cfg,
        vision,
        text,
        adapters: Vec::new(),
        log_temperature: Tensor::from_vec(vec![20f64.ln()]),
    })
}

impl ModelParams {
    /// Replaces the adapters with `steering.d` freshly initialized layers.
    pub fn attach_adapters(&mut self, steering: &SteeringConfig, seed: u64) -> Result<()> {
        steering.validate(self.config.layers)?;
        let mut rng = rng_stream(seed, 5);
        self.adapters = (0..steering.d)
            .map(|_| {
                AdapterLayerParams::init(
                    self.config.d_vision,
                    self.config.d_text,
                    steering.r,
                    &mut rng,
                )
            })
            .collect();
        Ok(())
    }

    pub fn set_temperature_trainable(&mut self, trainable: bool) {
        self.log_temperature.set_requires_grad(trainable);
    }

    pub fn temperature_trainable(&self) -> bool {
        self.log_temperature.requires_grad()
    }

    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        for (_, t) in self.backbone_mut() {
            t.set_requires_grad(trainable);
        }
    }

    fn backbone(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.vision.named("vision");
        out.extend(self.text.named("text"));
        out
    }

    fn backbone_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.vision.named_mut("vision");
        out.extend(self.text.named_mut("text"));
        out
    }

    /// Every parameter tensor with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone();
        for (i, layer) in self.adapters.iter().enumerate() {
            for (m, adapter) in [("vision", &layer.vision), ("text", &layer.text)] {
                out.extend(
                    adapter
                        .fields()
                        .into_iter()
                        .map(|(n, t)| (format!("adapter{i}.{m}.{n}"), t)),
                );
            }
        }
        out.push(("log_temperature".into(), &self.log_temperature));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.vision.named_mut("vision");
        out.extend(self.text.named_mut("text"));
        for (i, layer) in self.adapters.iter_mut().enumerate() {
            for (m, adapter) in [("vision", &mut layer.vision), ("text", &mut layer.text)] {
                out.extend(
                    adapter
                        .fields_mut()
                        .into_iter()
                        .map(|(n, t)| (format!("adapter{i}.{m}.{n}"), t)),
                );
            }
        }
        out.push(("log_temperature".into(), &mut self.log_temperature));
        out
    }

    /// Hash over every backbone tensor's shape and bits.
    pub fn backbone_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.backbone() {
            name.hash(&mut h);
            t.fingerprint().hash(&mut h);
        }
        h.finish()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.named()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        BoundModel {
            config: self.config,
            vision: self.vision.bind(tape),
            text: self.text.bind(tape),
            adapters: self.adapters.iter().map(|a| a.bind(tape)).collect(),
            log_temperature: tape.leaf(&self.log_temperature),
        }
    }

    /// Logits `[B, C]` for a batch of images, without recording gradients.
    pub fn logits(
        &self,
        images: &Tensor,
        prompts: &Tensor,
        eos: &[usize],
        steering: &SteeringConfig,
    ) -> Result<Tensor> {
        let tape = Tape::inference();
        let bound = self.bind(&tape);
        let enc = encode(
            &bound,
            tape.constant(images.clone()),
            tape.constant(prompts.clone()),
            eos,
            steering,
        )?;
        Ok(classify(enc.image, enc.text, bound.log_temperature)?.value())
    }

    /// Predicted class per example, evaluated in batches of `batch`.
    pub fn predict(
        &self,
        examples: &[LabeledExample],
        prompts: &Tensor,
        eos: &[usize],
        steering: &SteeringConfig,
        batch: usize,
    ) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(examples.len());
        let refs: Vec<&LabeledExample> = examples.iter().collect();
        for chunk in refs.chunks(batch.max(1)) {
            let logits = self.logits(&stack_images(chunk)?, prompts, eos, steering)?;
            let c = logits.shape()[1];
            out.extend(logits.data().chunks(c).map(argmax));
        }
        Ok(out)
    }

    /// Accuracy in percent over `examples`.
    pub fn accuracy(
        &self,
        examples: &[LabeledExample],
        prompts: &Tensor,
        eos: &[usize],
        steering: &SteeringConfig,
    ) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Data("cannot evaluate on an empty set".into()));
        }
        let pred = self.predict(examples, prompts, eos, steering, 100)?;
        let hits = pred
            .iter()
            .zip(examples)
            .filter(|(p, e)| **p == e.label)
            .count();
        Ok(100.0 * hits as f64 / examples.len() as f64)
    }
}

impl<'t> BoundModel<'t> {
    /// Leaves in the same order as [`ModelParams::named`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out: Vec<Var<'t>> = self.vision.named("").into_iter().map(|(_, v)| *v).collect();
        out.extend(self.text.named("").into_iter().map(|(_, v)| *v));
        for layer in &self.adapters {
            out.extend(layer.vision.fields().into_iter().map(|(_, v)| *v));
            out.extend(layer.text.fields().into_iter().map(|(_, v)| *v));
        }
        out.push(self.log_temperature);
        out
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn affine_norm<'t>(x: Var<'t>, g: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    x.layer_norm(LN_EPS)?.mul(g)?.add(b)
}

fn attention<'t>(x: Var<'t>, w: &LayerWeights<Var<'t>>, heads: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let (b, p, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let qkv = x.matmul(w.w_qkv)?.add(w.b_qkv)?;
    let split = |i: usize| -> Result<Var<'t>> {
        qkv.narrow(2, i * d, d)?
            .reshape(&[b, p, heads, dh])?
            .permute(&[0, 2, 1, 3])
    };
    let (q, k, v) = (split(0)?, split(1)?, split(2)?);
    let scores = q
        .matmul(k.transpose()?)?
        .mul_scalar(1.0 / (dh as f64).sqrt())?
        .softmax()?;
    scores
        .matmul(v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, p, d])?
        .matmul(w.w_o)?
        .add(w.b_o)
}

/// One frozen pre-LN block on `[B, P, D]` tokens.
pub fn transformer_layer<'t>(
    x: Var<'t>,
    w: &LayerWeights<Var<'t>>,
    heads: usize,
) -> Result<Var<'t>> {
    let h = x.add(attention(affine_norm(x, w.ln1_g, w.ln1_b)?, w, heads)?)?;
    let ff = affine_norm(h, w.ln2_g, w.ln2_b)?
        .matmul(w.w_ff1)?
        .add(w.b_ff1)?
        .gelu()?
        .matmul(w.w_ff2)?
        .add(w.b_ff2)?;
    h.add(ff)
}

fn l2_normalize(x: Var<'_>) -> Result<Var<'_>> {
    let norm = x.square()?.sum_axes(&[1], true)?.sqrt()?;
    x.div(norm)
}

fn project<'t>(tokens: Var<'t>, head: &EncoderHead<Var<'t>>) -> Result<Var<'t>> {
    let d = tokens.shape()[2];
    let rows = tokens.shape()[0];
    let pooled = tokens.reshape(&[rows, d])?;
    l2_normalize(affine_norm(pooled, head.ln_final_g, head.ln_final_b)?.matmul(head.proj)?)
}

/// Output of [`encode`].
#[derive(Clone, Copy, Debug)]
pub struct Encoded<'t> {
    /// `[B, E]`, unit rows.
    pub image: Var<'t>,
    /// `[C, E]`, unit rows.
    pub text: Var<'t>,
    /// Mean of the per-layer regularizers; exactly zero when nothing is gated.
    pub kl: Var<'t>,
}

/// Runs both encoders, steering the first `steering.d` layers.
pub fn encode<'t>(
    model: &BoundModel<'t>,
    images: Var<'t>,
    prompts: Var<'t>,
    eos: &[usize],
    steering: &SteeringConfig,
) -> Result<Encoded<'t>> {
    let cfg = &model.config;
    steering.validate(cfg.layers)?;
    if model.adapters.len() < steering.d {
        return Err(Error::Config(format!(
            "{} adapter layers present, {} requested",
            model.adapters.len(),
            steering.d
        )));
    }
    let (is, ps) = (images.shape(), prompts.shape());
    if is.len() != 3 || is[1..] != [cfg.p_vision, cfg.d_vision] {
        return Err(Error::shapes(
            "image tokens",
            &is,
            &[0, cfg.p_vision, cfg.d_vision],
        ));
    }
    if ps.len() != 3 || ps[1..] != [cfg.p_text, cfg.d_text] || eos.len() != ps[0] {
        return Err(Error::shapes(
            "prompt tokens",
            &ps,
            &[eos.len(), cfg.p_text, cfg.d_text],
        ));
    }

    let mut v = images.add(model.vision.head.pos_embed)?;
    let mut t = prompts.add(model.text.head.pos_embed)?;
    let mut kl_sum: Option<Var<'t>> = None;
    for n in 0..cfg.layers {
        v = transformer_layer(v, &model.vision.layers[n], cfg.heads)?;
        t = transformer_layer(t, &model.text.layers[n], cfg.heads)?;
        if n >= steering.d {
            continue;
        }
        let adapter = &model.adapters[n];
        let out = adapter_forward(v, t, adapter, steering, eos)?;
        if let Some(dv) = out.delta_vision {
            v = v.add(adapter.vision.alpha_raw.sigmoid()?.mul(dv)?)?;
        }
        if let Some(dt) = out.delta_text {
            t = t.add(adapter.text.alpha_raw.sigmoid()?.mul(dt)?)?;
        }
        if let Some(kl) = out.kl {
            kl_sum = Some(match kl_sum {
                Some(acc) => acc.add(kl)?,
                None => kl,
            });
        }
    }
    let tape = images.tape();
    let kl = match kl_sum {
        Some(total) => total.mul_scalar(1.0 / steering.d as f64)?,
        None => tape.scalar(0.0),
    };
    let image = project(v.narrow(1, 0, 1)?, &model.vision.head)?;
    let text = project(t.gather_tokens(eos)?, &model.text.head)?;
    Ok(Encoded { image, text, kl })
}

/// `exp(log_temperature) · image · textᵀ` for unit-norm feature rows.
pub fn classify<'t>(image: Var<'t>, text: Var<'t>, log_temperature: Var<'t>) -> Result<Var<'t>> {
    for (what, feat) in [("image", image), ("text", text)] {
        let shape = feat.shape();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "{what} features must be 2-D, got {shape:?}"
            )));
        }
        let width = shape[1];
        let worst = feat.with_values(|vals| {
            vals.chunks(width)
                .map(|row| (row.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs())
                .fold(0.0, f64::max)
        });
        if !(worst <= NORM_TOLERANCE) {
            return Err(Error::Contract(format!(
                "{what} features not unit-norm (deviation {worst:e})"
            )));
        }
    }
    image.matmul(text.transpose()?)?.mul(log_temperature.exp()?)
}

#[cfg(test)]
mod tests;
