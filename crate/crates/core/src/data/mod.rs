//! Deterministic synthetic dual-modal classification tasks.
//!
//! A [`SyntheticWorld`] fixes how semantic vectors are rendered into vision
//! patch tokens and how class names are embedded into prompt tokens. It plays
//! the role of the shared modality statistics a pretrained backbone has seen.
//! A [`SyntheticTaskSpec`] then picks task-specific class prototypes in the
//! semantic space, class-irrelevant nuisance directions, imperfect class
//! names and an optional [`DomainShift`].
//!
//! Every generator output is a pure function of its inputs and seeds.

mod io;

pub use io::{load_dataset, save_dataset, DatasetManifest};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::tensor::Tensor;

/// Template tokens preceding the class word ("a photo of a").
pub const TEMPLATE_TOKENS: usize = 4;

pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * normal(rng)).collect::<Vec<f64>>();
    Tensor::from_parts(shape.to_vec(), data)
}

fn gaussian_vec<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| std * normal(rng)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    /// Dimension of the semantic space class prototypes live in.
    pub semantic_dim: usize,
    /// Per-entry patch-token noise, relative to a task's within-class spread.
    pub token_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            semantic_dim: 6,
            token_noise: 0.2,
        }
    }
}

/// Fixed rendering maps shared by every task.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    d_vision: usize,
    d_text: usize,
    p_vision: usize,
    p_text: usize,
    /// One `[S, D_v]` map per patch (the class-token slot has none).
    patch_maps: Vec<Vec<f64>>,
    /// `[S, D_t]`
    word_map: Vec<f64>,
    /// `[P_t, D_t]`, with zeros in the class-word slot.
    template: Vec<f64>,
    /// `[D_v]` direction of additive domain bias.
    bias_direction: Vec<f64>,
}

impl SyntheticWorld {
    pub fn new(encoder: &EncoderConfig, config: WorldConfig) -> Result<Self> {
        encoder.validate()?;
        if config.semantic_dim < 2 {
            return Err(Error::Config("semantic_dim must be >= 2".into()));
        }
        let s = config.semantic_dim;
        let (dv, dt) = (encoder.d_vision, encoder.d_text);
        let mut rng = rng_stream(config.seed, 0);
        let map_std = 1.0 / (s as f64).sqrt();
        let patch_maps = (1..encoder.p_vision)
            .map(|_| gaussian_vec(s * dv, map_std, &mut rng))
            .collect();
        let word_map = gaussian_vec(s * dt, map_std, &mut rng);
        let mut template = gaussian_vec(encoder.p_text * dt, 1.0, &mut rng);
        template[TEMPLATE_TOKENS * dt..(TEMPLATE_TOKENS + 1) * dt].fill(0.0);
        let bias_direction = gaussian_vec(dv, 1.0, &mut rng);
        Ok(Self {
            config,
            d_vision: dv,
            d_text: dt,
            p_vision: encoder.p_vision,
            p_text: encoder.p_text,
            patch_maps,
            word_map,
            template,
            bias_direction,
        })
    }

    pub fn semantic_dim(&self) -> usize {
        self.config.semantic_dim
    }

    pub fn image_shape(&self) -> [usize; 2] {
        [self.p_vision, self.d_vision]
    }

    /// Renders semantic vector `z` into `[P_v, D_v]` patch tokens. Token 0 is
    /// left for the encoder's class embedding.
    fn render<R: Rng + ?Sized>(
        &self,
        z: &[f64],
        nuisance: &[(f64, &[f64])],
        bias_scale: f64,
        spread: f64,
        rng: &mut R,
    ) -> Tensor {
        let (dv, s) = (self.d_vision, self.config.semantic_dim);
        let mut out = vec![0.0; self.p_vision * dv];
        for (p, map) in self.patch_maps.iter().enumerate() {
            let token = &mut out[(p + 1) * dv..(p + 2) * dv];
            for (i, zi) in z.iter().enumerate().take(s) {
                let row = &map[i * dv..(i + 1) * dv];
                token.iter_mut().zip(row).for_each(|(t, m)| *t += zi * m);
            }
            for &(coef, dirs) in nuisance {
                let dir = &dirs[p * dv..(p + 1) * dv];
                token.iter_mut().zip(dir).for_each(|(t, d)| *t += coef * d);
            }
            for (t, b) in token.iter_mut().zip(&self.bias_direction) {
                let eps: f64 = StandardNormal.sample(rng);
                *t += bias_scale * b + self.config.token_noise * spread * eps;
            }
        }
        Tensor::from_parts(vec![self.p_vision, dv], out)
    }

    /// Prompt tokens for a class whose (possibly noisy) name is `name`.
    fn prompt(&self, name: &[f64]) -> Vec<f64> {
        let dt = self.d_text;
        let mut tokens = self.template.clone();
        let slot = &mut tokens[TEMPLATE_TOKENS * dt..(TEMPLATE_TOKENS + 1) * dt];
        for (i, ni) in name.iter().enumerate() {
            let row = &self.word_map[i * dt..(i + 1) * dt];
            slot.iter_mut().zip(row).for_each(|(t, w)| *t += ni * w);
        }
        tokens
    }
}

/// Covariate shift applied when generating target-domain examples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    /// Rotation, about the prototype centroid, of the plane through the
    /// first two class prototypes.
    pub rotation_deg: f64,
    /// Scale of an additive bias on every patch token.
    pub bias_scale: f64,
    /// Multiplier on both within-class and token noise.
    pub noise_multiplier: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::NONE
    }
}

impl DomainShift {
    pub const NONE: DomainShift = DomainShift {
        rotation_deg: 0.0,
        bias_scale: 0.0,
        noise_multiplier: 1.0,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub classes: usize,
    pub prototype_seed: u64,
    /// Within-class spread in the semantic space.
    pub noise_sigma: f64,
    /// Number of class-irrelevant directions mixed into the patches.
    pub nuisance_dims: usize,
    /// Spread along each nuisance direction, relative to `noise_sigma`.
    #[serde(default = "default_nuisance_scale")]
    pub nuisance_scale: f64,
    /// Gap between a class's prototype and the meaning of its prompt.
    #[serde(default)]
    pub naming_noise: f64,
    #[serde(default)]
    pub shift: DomainShift,
    /// Classes present in generated data; prompts always cover all classes.
    #[serde(default)]
    pub class_subset: Option<Vec<usize>>,
}

fn default_nuisance_scale() -> f64 {
    1.0
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need >= 2 classes, got {}",
                self.classes
            )));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise_sigma must be positive, got {}",
                self.noise_sigma
            )));
        }
        let s = &self.shift;
        if ![
            s.rotation_deg,
            s.bias_scale,
            s.noise_multiplier,
            self.nuisance_scale,
            self.naming_noise,
        ]
        .iter()
        .all(|v| v.is_finite())
            || s.noise_multiplier < 0.0
        {
            return Err(Error::Config(format!(
                "non-finite shift or scale in {self:?}"
            )));
        }
        if let Some(subset) = &self.class_subset {
            let mut sorted = subset.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if subset.is_empty()
                || sorted.len() != subset.len()
                || sorted.iter().any(|&c| c >= self.classes)
            {
                return Err(Error::Config(format!("invalid class subset {subset:?}")));
            }
        }
        Ok(())
    }

    /// Labels that appear in generated data, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        match &self.class_subset {
            Some(s) => {
                let mut s = s.clone();
                s.sort_unstable();
                s
            }
            None => (0..self.classes).collect(),
        }
    }
}

/// Target-domain version of `spec`: same prototypes and prompts, with `shift`
/// applied and, optionally, only `class_subset` present.
pub fn apply_domain_shift(
    spec: &SyntheticTaskSpec,
    shift: DomainShift,
    class_subset: Option<Vec<usize>>,
) -> Result<SyntheticTaskSpec> {
    let target = SyntheticTaskSpec {
        shift,
        class_subset: class_subset.or_else(|| spec.class_subset.clone()),
        ..spec.clone()
    };
    target.validate()?;
    Ok(target)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    /// `[P_v, D_v]`
    pub image_tokens: Tensor,
    pub label: usize,
}

/// Task-specific quantities derived from the prototype seed.
struct TaskInstance {
    prototypes: Vec<Vec<f64>>,
    names: Vec<Vec<f64>>,
    nuisance: Vec<Vec<f64>>,
    plane: (Vec<f64>, Vec<f64>, Vec<f64>),
}

impl TaskInstance {
    fn new(world: &SyntheticWorld, spec: &SyntheticTaskSpec) -> Self {
        let s = world.semantic_dim();
        let mut proto_rng = rng_stream(spec.prototype_seed, 1);
        let prototypes: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| gaussian_vec(s, 1.0, &mut proto_rng))
            .collect();
        let mut name_rng = rng_stream(spec.prototype_seed, 2);
        let names = prototypes
            .iter()
            .map(|p| {
                let off = gaussian_vec(s, spec.naming_noise, &mut name_rng);
                p.iter().zip(off).map(|(a, b)| a + b).collect()
            })
            .collect();
        let mut nuis_rng = rng_stream(spec.prototype_seed, 3);
        let per_dir = (world.p_vision - 1) * world.d_vision;
        // Same scale as one semantic axis of a patch map.
        let dir_std = 1.0 / (world.semantic_dim() as f64).sqrt();
        let nuisance = (0..spec.nuisance_dims)
            .map(|_| gaussian_vec(per_dir, dir_std, &mut nuis_rng))
            .collect();
        let plane = rotation_plane(&prototypes);
        Self {
            prototypes,
            names,
            nuisance,
            plane,
        }
    }

    /// Rotates `z` about the prototype centroid within the shift plane.
    fn rotate(&self, z: &mut [f64], cos: f64, sin: f64) {
        let (center, e1, e2) = &self.plane;
        let c1: f64 = z.iter().zip(center).zip(e1).map(|((v, c), e)| (v - c) * e).sum();
        let c2: f64 = z.iter().zip(center).zip(e2).map(|((v, c), e)| (v - c) * e).sum();
        let a = (cos - 1.0) * c1 - sin * c2;
        let b = sin * c1 + (cos - 1.0) * c2;
        for ((v, x), y) in z.iter_mut().zip(e1).zip(e2) {
            *v += a * x + b * y;
        }
    }
}

/// Centroid of the prototypes and an orthonormal basis of the plane through
/// the offsets of the first two prototypes from it.
fn rotation_plane(prototypes: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let s = prototypes[0].len();
    let n = prototypes.len() as f64;
    let center: Vec<f64> = (0..s)
        .map(|i| prototypes.iter().map(|p| p[i]).sum::<f64>() / n)
        .collect();
    let offset = |p: &[f64]| -> Vec<f64> { p.iter().zip(&center).map(|(a, c)| a - c).collect() };
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let unit = |v: Vec<f64>| -> Vec<f64> {
        let norm = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / norm).collect()
    };
    let e1 = unit(offset(&prototypes[0]));
    let mut e2 = offset(&prototypes[1]);
    let proj = dot(&e2, &e1);
    e2.iter_mut().zip(&e1).for_each(|(v, e)| *v -= proj * e);
    (center, e1, unit(e2))
}

/// `n_per_class` examples for each present class, class-major order.
pub fn generate_task(
    world: &SyntheticWorld,
    spec: &SyntheticTaskSpec,
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::Data("n_per_class must be >= 1".into()));
    }
    let inst = TaskInstance::new(world, spec);
    let (sin, cos) = spec.shift.rotation_deg.to_radians().sin_cos();
    let spread = spec.noise_sigma * spec.shift.noise_multiplier;
    let mut rng = rng_stream(seed, 0);
    let mut out = Vec::new();
    for class in spec.present_classes() {
        for _ in 0..n_per_class {
            let mut z: Vec<f64> = inst.prototypes[class]
                .iter()
                .map(|&m| m + spread * normal(&mut rng))
                .collect();
            inst.rotate(&mut z, cos, sin);
            let coefs = gaussian_vec(inst.nuisance.len(), spec.nuisance_scale * spread, &mut rng);
            let nuisance: Vec<(f64, &[f64])> = coefs
                .iter()
                .zip(&inst.nuisance)
                .map(|(&c, d)| (c, d.as_slice()))
                .collect();
            let image_tokens = world.render(&z, &nuisance, spec.shift.bias_scale, spread, &mut rng);
            out.push(LabeledExample {
                image_tokens,
                label: class,
            });
        }
    }
    Ok(out)
}

/// Class prompts `[C, P_t, D_t]` for every class of `spec` (ignoring any
/// subset), plus each prompt's summary-token index.
pub fn prompt_tokens(
    world: &SyntheticWorld,
    spec: &SyntheticTaskSpec,
) -> Result<(Tensor, Vec<usize>)> {
    spec.validate()?;
    let inst = TaskInstance::new(world, spec);
    let mut data = Vec::with_capacity(spec.classes * world.p_text * world.d_text);
    for name in &inst.names {
        data.extend(world.prompt(name));
    }
    let tokens = Tensor::from_parts(vec![spec.classes, world.p_text, world.d_text], data);
    Ok((tokens, vec![world.p_text - 1; spec.classes]))
}

/// Exactly `k` examples of every class found in `dataset`, drawn uniformly
/// without replacement and returned in shuffled order.
pub fn sample_few_shot(
    dataset: &[LabeledExample],
    k: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if k == 0 {
        return Err(Error::Data("K must be >= 1".into()));
    }
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, ex) in dataset.iter().enumerate() {
        by_class.entry(ex.label).or_default().push(i);
    }
    let mut rng = rng_stream(seed, 4);
    let mut picked = Vec::with_capacity(k * by_class.len());
    for (class, mut idx) in by_class {
        if idx.len() < k {
            return Err(Error::Data(format!(
                "class {class} has {} examples, {k} requested",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        picked.extend_from_slice(&idx[..k]);
    }
    picked.shuffle(&mut rng);
    Ok(picked.into_iter().map(|i| dataset[i].clone()).collect())
}

/// Stacks examples into `[B, P_v, D_v]`.
pub fn stack_images(examples: &[&LabeledExample]) -> Result<Tensor> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Data("cannot stack an empty batch".into()))?;
    let item = first.image_tokens.shape().to_vec();
    let mut data = Vec::with_capacity(examples.len() * first.image_tokens.len());
    for ex in examples {
        if ex.image_tokens.shape() != item.as_slice() {
            return Err(Error::shapes(
                "stack_images",
                ex.image_tokens.shape(),
                &item,
            ));
        }
        data.extend_from_slice(ex.image_tokens.data());
    }
    let mut shape = vec![examples.len()];
    shape.extend(item);
    Ok(Tensor::from_parts(shape, data))
}
