use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{harmonic_mean, round2};
use crate::data::{gaussian_tensor, LabeledExample};
use crate::error::Result;
use crate::model::{classify, encode, init_backbone, EncoderConfig, ModelParams};
use crate::steering::{
    belief_masses, count_parameters, ds_combine, evidential_state, AdapterLayerParams, Components, SteeringConfig,
};
use crate::tensor::special::{digamma, lgamma};
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor, Var};
use crate::train::{cross_entropy, total_loss, train, TrainConfig};

/// One line of the verification report.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct Check {
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn within(name: &'static str, error: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name,
            measured: error,
            tolerance,
            passed: error <= tolerance,
            detail,
        }
    }

    fn holds(name: &'static str, ok: bool, measured: f64, detail: String) -> Self {
        Self {
            name,
            measured,
            tolerance: 0.0,
            passed: ok,
            detail,
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {}: measured {:e} (tolerance {:e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.detail
        )
    }
}

fn toy_encoder() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        d_vision: 8,
        d_text: 8,
        p_vision: 3,
        p_text: 6,
        heads: 2,
        hidden_mult: 2,
        embed_dim: 4,
    }
}

/// Adapters with every entry drawn from N(0, 0.5²), so no gradient path is
/// trivially zero.
fn randomize_adapters(model: &mut ModelParams, rng: &mut ChaCha8Rng) {
    for layer in &mut model.adapters {
        for adapter in [&mut layer.vision, &mut layer.text] {
            for (_, t) in adapter.fields_mut() {
                let noise = gaussian_tensor(t.shape(), 0.5, rng);
                t.data_mut().copy_from_slice(noise.data());
            }
        }
    }
}

fn toy_inputs(cfg: &EncoderConfig, batch: usize, classes: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Vec<usize>) {
    let images = gaussian_tensor(&[batch, cfg.p_vision, cfg.d_vision], 1.0, rng);
    let prompts = gaussian_tensor(&[classes, cfg.p_text, cfg.d_text], 1.0, rng);
    let labels = (0..batch).map(|i| i % classes).collect();
    (images, prompts, labels)
}

/// Finite-difference check of `CE + λ_KL·KL` with respect to every adapter
/// entry of a two-layer, rank-2 toy model with randomized adapters.
pub fn gradcheck_loss(seed: u64, h: f64) -> Result<GradCheckReport> {
    let cfg = toy_encoder();
    let steering = SteeringConfig {
        r: 2,
        d: 2,
        ..SteeringConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = init_backbone(&cfg, seed)?;
    model.attach_adapters(&steering, seed)?;
    randomize_adapters(&mut model, &mut rng);
    let (images, prompts, labels) = toy_inputs(&cfg, 3, 2, &mut rng);
    let eos = vec![cfg.summary_token(); 2];
    let lambda = TrainConfig::default().lambda_kl;

    let params: Vec<Tensor> = model
        .adapters
        .iter()
        .flat_map(|l| {
            let mut v: Vec<Tensor> = l.vision.fields().into_iter().map(|(_, t)| t.clone()).collect();
            v.extend(l.text.fields().into_iter().map(|(_, t)| t.clone()));
            v
        })
        .collect();
    grad_check(&params, h, |tape, vars| {
        let mut bound = model.bind(tape);
        let mut it = vars.iter().copied();
        let mut next = |_: &Var<'_>| it.next().expect("one var per adapter tensor");
        for layer in bound.adapters.iter_mut() {
            let vision = layer.vision.map(&mut next);
            let text = layer.text.map(&mut next);
            *layer = AdapterLayerParams { vision, text };
        }
        let enc = encode(
            &bound,
            tape.constant(images.clone()),
            tape.constant(prompts.clone()),
            &eos,
            &steering,
        )?;
        let ce = cross_entropy(classify(enc.image, enc.text, bound.log_temperature)?, &labels)?;
        total_loss(ce, enc.kl, lambda)
    })
}

fn random_encoder(rng: &mut ChaCha8Rng) -> EncoderConfig {
    let heads = rng.random_range(1..=2);
    EncoderConfig {
        layers: rng.random_range(1..=3),
        d_vision: heads * rng.random_range(2..=4),
        d_text: heads * rng.random_range(2..=4),
        p_vision: rng.random_range(2..=4),
        p_text: rng.random_range(6..=7),
        heads,
        hidden_mult: rng.random_range(1..=2),
        embed_dim: rng.random_range(2..=4),
    }
}

/// Largest absolute difference between freshly steered and frozen outputs
/// over `configs` random toy models.
pub fn identity_at_init_deviation(configs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..configs {
        let cfg = random_encoder(&mut rng);
        let steering = SteeringConfig {
            r: rng.random_range(1..=3),
            d: rng.random_range(1..=cfg.layers),
            ..SteeringConfig::default()
        };
        let mut model = init_backbone(&cfg, seed + i as u64)?;
        model.attach_adapters(&steering, seed + i as u64)?;
        let classes = rng.random_range(2..=4);
        let (images, prompts, _) = toy_inputs(&cfg, 2, classes, &mut rng);
        let eos = vec![cfg.summary_token(); classes];
        let frozen = SteeringConfig { d: 0, ..steering };
        let tape = Tape::inference();
        let bound = model.bind(&tape);
        let run = |s: &SteeringConfig| -> Result<[Tensor; 3]> {
            let e = encode(
                &bound,
                tape.constant(images.clone()),
                tape.constant(prompts.clone()),
                &eos,
                s,
            )?;
            let logits = classify(e.image, e.text, bound.log_temperature)?;
            Ok([e.image.value(), e.text.value(), logits.value()])
        };
        for (a, b) in run(&steering)?.iter().zip(run(&frozen)?.iter()) {
            worst = worst.max(a.max_abs_diff(b)?);
        }
    }
    Ok(worst)
}

/// Fused support on a 101×101 grid of `(b_t, b_v)`, row-major in `b_t`.
fn ds_grid(eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = 101;
    let axis: Vec<f64> = (0..n).map(|i| i as f64 / 100.0).collect();
    let mut bt = Vec::with_capacity(n * n);
    let mut bv = Vec::with_capacity(n * n);
    for &t in &axis {
        for &v in &axis {
            bt.push(t);
            bv.push(v);
        }
    }
    let fuse = |a: &[f64], b: &[f64]| -> Result<Vec<f64>> {
        let tape = Tape::inference();
        let ua = tape.constant(Tensor::from_vec(a.iter().map(|x| 1.0 - x).collect()));
        let ub = tape.constant(Tensor::from_vec(b.iter().map(|x| 1.0 - x).collect()));
        Ok(ds_combine(belief_masses(ua)?, belief_masses(ub)?, eps)?.value().into_data())
    };
    Ok((fuse(&bt, &bv)?, fuse(&bv, &bt)?))
}

fn ds_checks() -> Result<Vec<Check>> {
    let eps = SteeringConfig::default().fusion_eps;
    let (fused, swapped) = ds_grid(eps)?;
    let n = 101;
    let at = |i: usize, j: usize| fused[i * n + j];
    let b = |i: usize| i as f64 / 100.0;

    let commut = fused.iter().zip(&swapped).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
    let neutral = (0..n).map(|j| (at(50, j) - b(j)).abs()).fold(0.0, f64::max);
    let mut identity: f64 = 0.0;
    let mut monotone_violations = 0;
    for i in 0..n {
        for j in 0..n {
            let (t, v) = (b(i), b(j));
            let expect = t * v / (t * v + (1.0 - t) * (1.0 - v) + eps);
            identity = identity.max((at(i, j) - expect).abs());
            if i + 1 < n && at(i + 1, j) < at(i, j) {
                monotone_violations += 1;
            }
            if j + 1 < n && at(i, j + 1) < at(i, j) {
                monotone_violations += 1;
            }
        }
    }
    let lo = fused.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = fused.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(vec![
        Check::within("ds_commutativity", commut, 1e-12, "101x101 grid".into()),
        Check::within("ds_neutral_element", neutral, 1e-8, "b_t = 0.5, 101 points".into()),
        Check::within("ds_normalized_product", identity, 1e-12, "101x101 grid".into()),
        Check::holds("ds_range", lo >= 0.0 && hi < 1.0, hi, format!("fused in [{lo}, {hi}]")),
        Check::holds(
            "ds_monotonicity",
            monotone_violations == 0,
            monotone_violations as f64,
            "decreasing steps on the 101x101 grid".into(),
        ),
    ])
}

fn kl_gamma(beta: f64) -> f64 {
    (beta - 1.0) * digamma(beta) - lgamma(beta)
}

fn evidential_checks() -> Result<Vec<Check>> {
    let eps = SteeringConfig::default().eps;
    let bound = 1.0 / (1.0 + std::f64::consts::LN_2);
    let zs: Vec<f64> = (-20_000..=20_000).map(|k| k as f64 / 200.0).collect();
    let tape = Tape::inference();
    let u = evidential_state(tape.constant(Tensor::from_vec(zs.clone())), eps)?
        .uncertainty
        .value()
        .into_data();
    let (mut u_max, mut z_at_max, mut u_min) = (f64::NEG_INFINITY, f64::NAN, f64::INFINITY);
    for (&z, &u) in zs.iter().zip(&u) {
        if u > u_max {
            u_max = u;
            z_at_max = z;
        }
        u_min = u_min.min(u);
    }

    let steps = 1000;
    let (mut kl_min, mut beta_at_min, mut kl_lowest) = (f64::INFINITY, f64::NAN, f64::INFINITY);
    for k in -3 * steps..=3 * steps {
        let beta = 10f64.powf(k as f64 / steps as f64);
        let kl = kl_gamma(beta);
        kl_lowest = kl_lowest.min(kl);
        if kl < kl_min {
            kl_min = kl;
            beta_at_min = beta;
        }
    }
    let kl2 = kl_gamma(2.0);
    let kl_half = kl_gamma(0.5);
    let euler = 0.577_215_664_901_532_9;
    let kl_half_closed = 0.5 * (euler + 2.0 * std::f64::consts::LN_2) - 0.5 * std::f64::consts::PI.ln();
    Ok(vec![
        Check::holds(
            "evidential_u_bound",
            u_min > 0.0 && u_max <= bound && z_at_max == 0.0,
            u_max,
            format!("max u at Z={z_at_max}, bound {bound:.10}, min u {u_min:e}"),
        ),
        Check::holds(
            "kl_nonnegative",
            kl_lowest >= 0.0,
            kl_lowest,
            "log-grid over [1e-3, 1e3]".into(),
        ),
        Check::within(
            "kl_minimum_at_one",
            (beta_at_min - 1.0).abs(),
            1e-6,
            format!("grid minimum {kl_min:e}"),
        ),
        Check::within("kl_at_two", (kl2 - (1.0 - euler)).abs(), 1e-7, format!("KL(2) = {kl2:.10}")),
        Check::within(
            "kl_at_half",
            (kl_half - kl_half_closed).abs(),
            1e-6,
            format!("KL(0.5) = {kl_half:.10}"),
        ),
    ])
}

fn checkpoint_check() -> Result<Check> {
    let cfg = toy_encoder();
    let steering = SteeringConfig {
        r: 2,
        d: 2,
        ..SteeringConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = init_backbone(&cfg, 11)?;
    model.attach_adapters(&steering, 11)?;
    randomize_adapters(&mut model, &mut rng);
    let mut buf = Vec::new();
    model.write_to(&mut buf)?;
    let back = ModelParams::read_from(buf.as_slice())?;
    let same_bits = model.named().len() == back.named().len()
        && model.named().iter().zip(back.named()).all(|((na, a), (nb, b))| {
            na == &nb
                && a.shape() == b.shape()
                && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let (images, prompts, _) = toy_inputs(&cfg, 4, 3, &mut rng);
    let eos = vec![cfg.summary_token(); 3];
    let la = model.logits(&images, &prompts, &eos, &steering)?;
    let lb = back.logits(&images, &prompts, &eos, &steering)?;
    let same_logits = la.data().iter().zip(lb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok(Check::holds(
        "checkpoint_round_trip",
        same_bits && same_logits,
        la.max_abs_diff(&lb)?,
        format!("{} tensors, {} bytes", model.named().len(), buf.len()),
    ))
}

fn frozen_weights_check() -> Result<Check> {
    let cfg = toy_encoder();
    let steering = SteeringConfig {
        r: 2,
        d: 2,
        ..SteeringConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = init_backbone(&cfg, 5)?;
    model.attach_adapters(&steering, 5)?;
    let (images, prompts, labels) = toy_inputs(&cfg, 6, 2, &mut rng);
    let support: Vec<LabeledExample> = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let per = cfg.p_vision * cfg.d_vision;
            LabeledExample {
                image_tokens: Tensor::new(&[cfg.p_vision, cfg.d_vision], images.data()[i * per..(i + 1) * per].to_vec())
                    .expect("slice matches shape"),
                label,
            }
        })
        .collect();
    let before = model.backbone_fingerprint();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let eos = vec![cfg.summary_token(); 2];
    let (trained, _) = train(&model, &support, &prompts, &eos, &tc, &steering)?;
    let moved = trained
        .adapters
        .iter()
        .zip(&model.adapters)
        .any(|(a, b)| a.vision.w_up != b.vision.w_up);
    Ok(Check::holds(
        "frozen_weights_untouched",
        trained.backbone_fingerprint() == before && moved,
        0.0,
        format!("backbone hash {before:016x}, adapters updated: {moved}"),
    ))
}

/// Runs every property suite on toy configurations.
pub fn run_verification() -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    let count = count_parameters(768, 768, 4, 11);
    checks.push(Check::within(
        "parameter_census",
        (count as f64 - 221_000.0).abs() / 221_000.0,
        0.01,
        format!("count_parameters(768, 768, 4, 11) = {count} vs 221,000"),
    ));
    let share = 100.0 * count as f64 / 196_000_000.0;
    checks.push(Check::within(
        "parameter_share",
        (share - 0.11).abs(),
        0.02,
        format!("{share:.4}% of 196M"),
    ));
    let enc = EncoderConfig::default();
    let steering = SteeringConfig::default();
    let mut model = init_backbone(&enc, 0)?;
    model.attach_adapters(&steering, 0)?;
    let trainable = model.trainable_scalars();
    let expected = count_parameters(enc.d_vision, enc.d_text, steering.r, steering.d);
    checks.push(Check::holds(
        "trainable_census",
        trainable == expected,
        trainable as f64,
        format!("default toy model, expected {expected}"),
    ));

    let hm = harmonic_mean(79.79, 77.97)?;
    checks.push(Check::within(
        "hm_reference",
        (round2(hm) - 78.87).abs(),
        0.005,
        format!("HM(79.79, 77.97) = {hm:.4}"),
    ));

    let dev = identity_at_init_deviation(20, 1)?;
    checks.push(Check::within("identity_at_init", dev, 0.0, "20 random toy configs".into()));

    let report = gradcheck_loss(3, 1e-5)?;
    checks.push(Check::within(
        "gradcheck_loss",
        report.max_rel_error,
        1e-4,
        format!("{} entries, d=2, r=2, h=1e-5", report.entries_checked),
    ));

    checks.extend(ds_checks()?);
    checks.extend(evidential_checks()?);
    checks.push(checkpoint_check()?);
    checks.push(frozen_weights_check()?);

    // Every toggle combination still yields a finite forward pass.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = toy_encoder();
    let (images, prompts, _) = toy_inputs(&cfg, 2, 2, &mut rng);
    let mut toy = init_backbone(&cfg, 9)?;
    let mut finite = true;
    for mask in 0..16u8 {
        let s = SteeringConfig {
            r: 2,
            d: 2,
            components: Components {
                vision_adapt: mask & 1 != 0,
                text_adapt: mask & 2 != 0,
                evidential_gate: mask & 4 != 0,
                crossmodal_belief: mask & 8 != 0,
            },
            ..SteeringConfig::default()
        };
        toy.attach_adapters(&s, 9)?;
        randomize_adapters(&mut toy, &mut rng);
        let logits = toy.logits(&images, &prompts, &[cfg.summary_token(); 2], &s)?;
        finite &= logits.is_finite();
    }
    checks.push(Check::holds("toggle_combinations", finite, 16.0, "all 16 component masks".into()));

    Ok(checks)
}
