use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{gaussian_tensor, generate_task, prompt_tokens, SyntheticTaskSpec, SyntheticWorld, WorldConfig};
use crate::steering::{count_parameters, Components};

fn small() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        d_vision: 16,
        d_text: 16,
        p_vision: 5,
        p_text: 6,
        heads: 2,
        hidden_mult: 2,
        embed_dim: 8,
    }
}

fn steering(d: usize) -> SteeringConfig {
    SteeringConfig {
        d,
        r: 2,
        ..SteeringConfig::default()
    }
}

fn inputs(cfg: &EncoderConfig, b: usize, c: usize, seed: u64) -> (Tensor, Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = gaussian_tensor(&[b, cfg.p_vision, cfg.d_vision], 1.0, &mut rng);
    let prompts = gaussian_tensor(&[c, cfg.p_text, cfg.d_text], 1.0, &mut rng);
    (images, prompts, vec![cfg.summary_token(); c])
}

fn features(model: &ModelParams, images: &Tensor, prompts: &Tensor, eos: &[usize], s: &SteeringConfig) -> (Tensor, Tensor, f64) {
    let tape = Tape::inference();
    let bound = model.bind(&tape);
    let enc = encode(&bound, tape.constant(images.clone()), tape.constant(prompts.clone()), eos, s).unwrap();
    (enc.image.value(), enc.text.value(), enc.kl.item().unwrap())
}

fn randomize(model: &mut ModelParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut model.adapters {
        for a in [&mut layer.vision, &mut layer.text] {
            for (_, t) in a.fields_mut() {
                let noise = gaussian_tensor(t.shape(), 0.5, &mut rng);
                t.data_mut().copy_from_slice(noise.data());
            }
        }
    }
}

#[test]
fn fresh_adapters_are_the_identity() {
    let cfg = small();
    let (images, prompts, eos) = inputs(&cfg, 3, 4, 1);
    let mut model = init_backbone(&cfg, 3).unwrap();
    let (img0, txt0, _) = features(&model, &images, &prompts, &eos, &steering(0));
    model.attach_adapters(&steering(2), 9).unwrap();
    let (img, txt, _) = features(&model, &images, &prompts, &eos, &steering(2));
    assert_eq!(img0.max_abs_diff(&img).unwrap(), 0.0);
    assert_eq!(txt0.max_abs_diff(&txt).unwrap(), 0.0);
}

#[test]
fn depth_zero_is_the_frozen_model() {
    let cfg = small();
    let (images, prompts, eos) = inputs(&cfg, 2, 3, 2);
    let plain = init_backbone(&cfg, 4).unwrap();
    let mut steered = plain.clone();
    steered.attach_adapters(&steering(2), 1).unwrap();
    randomize(&mut steered, 5);
    let (a, b, _) = features(&plain, &images, &prompts, &eos, &steering(0));
    let (c, d, kl) = features(&steered, &images, &prompts, &eos, &steering(0));
    assert_eq!(a, c);
    assert_eq!(b, d);
    assert_eq!(kl, 0.0);
}

#[test]
fn features_have_unit_norm() {
    let cfg = small();
    let (images, prompts, eos) = inputs(&cfg, 4, 3, 3);
    let mut model = init_backbone(&cfg, 5).unwrap();
    model.attach_adapters(&steering(2), 0).unwrap();
    randomize(&mut model, 6);
    let (img, txt, kl) = features(&model, &images, &prompts, &eos, &steering(2));
    assert!(kl > 0.0);
    for t in [&img, &txt] {
        let e = t.shape()[1];
        for row in t.data().chunks(e) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-10, "norm {norm}");
        }
    }
}

#[test]
fn depth_beyond_adapters_is_rejected() {
    let cfg = small();
    let (images, prompts, eos) = inputs(&cfg, 1, 2, 0);
    let model = init_backbone(&cfg, 0).unwrap();
    let tape = Tape::inference();
    let bound = model.bind(&tape);
    let err = encode(&bound, tape.constant(images.clone()), tape.constant(prompts.clone()), &eos, &steering(1));
    assert!(matches!(err, Err(Error::Config(_))));
    let err = encode(&bound, tape.constant(images), tape.constant(prompts), &eos, &steering(3));
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn wrong_token_shapes_are_rejected() {
    let cfg = small();
    let model = init_backbone(&cfg, 0).unwrap();
    let tape = Tape::inference();
    let bound = model.bind(&tape);
    let images = tape.constant(Tensor::zeros(&[1, cfg.p_vision + 1, cfg.d_vision]));
    let prompts = tape.constant(Tensor::zeros(&[2, cfg.p_text, cfg.d_text]));
    assert!(encode(&bound, images, prompts, &[5, 5], &steering(0)).is_err());
}

fn unit<'t>(tape: &'t Tape, rows: &[&[f64]]) -> Var<'t> {
    let w = rows[0].len();
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    tape.constant(Tensor::new(&[rows.len(), w], data).unwrap())
}

#[test]
fn classify_examples() {
    let tape = Tape::inference();
    let a = [0.6, 0.8];
    let same = classify(unit(&tape, &[&a]), unit(&tape, &[&a]), tape.scalar(0.0)).unwrap();
    assert!((same.item().unwrap() - 1.0).abs() < 1e-15);

    let orth = classify(unit(&tape, &[&[1.0, 0.0]]), unit(&tape, &[&[0.0, 1.0]]), tape.scalar(0.0)).unwrap();
    assert_eq!(orth.item().unwrap(), 0.0);

    let s = 3f64.sqrt() / 2.0;
    let sixty = classify(unit(&tape, &[&[1.0, 0.0]]), unit(&tape, &[&[0.5, s]]), tape.scalar(10f64.ln())).unwrap();
    assert!((sixty.item().unwrap() - 5.0).abs() < 1e-12);
}

#[test]
fn classify_rejects_unnormalized_features() {
    let tape = Tape::inference();
    let err = classify(unit(&tape, &[&[1.0, 1e-2]]), unit(&tape, &[&[1.0, 0.0]]), tape.scalar(0.0));
    assert!(matches!(err, Err(Error::Contract(_))));
    let err = classify(unit(&tape, &[&[1.0, 0.0]]), unit(&tape, &[&[0.5, 0.5]]), tape.scalar(0.0));
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn backbone_init_is_deterministic() {
    let a = init_backbone(&small(), 11).unwrap();
    let b = init_backbone(&small(), 11).unwrap();
    let c = init_backbone(&small(), 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.backbone_fingerprint(), c.backbone_fingerprint());
    assert!(a.named().iter().all(|(_, t)| !t.requires_grad()));
    assert!((a.log_temperature.item().unwrap() - 20f64.ln()).abs() < 1e-15);
}

#[test]
fn trainable_census_matches_parameter_count() {
    let cfg = small();
    let mut model = init_backbone(&cfg, 0).unwrap();
    assert_eq!(model.trainable_scalars(), 0);
    for d in 1..=2 {
        for r in [1, 3] {
            let s = SteeringConfig { d, r, ..Default::default() };
            model.attach_adapters(&s, 0).unwrap();
            let n = count_parameters(cfg.d_vision, cfg.d_text, r, d);
            assert_eq!(model.trainable_scalars(), n);
            model.set_temperature_trainable(true);
            assert_eq!(model.trainable_scalars(), n + 1);
            model.set_temperature_trainable(false);
        }
    }
}

#[test]
fn closing_the_scalings_recovers_frozen_outputs() {
    let cfg = small();
    let (images, prompts, eos) = inputs(&cfg, 2, 3, 8);
    let mut model = init_backbone(&cfg, 1).unwrap();
    let (img0, txt0, _) = features(&model, &images, &prompts, &eos, &steering(0));
    model.attach_adapters(&steering(2), 2).unwrap();
    randomize(&mut model, 3);
    let (img1, _, _) = features(&model, &images, &prompts, &eos, &steering(2));
    assert!(img0.max_abs_diff(&img1).unwrap() > 1e-3);
    for layer in &mut model.adapters {
        layer.vision.alpha_raw = Tensor::full(&[1], -60.0);
        layer.text.alpha_raw = Tensor::full(&[1], -60.0);
    }
    let (img, txt, _) = features(&model, &images, &prompts, &eos, &steering(2));
    assert!(img0.max_abs_diff(&img).unwrap() < 1e-6);
    assert!(txt0.max_abs_diff(&txt).unwrap() < 1e-6);
}

#[test]
fn every_toggle_mask_runs() {
    let cfg = small();
    let (images, prompts, eos) = inputs(&cfg, 2, 3, 4);
    let mut model = init_backbone(&cfg, 2).unwrap();
    model.attach_adapters(&steering(2), 0).unwrap();
    randomize(&mut model, 7);
    for mask in 0..16u32 {
        let s = SteeringConfig {
            components: Components {
                vision_adapt: mask & 1 != 0,
                text_adapt: mask & 2 != 0,
                evidential_gate: mask & 4 != 0,
                crossmodal_belief: mask & 8 != 0,
            },
            ..steering(2)
        };
        let (img, txt, kl) = features(&model, &images, &prompts, &eos, &s);
        assert!(img.is_finite() && txt.is_finite() && kl.is_finite(), "mask {mask}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = small();
    let mut model = init_backbone(&cfg, 21).unwrap();
    model.attach_adapters(&steering(2), 4).unwrap();
    randomize(&mut model, 4);
    model.set_temperature_trainable(true);
    let mut buf = Vec::new();
    model.write_to(&mut buf).unwrap();
    assert_eq!(&buf[..4], b"EVST");
    let back = ModelParams::read_from(buf.as_slice()).unwrap();
    assert_eq!(back, model);
    assert!(back.temperature_trainable());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.evst");
    model.save(&path).unwrap();
    assert_eq!(ModelParams::load(&path).unwrap(), model);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let mut buf = Vec::new();
    init_backbone(&small(), 0).unwrap().write_to(&mut buf).unwrap();
    buf.truncate(buf.len() - 3);
    assert!(ModelParams::read_from(buf.as_slice()).is_err());
}

fn task(classes: usize, seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        classes,
        prototype_seed: seed,
        noise_sigma: 0.3,
        nuisance_dims: 0,
        nuisance_scale: 1.0,
        naming_noise: 0.0,
        shift: Default::default(),
        class_subset: None,
    }
}

fn zero_shot(model: &ModelParams, world: &SyntheticWorld, spec: &SyntheticTaskSpec) -> f64 {
    let data = generate_task(world, spec, 50, 99).unwrap();
    let (prompts, eos) = prompt_tokens(world, spec).unwrap();
    model.accuracy(&data, &prompts, &eos, &steering(0)).unwrap()
}

#[test]
fn pre_alignment_beats_chance_and_random_weights_do_not() {
    let cfg = small();
    let world = SyntheticWorld::new(&cfg, WorldConfig::default()).unwrap();
    let pretext = PretextConfig {
        steps: 300,
        ..Default::default()
    };
    let random = init_backbone(&cfg, 0).unwrap();
    let aligned = build_backbone(&cfg, &world, 0, Some(&pretext)).unwrap();
    assert_eq!(aligned.trainable_scalars(), 0);

    // Unseen tasks from the pretext distribution.
    let specs: Vec<_> = (0..4).map(|i| pretext.task(100_000 + i)).collect();
    let chance = 100.0 / pretext.classes as f64;
    let mean = |m: &ModelParams| specs.iter().map(|s| zero_shot(m, &world, s)).sum::<f64>() / specs.len() as f64;
    let (acc_random, acc_aligned) = (mean(&random), mean(&aligned));
    assert!(acc_aligned > chance + 10.0, "aligned {acc_aligned}");
    assert!((acc_random - chance).abs() <= 10.0, "random {acc_random}");

    let four = task(4, 5);
    assert!(zero_shot(&aligned, &world, &four) > 35.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permuting_prompts_permutes_logit_columns(seed in 0u64..1000, shift in 1usize..4) {
        let cfg = small();
        let (images, prompts, eos) = inputs(&cfg, 3, 4, seed);
        let mut model = init_backbone(&cfg, seed).unwrap();
        model.attach_adapters(&steering(2), seed).unwrap();
        randomize(&mut model, seed + 1);
        let s = steering(2);
        let base = model.logits(&images, &prompts, &eos, &s).unwrap();
        let perm: Vec<usize> = (0..4).map(|c| (c + shift) % 4).collect();
        let row = cfg.p_text * cfg.d_text;
        let mut data = Vec::new();
        for &p in &perm {
            data.extend_from_slice(&prompts.data()[p * row..(p + 1) * row]);
        }
        let permuted = Tensor::new(prompts.shape(), data).unwrap();
        let out = model.logits(&images, &permuted, &eos, &s).unwrap();
        for b in 0..3 {
            for (c, &p) in perm.iter().enumerate() {
                let want = base.get(&[b, p]).unwrap();
                let got = out.get(&[b, c]).unwrap();
                prop_assert!((want - got).abs() < 1e-12, "{} vs {}", want, got);
            }
        }
    }
}
