use super::*;
use crate::data::{generate_task, prompt_tokens, SyntheticTaskSpec, SyntheticWorld, WorldConfig};
use crate::model::{init_backbone, EncoderConfig};
use crate::steering::Components;

fn logits<'t>(tape: &'t Tape, rows: usize, data: &[f64]) -> Var<'t> {
    let c = data.len() / rows;
    tape.constant(Tensor::new(&[rows, c], data.to_vec()).unwrap())
}

#[test]
fn cross_entropy_examples() {
    let tape = Tape::new();
    let uniform = cross_entropy(logits(&tape, 2, &[0.3; 8]), &[0, 3]).unwrap();
    assert!((uniform.item().unwrap() - 4f64.ln()).abs() < 1e-12);

    let confident = cross_entropy(logits(&tape, 1, &[100.0, 0.0, 0.0, 0.0]), &[0]).unwrap();
    // log(1 + 3e^-100) is below f64 resolution around 1.
    let c = confident.item().unwrap();
    assert!((0.0..1e-40).contains(&c), "{c}");

    let binary = cross_entropy(logits(&tape, 1, &[1.0, 0.0]), &[0]).unwrap();
    assert!((binary.item().unwrap() - 0.313_261_687_518_222_8).abs() < 1e-12);
}

#[test]
fn cross_entropy_survives_huge_logits() {
    let tape = Tape::new();
    let ce = cross_entropy(logits(&tape, 1, &[1e4, -1e4, 0.0]), &[1]).unwrap();
    assert!((ce.item().unwrap() - 2e4).abs() < 1e-8);
}

#[test]
fn cross_entropy_rejects_bad_labels() {
    let tape = Tape::new();
    assert!(matches!(
        cross_entropy(logits(&tape, 1, &[0.0, 0.0]), &[2]),
        Err(Error::Data(_))
    ));
    assert!(cross_entropy(logits(&tape, 2, &[0.0; 4]), &[0]).is_err());
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let tape = Tape::new();
    let x = tape.variable(Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap());
    let ce = cross_entropy(x, &[1]).unwrap();
    let g = tape.backward(ce).unwrap().get(x).unwrap();
    let z: f64 = [0.5f64, -1.0, 2.0].iter().map(|v| v.exp()).sum();
    let want = [0.5f64.exp() / z, (-1f64).exp() / z - 1.0, 2f64.exp() / z];
    for (a, b) in g.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn total_loss_examples() {
    let tape = Tape::new();
    let (ce, kl) = (tape.scalar(1.0), tape.scalar(2.0));
    assert_eq!(total_loss(ce, kl, 0.0).unwrap().item().unwrap(), 1.0);
    assert!((total_loss(ce, kl, 1e-4).unwrap().item().unwrap() - 1.0002).abs() < 1e-15);
    assert_eq!(total_loss(ce, tape.scalar(0.0), 1e-4).unwrap().item().unwrap(), 1.0);
}

#[test]
fn steps_per_epoch_keeps_the_partial_batch() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.steps_per_epoch(16 * 3), 3);
    assert_eq!(cfg.epochs * cfg.steps_per_epoch(48), 300);
    assert_eq!(cfg.steps_per_epoch(4 * 3), 1);
    assert_eq!(cfg.steps_per_epoch(17), 2);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { learning_rate: 0.0, ..Default::default() },
        TrainConfig { lambda_kl: -1e-4, ..Default::default() },
        TrainConfig { adam_beta2: 1.0, ..Default::default() },
        TrainConfig { adam_eps: f64::NAN, ..Default::default() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn history_csv_format() {
    let h = [EpochRecord { epoch: 1, ce: 0.5, kl: 0.25, total: 0.500025 }];
    assert_eq!(history_csv(&h), "epoch,ce,kl,total\n1,0.50000000,0.25000000,0.50002500\n");
}

fn encoder() -> EncoderConfig {
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

struct Fixture {
    model: ModelParams,
    support: Vec<LabeledExample>,
    prompts: Tensor,
    eos: Vec<usize>,
}

fn fixture(classes: usize, noise: f64, per_class: usize, steering: &SteeringConfig) -> Fixture {
    let enc = encoder();
    let world = SyntheticWorld::new(&enc, WorldConfig::default()).unwrap();
    let spec = SyntheticTaskSpec {
        classes,
        prototype_seed: 3,
        noise_sigma: noise,
        nuisance_dims: 0,
        nuisance_scale: 1.0,
        naming_noise: 0.0,
        shift: Default::default(),
        class_subset: None,
    };
    let support = generate_task(&world, &spec, per_class, 1).unwrap();
    let (prompts, eos) = prompt_tokens(&world, &spec).unwrap();
    let mut model = init_backbone(&enc, 0).unwrap();
    model.attach_adapters(steering, 0).unwrap();
    Fixture { model, support, prompts, eos }
}

fn steering() -> SteeringConfig {
    SteeringConfig { d: 2, r: 4, ..Default::default() }
}

#[test]
fn training_is_reproducible_and_leaves_the_backbone_alone() {
    let s = steering();
    let f = fixture(3, 0.5, 4, &s);
    let cfg = TrainConfig { epochs: 5, ..Default::default() };
    let before = f.model.backbone_fingerprint();
    let (a, ha) = train(&f.model, &f.support, &f.prompts, &f.eos, &cfg, &s).unwrap();
    let (b, hb) = train(&f.model, &f.support, &f.prompts, &f.eos, &cfg, &s).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_eq!(ha.len(), 5);
    assert!(ha.iter().all(|r| r.ce.is_finite() && r.kl.is_finite() && r.total.is_finite()));
    assert_eq!(a.backbone_fingerprint(), before);
    assert_ne!(a.adapters, f.model.adapters);
    assert_eq!(a.log_temperature, f.model.log_temperature);

    let other = TrainConfig { seed: 1, ..cfg };
    let (c, _) = train(&f.model, &f.support, &f.prompts, &f.eos, &other, &s).unwrap();
    assert_ne!(c.adapters, a.adapters);
}

#[test]
fn trainable_temperature_moves() {
    let s = steering();
    let mut f = fixture(3, 0.5, 4, &s);
    f.model.set_temperature_trainable(true);
    let cfg = TrainConfig { epochs: 3, ..Default::default() };
    let (m, _) = train(&f.model, &f.support, &f.prompts, &f.eos, &cfg, &s).unwrap();
    assert_ne!(m.log_temperature, f.model.log_temperature);
}

#[test]
fn total_is_ce_plus_weighted_kl() {
    let s = steering();
    let f = fixture(3, 0.5, 4, &s);
    let cfg = TrainConfig { epochs: 2, batch_size: 100, lambda_kl: 0.5, ..Default::default() };
    let (_, h) = train(&f.model, &f.support, &f.prompts, &f.eos, &cfg, &s).unwrap();
    for r in h {
        assert!(r.kl > 0.0);
        assert!((r.total - (r.ce + 0.5 * r.kl)).abs() < 1e-12);
    }
}

#[test]
fn ungated_adapters_fit_a_separable_task() {
    let s = SteeringConfig {
        components: Components { evidential_gate: false, ..Default::default() },
        ..steering()
    };
    let f = fixture(2, 0.05, 8, &s);
    // 100 single-batch steps; the default rate is tuned for pre-aligned backbones.
    let cfg = TrainConfig { lambda_kl: 0.0, learning_rate: 1e-2, ..Default::default() };
    let (_, h) = train(&f.model, &f.support, &f.prompts, &f.eos, &cfg, &s).unwrap();
    let last = h.last().unwrap();
    assert!(last.ce < 0.05, "final CE {}", last.ce);
    assert_eq!(last.kl, 0.0);
    assert!(last.ce <= h[0].ce);
}

#[test]
fn invalid_inputs_are_rejected() {
    let s = steering();
    let f = fixture(3, 0.5, 2, &s);
    let cfg = TrainConfig::default();
    assert!(matches!(
        train(&f.model, &[], &f.prompts, &f.eos, &cfg, &s),
        Err(Error::Data(_))
    ));
    let deeper = SteeringConfig { d: 2, ..s };
    let mut bare = f.model.clone();
    bare.adapters.truncate(1);
    assert!(matches!(
        train(&bare, &f.support, &f.prompts, &f.eos, &cfg, &deeper),
        Err(Error::Config(_))
    ));
}
