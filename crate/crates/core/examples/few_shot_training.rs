//! Pre-aligns a small backbone, then trains steering adapters on 8 shots per
//! class and compares with zero-shot accuracy.

use evisteer::data::{generate_task, prompt_tokens, sample_few_shot, SyntheticWorld, WorldConfig};
use evisteer::harness::default_task;
use evisteer::model::{build_backbone, EncoderConfig, PretextConfig};
use evisteer::steering::SteeringConfig;
use evisteer::train::{train, TrainConfig};

fn main() -> evisteer::Result<()> {
    let cfg = EncoderConfig {
        layers: 3,
        ..EncoderConfig::default()
    };
    let world = SyntheticWorld::new(&cfg, WorldConfig::default())?;
    let pretext = PretextConfig {
        steps: 150,
        ..PretextConfig::default()
    };
    let backbone = build_backbone(&cfg, &world, 0, Some(&pretext))?;

    let spec = default_task();
    let (prompts, eos) = prompt_tokens(&world, &spec)?;
    let eval = generate_task(&world, &spec, 100, 1)?;
    let pool = generate_task(&world, &spec, 32, 2)?;
    let support = sample_few_shot(&pool, 8, 0)?;

    let steering = SteeringConfig {
        d: 2,
        ..SteeringConfig::default()
    };
    let frozen = SteeringConfig { d: 0, ..steering };
    let zero = backbone.accuracy(&eval, &prompts, &eos, &frozen)?;

    let mut model = backbone.clone();
    model.attach_adapters(&steering, 0)?;
    let train_cfg = TrainConfig {
        epochs: 40,
        shots: 8,
        ..TrainConfig::default()
    };
    let (trained, history) = train(&model, &support, &prompts, &eos, &train_cfg, &steering)?;
    let first = history.first().unwrap();
    let last = history.last().unwrap();
    println!("epoch 1: ce {:.4} kl {:.4}", first.ce, first.kl);
    println!("epoch {}: ce {:.4} kl {:.4}", last.epoch, last.ce, last.kl);
    let acc = trained.accuracy(&eval, &prompts, &eos, &steering)?;
    println!("zero-shot {zero:.2}% -> 8-shot {acc:.2}%");
    println!(
        "backbone untouched: {}",
        trained.backbone_fingerprint() == backbone.backbone_fingerprint()
    );
    Ok(())
}
