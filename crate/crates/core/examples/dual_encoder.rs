//! Encoding and classifying with a steered toy encoder, then a checkpoint
//! round trip.

use evisteer::data::gaussian_tensor;
use evisteer::model::{classify, encode, init_backbone, EncoderConfig, ModelParams};
use evisteer::steering::SteeringConfig;
use evisteer::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> evisteer::Result<()> {
    let cfg = EncoderConfig::default();
    let steering = SteeringConfig::default();
    let mut model = init_backbone(&cfg, 0)?;
    model.attach_adapters(&steering, 0)?;
    println!(
        "{} trainable scalars in {} adapted layers",
        model.trainable_scalars(),
        model.adapters.len()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images = gaussian_tensor(&[2, cfg.p_vision, cfg.d_vision], 1.0, &mut rng);
    let prompts = gaussian_tensor(&[3, cfg.p_text, cfg.d_text], 1.0, &mut rng);
    let eos = vec![cfg.summary_token(); 3];

    let tape = Tape::inference();
    let bound = model.bind(&tape);
    let enc = encode(
        &bound,
        tape.constant(images.clone()),
        tape.constant(prompts.clone()),
        &eos,
        &steering,
    )?;
    let logits = classify(enc.image, enc.text, bound.log_temperature)?;
    println!("logits {:?}: {:?}", logits.shape(), logits.value().data());
    println!("KL term {:.6}", enc.kl.item()?);

    let path = std::env::temp_dir().join("evisteer_example.evst");
    model.save(&path)?;
    let back = ModelParams::load(&path)?;
    let again = back.logits(&images, &prompts, &eos, &steering)?;
    println!(
        "reloaded from {}: identical logits = {}",
        path.display(),
        again == logits.value()
    );
    std::fs::remove_file(&path)?;
    Ok(())
}
