//! Generating a task, its shifted targets and a few-shot support set, and
//! writing the task to disk.

use evisteer::data::{
    apply_domain_shift, generate_task, load_dataset, prompt_tokens, sample_few_shot, save_dataset,
    DatasetManifest, DomainShift, SyntheticWorld, WorldConfig,
};
use evisteer::harness::default_task;
use evisteer::model::EncoderConfig;

fn main() -> evisteer::Result<()> {
    let world_cfg = WorldConfig::default();
    let world = SyntheticWorld::new(&EncoderConfig::default(), world_cfg)?;
    let spec = default_task();
    let data = generate_task(&world, &spec, 25, 0)?;
    let (prompts, eos) = prompt_tokens(&world, &spec)?;
    println!(
        "{} examples of shape {:?}; prompts {:?}, summary tokens {:?}",
        data.len(),
        data[0].image_tokens.shape(),
        prompts.shape(),
        eos
    );

    let rotated = apply_domain_shift(
        &spec,
        DomainShift {
            rotation_deg: 60.0,
            ..DomainShift::NONE
        },
        Some(vec![0, 2]),
    )?;
    let target = generate_task(&world, &rotated, 10, 1)?;
    let labels: Vec<usize> = target.iter().map(|e| e.label).collect();
    println!("rotated target, classes {:?}: {} examples", rotated.present_classes(), labels.len());

    let support = sample_few_shot(&data, 4, 0)?;
    println!("4-shot support labels {:?}", support.iter().map(|e| e.label).collect::<Vec<_>>());

    let path = std::env::temp_dir().join("evisteer_example_task.evst");
    let manifest = DatasetManifest {
        world: world_cfg,
        spec: spec.clone(),
        n_per_class: 25,
        seed: 0,
        examples: data.len(),
    };
    save_dataset(&path, &data, &manifest)?;
    let (back, m) = load_dataset(&path)?;
    println!("reloaded {} examples, identical = {}", m.examples, back == data);
    std::fs::remove_file(&path)?;
    std::fs::remove_file(path.with_extension("json"))?;
    Ok(())
}
