//! A reduced domain-generalization ablation through the harness, printed as
//! CSV.

use evisteer::harness::{records_csv, run_ablation, AblationVariant, ExperimentConfig, Harness};
use evisteer::model::{EncoderConfig, PretextConfig};

fn main() -> evisteer::Result<()> {
    let mut config = ExperimentConfig {
        encoder: EncoderConfig {
            layers: 2,
            ..EncoderConfig::default()
        },
        eval_examples: 200,
        seeds: vec![0],
        ..ExperimentConfig::default()
    };
    config.backbone.pretext = Some(PretextConfig {
        steps: 100,
        ..PretextConfig::default()
    });
    config.steering.d = 2;
    config.train.epochs = 20;

    let harness = Harness::new(config)?;
    let records = run_ablation(
        &harness,
        &[AblationVariant::NoVisual, AblationVariant::NoEvidential],
        &[0],
    )?;
    print!("{}", records_csv(&records));
    Ok(())
}
