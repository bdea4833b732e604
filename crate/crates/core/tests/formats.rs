//! On-disk formats read and written byte for byte, plus protocol-level
//! properties of evaluation sets.

use evisteer::data::{
    generate_task, load_dataset, save_dataset, DatasetManifest, SyntheticWorld, WorldConfig,
};
use evisteer::harness::{default_task, ExperimentConfig, Harness, TargetSpec};
use evisteer::model::{init_backbone, EncoderConfig, ModelParams};
use evisteer::steering::SteeringConfig;
use evisteer::Tensor;

fn le_archive(tensors: &[(&str, &[usize], &[f64])]) -> Vec<u8> {
    let mut b = b"EVST".to_vec();
    b.extend(1u32.to_le_bytes());
    b.extend((tensors.len() as u32).to_le_bytes());
    for (name, dims, values) in tensors {
        b.extend((name.len() as u32).to_le_bytes());
        b.extend(name.as_bytes());
        b.extend((dims.len() as u32).to_le_bytes());
        for d in *dims {
            b.extend((*d as u64).to_le_bytes());
        }
        for v in *values {
            b.extend(v.to_le_bytes());
        }
    }
    b
}

#[test]
fn archive_layout_matches_a_hand_built_file() {
    let t = Tensor::new(&[2, 1], vec![1.5, -0.0]).unwrap();
    let s = Tensor::from_vec(vec![f64::MIN_POSITIVE]);
    let mut written = Vec::new();
    evisteer::archive::write_archive(&mut written, [("w", &t), ("scale", &s)]).unwrap();
    let expected = le_archive(&[("w", &[2, 1], &[1.5, -0.0]), ("scale", &[1], &[f64::MIN_POSITIVE])]);
    assert_eq!(written, expected);
    let back = evisteer::archive::read_archive(expected.as_slice()).unwrap();
    assert_eq!(back[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
}

#[test]
fn corrupt_archives_are_rejected() {
    let good = le_archive(&[("x", &[1], &[1.0])]);
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let mut bad_version = good.clone();
    bad_version[4] = 2;
    for bytes in [bad_magic, bad_version, good[..good.len() - 1].to_vec()] {
        assert!(evisteer::archive::read_archive(bytes.as_slice()).is_err());
    }
}

#[test]
fn checkpoint_is_a_plain_archive() {
    let cfg = EncoderConfig { layers: 1, d_vision: 8, d_text: 8, p_vision: 2, p_text: 6, heads: 2, hidden_mult: 1, embed_dim: 4 };
    let model = init_backbone(&cfg, 0).unwrap();
    let mut bytes = Vec::new();
    model.write_to(&mut bytes).unwrap();
    let tensors = evisteer::archive::read_archive(bytes.as_slice()).unwrap();
    let names: Vec<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
    assert!(names.contains(&"vision.layer0.w_qkv"));
    assert!(names.contains(&"log_temperature"));

    // Dropping any tensor makes the checkpoint unreadable.
    let refs: Vec<(&str, &Tensor)> = tensors.iter().skip(1).map(|(n, t)| (n.as_str(), t)).collect();
    let mut partial = Vec::new();
    evisteer::archive::write_archive(&mut partial, refs).unwrap();
    assert!(ModelParams::read_from(partial.as_slice()).is_err());
}

#[test]
fn dataset_archive_and_manifest() {
    let enc = EncoderConfig::default();
    let world_cfg = WorldConfig::default();
    let world = SyntheticWorld::new(&enc, world_cfg).unwrap();
    let spec = default_task();
    let data = generate_task(&world, &spec, 3, 9).unwrap();
    let manifest = DatasetManifest { world: world_cfg, spec, n_per_class: 3, seed: 9, examples: data.len() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("task.evst");
    save_dataset(&path, &data, &manifest).unwrap();

    let tensors = evisteer::archive::load(&path).unwrap();
    assert_eq!(tensors[0].0, "image_tokens");
    assert_eq!(tensors[0].1.shape(), &[12, enc.p_vision, enc.d_vision]);
    assert_eq!(tensors[1].0, "labels");
    assert_eq!(tensors[1].1.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("task.json")).unwrap()).unwrap();
    assert_eq!(sidecar["seed"], 9);
    assert_eq!(sidecar["spec"]["classes"], 4);

    let (back, m) = load_dataset(&path).unwrap();
    assert_eq!(back, data);
    assert_eq!(m, manifest);
}

// Identical distributions differ only by sampling noise. At 500 samples and
// ~65% accuracy one source/target pair has a standard error near 3 points,
// so the accuracies are held to 3-sigma binomial bounds.
#[test]
fn unshifted_targets_match_source_accuracy() {
    let same = |i: usize| TargetSpec { name: format!("same{i}"), shift: Default::default(), class_subset: None };
    let mut config = ExperimentConfig {
        encoder: EncoderConfig { layers: 2, d_vision: 16, d_text: 16, p_vision: 5, p_text: 6, heads: 2, hidden_mult: 2, embed_dim: 8 },
        targets: (0..8).map(same).collect(),
        steering: SteeringConfig { d: 2, ..Default::default() },
        seeds: vec![0],
        ..Default::default()
    };
    config.backbone.pretext.as_mut().unwrap().steps = 100;
    let n = config.eval_examples as f64;
    let world = SyntheticWorld::new(&config.encoder, config.world).unwrap();
    let target = config.target(&config.targets[0]).unwrap();
    assert_eq!(target, config.task);
    assert_eq!(
        generate_task(&world, &target, 5, 17).unwrap(),
        generate_task(&world, &config.task, 5, 17).unwrap()
    );

    let h = Harness::new(config).unwrap();
    let r = h.zero_shot("check", true).unwrap();
    let id = r.accuracy_id;
    assert!(id > 30.0);
    let ood: Vec<f64> = r.accuracy_ood.iter().map(|t| t.accuracy).collect();
    let pooled = ood.iter().sum::<f64>() / ood.len() as f64;
    let p = pooled / 100.0;
    let var = p * (1.0 - p) / n;
    let pair = 100.0 * (2.0 * var).sqrt();
    for a in &ood {
        assert!((a - id).abs() <= 3.0 * pair, "ID {id} vs OOD {a}, sigma {pair}");
    }
    let spread = (ood.iter().map(|a| (a - pooled).powi(2)).sum::<f64>() / 7.0).sqrt();
    assert!(spread <= 2.0 * 100.0 * var.sqrt(), "target spread {spread}");
    let pooled_sigma = 100.0 * (var + var / ood.len() as f64).sqrt();
    assert!((pooled - id).abs() <= 3.0 * pooled_sigma, "ID {id} vs pooled OOD {pooled}");
}
