use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabeledExample, SyntheticTaskSpec, WorldConfig};
use crate::archive;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// JSON sidecar describing how a dataset archive was generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub world: WorldConfig,
    pub spec: SyntheticTaskSpec,
    pub n_per_class: usize,
    pub seed: u64,
    pub examples: usize,
}

fn manifest_path(archive_path: &Path) -> PathBuf {
    archive_path.with_extension("json")
}

/// Writes `examples` as an archive holding `image_tokens [N, P_v, D_v]` and
/// `labels [N]`, plus `<stem>.json` with the manifest.
pub fn save_dataset(
    path: &Path,
    examples: &[LabeledExample],
    manifest: &DatasetManifest,
) -> Result<()> {
    let refs: Vec<&LabeledExample> = examples.iter().collect();
    let images = super::stack_images(&refs)?;
    let labels = Tensor::from_vec(examples.iter().map(|e| e.label as f64).collect());
    archive::save(path, [("image_tokens", &images), ("labels", &labels)])?;
    let json = serde_json::to_string_pretty(manifest)? + "\n";
    std::fs::write(manifest_path(path), json)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(Vec<LabeledExample>, DatasetManifest)> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path(path))?)?;
    let mut images = None;
    let mut labels = None;
    for (name, t) in archive::load(path)? {
        match name.as_str() {
            "image_tokens" => images = Some(t),
            "labels" => labels = Some(t),
            other => return Err(Error::Format(format!("unexpected tensor {other}"))),
        }
    }
    let (images, labels) = match (images, labels) {
        (Some(i), Some(l)) => (i, l),
        _ => return Err(Error::Format("dataset archive incomplete".into())),
    };
    let n = labels.len();
    if images.rank() != 3 || images.shape()[0] != n || n != manifest.examples {
        return Err(Error::Format(format!(
            "images {:?} do not match {n} labels / manifest {}",
            images.shape(),
            manifest.examples
        )));
    }
    let item: Vec<usize> = images.shape()[1..].to_vec();
    let stride = item.iter().product::<usize>();
    let examples = labels
        .data()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            Ok(LabeledExample {
                image_tokens: Tensor::new(
                    &item,
                    images.data()[i * stride..(i + 1) * stride].to_vec(),
                )?,
                label: l as usize,
            })
        })
        .collect::<Result<_>>()?;
    Ok((examples, manifest))
}
