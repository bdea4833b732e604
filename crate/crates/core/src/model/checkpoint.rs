use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{init_backbone, EncoderConfig, ModelParams};
use crate::archive;
use crate::error::{Error, Result};
use crate::steering::AdapterLayerParams;
use crate::tensor::Tensor;

const META: &str = "meta.config";

impl ModelParams {
    /// Encoder shape and flags as a `[9]` tensor stored alongside the weights.
    fn meta(&self) -> Tensor {
        let c = &self.config;
        let fields = [
            c.layers,
            c.d_vision,
            c.d_text,
            c.p_vision,
            c.p_text,
            c.heads,
            c.hidden_mult,
            c.embed_dim,
            self.temperature_trainable() as usize,
        ];
        Tensor::from_vec(fields.iter().map(|&v| v as f64).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<ModelParams> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let meta = self.meta();
        let named = self.named();
        let entries =
            std::iter::once((META, &meta)).chain(named.iter().map(|(n, t)| (n.as_str(), *t)));
        archive::write_archive(w, entries)
    }

    pub fn read_from(r: impl Read) -> Result<ModelParams> {
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, t) in archive::read_archive(r)? {
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        let meta = tensors
            .remove(META)
            .ok_or_else(|| Error::Format("checkpoint lacks its config".into()))?;
        let m: Vec<usize> = meta.data().iter().map(|&v| v as usize).collect();
        if m.len() != 9 || meta.data().iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            return Err(Error::Format(format!(
                "malformed config tensor {:?}",
                meta.data()
            )));
        }
        let config = EncoderConfig {
            layers: m[0],
            d_vision: m[1],
            d_text: m[2],
            p_vision: m[3],
            p_text: m[4],
            heads: m[5],
            hidden_mult: m[6],
            embed_dim: m[7],
        };
        let mut model = init_backbone(&config, 0)?;
        let depth = (0..)
            .take_while(|i| tensors.contains_key(&format!("adapter{i}.vision.w_up")))
            .count();
        if depth > 0 {
            let r = tensors[&"adapter0.vision.w_up".to_string()].shape()[0];
            let mut rng = crate::data::rng_stream(0, 0);
            model.adapters = (0..depth)
                .map(|_| AdapterLayerParams::init(config.d_vision, config.d_text, r, &mut rng))
                .collect();
        }
        for (name, slot) in model.named_mut() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "{name}: stored shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        if let Some(name) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {name}")));
        }
        model.set_temperature_trainable(m[8] == 1);
        Ok(model)
    }
}
