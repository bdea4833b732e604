//! Experimental protocols on synthetic tasks: few-shot, domain
//! generalization, component ablations and depth/dimension sweeps, plus the
//! bundled verification suite.
//!
//! Results are plain [`RunRecord`]s. Percentages are rounded to two decimals
//! as they are recorded, and every HM is recomputed from the rounded ID and
//! mean-OOD values it sits next to.

mod config;
mod output;
mod protocols;
mod verify;

pub use config::{default_targets, default_task, BackboneConfig, ExperimentConfig, TargetSpec};
pub use output::{records_csv, sweep_csv, write_records, OutputFormat};
pub use protocols::{
    run_ablation, run_domain_generalization, run_fewshot, run_sweep, Harness, SweepAxis,
};
pub use verify::{gradcheck_loss, identity_at_init_deviation, run_verification, Check};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::steering::Components;

/// `2ab / (a + b)` for positive percentages.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain(format!(
            "harmonic mean needs positive inputs, got {a} and {b}"
        )));
    }
    Ok(2.0 * a * b / (a + b))
}

/// Rounds a percentage to the two decimals every table reports.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoVisual,
    NoTextual,
    NoEvidential,
    NoCrossmodal,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::NoVisual,
        AblationVariant::NoTextual,
        AblationVariant::NoEvidential,
        AblationVariant::NoCrossmodal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoVisual => "no_visual",
            AblationVariant::NoTextual => "no_textual",
            AblationVariant::NoEvidential => "no_evidential",
            AblationVariant::NoCrossmodal => "no_crossmodal",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {name:?}")))
    }

    /// `base` with this variant's toggle cleared.
    pub fn components(self, base: Components) -> Components {
        let mut c = base;
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoVisual => c.vision_adapt = false,
            AblationVariant::NoTextual => c.text_adapt = false,
            AblationVariant::NoEvidential => c.evidential_gate = false,
            AblationVariant::NoCrossmodal => c.crossmodal_belief = false,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetAccuracy {
    pub name: String,
    pub accuracy: f64,
}

/// Signed differences against the full model's mean row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Deltas {
    pub id: f64,
    pub ood: f64,
    pub hm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub protocol: String,
    pub variant: String,
    /// `None` marks the mean over seeds.
    pub seed: Option<u64>,
    pub shots: usize,
    pub depth: usize,
    pub rank: usize,
    pub accuracy_id: f64,
    pub accuracy_ood: Vec<TargetAccuracy>,
    pub accuracy_ood_mean: Option<f64>,
    pub hm: Option<f64>,
    #[serde(default)]
    pub deltas: Option<Deltas>,
    /// Relative path of the per-epoch loss CSV, when one was written.
    #[serde(default)]
    pub history: Option<String>,
    /// Only filled in on request, since it breaks byte-identical output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
    pub config: ExperimentConfig,
}

impl RunRecord {
    /// Sets the OOD columns and the HM derived from them.
    pub fn set_ood(&mut self, ood: Vec<TargetAccuracy>) -> Result<()> {
        if ood.is_empty() {
            self.accuracy_ood = ood;
            self.accuracy_ood_mean = None;
            self.hm = None;
            return Ok(());
        }
        let mean = round2(ood.iter().map(|t| t.accuracy).sum::<f64>() / ood.len() as f64);
        self.accuracy_ood = ood;
        self.accuracy_ood_mean = Some(mean);
        self.hm = Some(hm_or_zero(self.accuracy_id, mean));
        Ok(())
    }

    pub fn is_mean(&self) -> bool {
        self.seed.is_none()
    }
}

/// HM rounded to two decimals; zero when either side is zero.
fn hm_or_zero(a: f64, b: f64) -> f64 {
    harmonic_mean(a, b).map(round2).unwrap_or(0.0)
}

/// The mean row over per-seed `records` of one configuration.
pub fn mean_record(records: &[RunRecord]) -> Result<RunRecord> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data("no records to average".into()))?;
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&RunRecord) -> f64| round2(records.iter().map(f).sum::<f64>() / n);
    let mut out = first.clone();
    out.seed = None;
    out.history = None;
    out.accuracy_id = mean(&|r| r.accuracy_id);
    out.wall_clock_seconds = first
        .wall_clock_seconds
        .map(|_| records.iter().filter_map(|r| r.wall_clock_seconds).sum::<f64>() / n);
    let ood = first
        .accuracy_ood
        .iter()
        .enumerate()
        .map(|(i, t)| TargetAccuracy {
            name: t.name.clone(),
            accuracy: mean(&|r| r.accuracy_ood[i].accuracy),
        })
        .collect();
    out.set_ood(ood)?;
    Ok(out)
}
