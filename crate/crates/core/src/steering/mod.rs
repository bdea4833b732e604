//! Evidential cross-modal low-dimensional steering.
//!
//! Each adapted layer projects vision and text tokens into an `r`-dimensional
//! latent space split into a mean-update channel and an uncertainty channel.
//! The uncertainty channel becomes evidence, a concentration `β = e + 1` and
//! an uncertainty `u = 1/β`, which in turn defines belief masses on the frame
//! {apply update, ignorance}. Text uncertainty is pooled at the summary token
//! and fused with the vision masses by Dempster's rule; sigmoid gates over
//! the masses then scale each token's update.

mod ops;
mod params;

pub use ops::{
    adapter_forward, belief_masses, confidence_gate, down_project, ds_combine, evidential_state,
    kl_gamma_regularizer, pool_text_uncertainty, up_project, AdapterOutput, BeliefPair,
    EvidentialState,
};
pub use params::{AdapterLayerParams, ModalityAdapter};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parts of the steering pipeline are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Components {
    pub vision_adapt: bool,
    pub text_adapt: bool,
    pub evidential_gate: bool,
    pub crossmodal_belief: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            vision_adapt: true,
            text_adapt: true,
            evidential_gate: true,
            crossmodal_belief: true,
        }
    }
}

impl Components {
    pub const NONE: Components = Components {
        vision_adapt: false,
        text_adapt: false,
        evidential_gate: false,
        crossmodal_belief: false,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteeringConfig {
    /// Latent dimension.
    pub r: usize,
    /// Number of adapted leading layers per encoder.
    pub d: usize,
    /// Stability constant added to the evidence.
    pub eps: f64,
    /// Stability constant in Dempster's normalizer. At 1e-9 a support of 0.5
    /// moves the other source by at most 2e-9.
    pub fusion_eps: f64,
    pub components: Components,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            r: 4,
            d: 4,
            eps: 1e-8,
            fusion_eps: 1e-9,
            components: Components::default(),
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.d > depth {
            return Err(Error::Config(format!(
                "cannot adapt {} layers of a {depth}-layer encoder",
                self.d
            )));
        }
        if self.r == 0 {
            return Err(Error::Config("latent dimension r must be >= 1".into()));
        }
        if !(self.eps > 0.0) || !(self.fusion_eps > 0.0) {
            return Err(Error::Config(format!(
                "eps and fusion_eps must be positive, got {} and {}",
                self.eps, self.fusion_eps
            )));
        }
        Ok(())
    }
}

/// Trainable scalars of `d` adapted layers: per modality an affine
/// down-projection, an affine up-projection, a confidence weight with bias
/// and one steering scale.
pub fn count_parameters(d_vision: usize, d_text: usize, r: usize, d: usize) -> usize {
    let per_modality = |dim: usize| dim * 2 * r + 2 * r + r * dim + dim + r + 1 + 1;
    d * (per_modality(d_vision) + per_modality(d_text))
}
