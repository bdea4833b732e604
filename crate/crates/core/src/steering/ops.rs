//! Per-layer steering math as pure functions over tape variables.

use super::params::{AdapterLayerParams, ModalityAdapter};
use super::SteeringConfig;
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Splits the affine down-projection of `tokens[..., P, D]` into the
/// mean-update channel `Z_mu` and the uncertainty channel `Z_sigma`, each
/// `[..., P, r]`.
pub fn down_project<'t>(
    tokens: Var<'t>,
    w_down: Var<'t>,
    bias: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let ws = w_down.shape();
    if ws.len() != 2 || ws[1] % 2 != 0 {
        return Err(Error::Dimension(format!(
            "down-projection must be [D, 2r], got {ws:?}"
        )));
    }
    let r = ws[1] / 2;
    let z = tokens.matmul(w_down)?.add(bias)?;
    let last = z.shape().len() - 1;
    Ok((z.narrow(last, 0, r)?, z.narrow(last, r, r)?))
}

/// Affine map of `Z_mu[..., P, r]` back to `[..., P, D]`.
pub fn up_project<'t>(z_mu: Var<'t>, w_up: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    z_mu.matmul(w_up)?.add(bias)
}

/// Evidence, concentration and uncertainty derived from `Z_sigma`.
#[derive(Clone, Copy, Debug)]
pub struct EvidentialState<'t> {
    /// `softplus(Z_sigma²) + eps`
    pub evidence: Var<'t>,
    /// `evidence + 1`
    pub beta: Var<'t>,
    /// `1 / beta`
    pub uncertainty: Var<'t>,
}

pub fn evidential_state<'t>(z_sigma: Var<'t>, eps: f64) -> Result<EvidentialState<'t>> {
    let evidence = z_sigma.square()?.softplus()?.add_scalar(eps)?;
    let beta = evidence.add_scalar(1.0)?;
    let uncertainty = beta.reciprocal()?;
    Ok(EvidentialState {
        evidence,
        beta,
        uncertainty,
    })
}

/// Masses on the binary frame {apply update, ignorance}.
#[derive(Clone, Copy, Debug)]
pub struct BeliefPair<'t> {
    pub support: Var<'t>,
    pub ignorance: Var<'t>,
}

const MASS_SLACK: f64 = 1e-9;

pub fn belief_masses(u: Var<'_>) -> Result<BeliefPair<'_>> {
    let bad = u.with_values(|v| {
        v.iter()
            .copied()
            .find(|x| !(-MASS_SLACK..=1.0 + MASS_SLACK).contains(x))
    });
    if let Some(x) = bad {
        return Err(Error::Contract(format!("uncertainty {x} outside [0, 1]")));
    }
    Ok(BeliefPair {
        support: u.neg()?.add_scalar(1.0)?,
        ignorance: u,
    })
}

/// Mean over classes of the uncertainty at each class's summary token:
/// `[C, P_t, r] -> [1, 1, r]`.
pub fn pool_text_uncertainty<'t>(u_text: Var<'t>, eos_index: &[usize]) -> Result<Var<'t>> {
    u_text.gather_tokens(eos_index)?.mean_axes(&[0], true)
}

/// Dempster's rule on the binary frame, returning the fused support
/// `b_t b_v / (1 − (b_t u_v + u_t b_v) + eps)` with broadcasting.
pub fn ds_combine<'t>(text: BeliefPair<'t>, vision: BeliefPair<'t>, eps: f64) -> Result<Var<'t>> {
    let agreement = text.support.mul(vision.support)?;
    let conflict = text
        .support
        .mul(vision.ignorance)?
        .add(text.ignorance.mul(vision.support)?)?;
    let denom = conflict.neg()?.add_scalar(1.0 + eps)?;
    let min = denom.with_values(|v| v.iter().copied().fold(f64::INFINITY, f64::min));
    if min < eps / 2.0 {
        return Err(Error::Numerical(format!(
            "Dempster normalizer {min} below eps/2; mass pairs are not valid"
        )));
    }
    agreement.div(denom)
}

/// `G = sigmoid(support · w + b)` per token, then `G ⊙ update`.
pub fn confidence_gate<'t>(
    support: Var<'t>,
    w: Var<'t>,
    bias: Var<'t>,
    update: Var<'t>,
) -> Result<Var<'t>> {
    let gate = support.matmul(w)?.add(bias)?.sigmoid()?;
    let (gs, us) = (gate.shape(), update.shape());
    if gs.len() != us.len() || gs[..gs.len() - 1] != us[..us.len() - 1] {
        return Err(Error::shapes("gate vs update", &gs, &us));
    }
    gate.mul(update)
}

/// Mean over entries of `KL(Gamma(β,1) ‖ Gamma(1,1)) = (β−1)ψ(β) − ln Γ(β)`.
pub fn kl_gamma_regularizer(beta: Var<'_>) -> Result<Var<'_>> {
    let bad = beta.with_values(|v| v.iter().copied().find(|&x| !(x > 0.0)));
    if let Some(x) = bad {
        return Err(Error::Domain(format!("concentration {x} is not positive")));
    }
    beta.add_scalar(-1.0)?
        .mul(beta.digamma()?)?
        .sub(beta.lgamma()?)?
        .mean()
}

/// Output of one adapted layer. `None` stands for an exactly-zero update or
/// regularizer.
#[derive(Clone, Copy, Debug)]
pub struct AdapterOutput<'t> {
    pub delta_vision: Option<Var<'t>>,
    pub delta_text: Option<Var<'t>>,
    pub kl: Option<Var<'t>>,
}

struct Branch<'t> {
    update: Var<'t>,
    state: EvidentialState<'t>,
    belief: BeliefPair<'t>,
}

fn branch<'t>(tokens: Var<'t>, p: &ModalityAdapter<Var<'t>>, eps: f64) -> Result<Branch<'t>> {
    let (z_mu, z_sigma) = down_project(tokens, p.w_down, p.b_down)?;
    let state = evidential_state(z_sigma, eps)?;
    let belief = belief_masses(state.uncertainty)?;
    let update = up_project(z_mu, p.w_up, p.b_up)?;
    Ok(Branch {
        update,
        state,
        belief,
    })
}

/// The full per-layer pipeline for vision tokens `[B, P_v, D_v]` and text
/// tokens `[C, P_t, D_t]`.
///
/// Component toggles in `cfg`:
/// - `vision_adapt` / `text_adapt` off: that branch is skipped entirely; a
///   missing text branch also means the vision gate sees unimodal support.
/// - `evidential_gate` off: updates pass ungated and no KL term is produced.
/// - `crossmodal_belief` off: the vision gate is fed the unimodal vision
///   support instead of the fused mass.
pub fn adapter_forward<'t>(
    vision: Var<'t>,
    text: Var<'t>,
    params: &AdapterLayerParams<Var<'t>>,
    cfg: &SteeringConfig,
    eos_index: &[usize],
) -> Result<AdapterOutput<'t>> {
    let comp = cfg.components;
    let text_branch = if comp.text_adapt {
        Some(branch(text, &params.text, cfg.eps)?)
    } else {
        None
    };
    let vision_branch = if comp.vision_adapt {
        Some(branch(vision, &params.vision, cfg.eps)?)
    } else {
        None
    };

    if !comp.evidential_gate {
        return Ok(AdapterOutput {
            delta_vision: vision_branch.map(|b| b.update),
            delta_text: text_branch.map(|b| b.update),
            kl: None,
        });
    }

    let delta_text = match &text_branch {
        Some(b) => Some(confidence_gate(
            b.belief.support,
            params.text.w_gate,
            params.text.b_gate,
            b.update,
        )?),
        None => None,
    };
    let delta_vision = match &vision_branch {
        Some(vb) => {
            let support = match (&text_branch, comp.crossmodal_belief) {
                (Some(tb), true) => {
                    let pooled = pool_text_uncertainty(tb.state.uncertainty, eos_index)?;
                    ds_combine(belief_masses(pooled)?, vb.belief, cfg.fusion_eps)?
                }
                _ => vb.belief.support,
            };
            Some(confidence_gate(
                support,
                params.vision.w_gate,
                params.vision.b_gate,
                vb.update,
            )?)
        }
        None => None,
    };

    let mut kl_terms = Vec::with_capacity(2);
    for b in vision_branch.iter().chain(text_branch.iter()) {
        kl_terms.push(kl_gamma_regularizer(b.state.beta)?);
    }
    let kl = match kl_terms.as_slice() {
        [] => None,
        [one] => Some(*one),
        [a, b] => Some(a.add(*b)?.mul_scalar(0.5)?),
        _ => unreachable!(),
    };
    Ok(AdapterOutput {
        delta_vision,
        delta_text,
        kl,
    })
}
