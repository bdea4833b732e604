//! The per-token quantities behind one steering step, on hand-picked inputs.

use evisteer::steering::{
    belief_masses, confidence_gate, count_parameters, ds_combine, evidential_state,
    kl_gamma_regularizer, SteeringConfig,
};
use evisteer::{Tape, Tensor};

fn main() -> evisteer::Result<()> {
    let cfg = SteeringConfig::default();
    let tape = Tape::inference();

    let z = tape.constant(Tensor::from_vec(vec![0.0, 0.5, 1.0, 3.0]));
    let state = evidential_state(z, cfg.eps)?;
    let masses = belief_masses(state.uncertainty)?;
    println!("Z^sigma     {:?}", z.value().data());
    println!("evidence    {:?}", state.evidence.value().data());
    println!("uncertainty {:?}", state.uncertainty.value().data());
    println!("support     {:?}", masses.support.value().data());

    // Text support 0.5 is neutral; confident text sharpens vision.
    for text_support in [0.5, 0.9] {
        let text = belief_masses(tape.constant(Tensor::from_vec(vec![1.0 - text_support])))?;
        let fused = ds_combine(text, masses, cfg.fusion_eps)?;
        println!("fused with text {text_support}: {:?}", fused.value().data());
    }

    let support = tape.constant(Tensor::new(&[1, 2], vec![0.9, 0.2])?);
    let update = tape.constant(Tensor::new(&[1, 3], vec![1.0, -1.0, 2.0])?);
    let w = tape.constant(Tensor::new(&[2, 1], vec![4.0, -1.0])?);
    let gated = confidence_gate(support, w, tape.scalar(-1.0), update)?;
    println!("gated update {:?}", gated.value().data());

    for beta in [0.5, 1.0, 2.0] {
        let kl = kl_gamma_regularizer(tape.constant(Tensor::from_vec(vec![beta])))?;
        println!("KL(Gamma({beta},1) || Gamma(1,1)) = {:.8}", kl.item()?);
    }

    let n = count_parameters(768, 768, 4, 11);
    println!("adapters for a 768-wide, 11-layer pair at r=4: {n} scalars");
    Ok(())
}
