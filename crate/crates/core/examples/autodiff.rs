//! Reverse-mode gradients on the tape, checked against central differences.

use evisteer::tensor::grad_check;
use evisteer::{Tape, Tensor};

fn main() -> evisteer::Result<()> {
    let tape = Tape::new();
    let x = tape.variable(Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, -0.3])?);
    let w = tape.variable(Tensor::new(&[3, 1], vec![1.0, -2.0, 0.5])?);
    // softplus(x·w) summed over the batch
    let y = x.matmul(w)?.softplus()?.sum()?;
    let grads = tape.backward(y)?;
    println!("loss   = {:.6}", y.item()?);
    println!("dL/dw  = {:?}", grads.get(w).unwrap().data());

    let params = [
        Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, -0.3])?,
        Tensor::new(&[3, 1], vec![1.0, -2.0, 0.5])?,
    ];
    let report = grad_check(&params, 1e-5, |_, v| v[0].matmul(v[1])?.softplus()?.sum())?;
    println!(
        "gradcheck: max relative error {:.2e} over {} entries",
        report.max_rel_error, report.entries_checked
    );

    // Special functions carry their own derivatives.
    let tape = Tape::new();
    let b = tape.variable(Tensor::from_vec(vec![0.5, 2.0]));
    let lg = b.lgamma()?.sum()?;
    let g = tape.backward(lg)?;
    println!("d/db lnΓ(b) = ψ(b) = {:?}", g.get(b).unwrap().data());
    Ok(())
}
