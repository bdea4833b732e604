use crate::error::{Error, Result};

/// Shape produced by broadcasting `a` against `b` with trailing alignment.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shapes("cannot broadcast", a, b)),
        };
    }
    Ok(out)
}

/// Strides of `input` viewed through `out`; broadcast axes get stride 0.
pub(crate) fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - input.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[i + pad] = acc;
        }
        acc *= input[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
pub(crate) fn zip_indices(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let total: usize = out.iter().product();
    if rank == 0 || total == 0 {
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut counters = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, ia + j * ia_step, ib + j * ib_step);
        }
        o += inner;
        for d in (0..rank - 1).rev() {
            counters[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counters[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            counters[d] = 0;
        }
    }
}

/// Sums `grad` (shaped like `out`) down to `target`, the pre-broadcast shape.
pub(crate) fn reduce_to_shape(grad: &[f64], out: &[usize], target: &[usize]) -> Vec<f64> {
    if out == target {
        return grad.to_vec();
    }
    let n: usize = target.iter().product();
    let mut acc = vec![0.0; n];
    let st = broadcast_strides(target, out);
    let zero = vec![0; out.len()];
    zip_indices(out, &st, &zero, |o, i, _| acc[i] += grad[o]);
    acc
}
