//! Combining the per-group representations into one embedding, and the
//! cosine classifier on top of it.

use crate::error::{Error, Result};
use crate::model::Fusion;
use crate::numerics::{Graph, TensorRef};

fn check_reps(g: &Graph, op: &'static str, probs: TensorRef, reps: &[TensorRef]) -> Result<(usize, usize)> {
    if reps.is_empty() {
        return Err(Error::invalid(op, "empty representation list"));
    }
    let pshape = g.value(probs).shape();
    if pshape.len() != 2 {
        return Err(Error::invalid(op, format!("expected [n x k] probabilities, got {:?}", pshape)));
    }
    let (n, k) = (pshape[0], pshape[1]);
    if k != reps.len() {
        return Err(Error::invalid(
            op,
            format!("{} probability columns for {} representations", k, reps.len()),
        ));
    }
    for &r in reps {
        let rshape = g.value(r).shape();
        if rshape.len() != 2 || rshape[0] != n {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![n, k],
                rhs: rshape.to_vec(),
            });
        }
    }
    Ok((n, k))
}

/// Probability-weighted sum of the group representations:
/// `out[i] = Σ_k probs[i,k] · reps[k][i]`.
///
/// Rows of `probs` must be non-negative and sum to one.
pub fn soft_ensemble(g: &mut Graph, probs: TensorRef, reps: &[TensorRef]) -> Result<TensorRef> {
    let (n, k) = check_reps(g, "soft_ensemble", probs, reps)?;
    let pd = g.value(probs).data();
    for r in 0..n {
        let row = &pd[r * k..(r + 1) * k];
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| p < -1e-12) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(
                "soft_ensemble",
                format!("row {} is not a probability vector (sum {})", r, sum),
            ));
        }
    }
    let mut acc: Option<TensorRef> = None;
    for (idx, &rep) in reps.iter().enumerate() {
        let p = g.column(probs, idx)?;
        let term = g.mul_col_broadcast(p, rep)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one representation"))
}

/// Per sample, picks the representation of the most probable group; ties
/// go to the lowest group index. Selection sees only the argmax, so no
/// gradient reaches the probabilities and any positive rescaling of a
/// row leaves the output bit-identical.
pub fn hard_ensemble(g: &mut Graph, probs: TensorRef, reps: &[TensorRef]) -> Result<TensorRef> {
    check_reps(g, "hard_ensemble", probs, reps)?;
    let choices = g.argmax_rows(probs)?;
    g.choose_rows(reps, &choices)
}

/// Combines the instance representation with the group ensemble.
pub fn fuse(g: &mut Graph, instance: TensorRef, group: TensorRef, mode: Fusion) -> Result<TensorRef> {
    match mode {
        Fusion::Aggregate => g.add(instance, group),
        Fusion::Concatenate => g.concat_cols(instance, group),
    }
}

/// Cosine similarity of each feature row against each classifier row:
/// both sides are unit-normalized, so every logit lands in `[-1, 1]`.
pub fn identity_logits(g: &mut Graph, features: TensorRef, classifier: TensorRef) -> Result<TensorRef> {
    let f = g.l2_normalize(features)?;
    let w = g.l2_normalize(classifier)?;
    g.matmul_nt(f, w)
}
