//! Training objectives.
//!
//! The identity loss is a margin softmax over cosine logits: the target
//! cosine is penalized by an additive angular margin (arcface mode,
//! `cos(θ_y + m)`), an additive cosine margin (cosface mode, `cos θ_y − m`),
//! or left alone (plain mode), then everything is scaled and fed through
//! softmax cross-entropy. The self-grouping loss is plain cross-entropy
//! between the decision network's logits and the group labels it was
//! assigned; the labels are constants, so no gradient flows through the
//! labeling itself.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, TensorRef};

/// Keeps `acos` differentiable: the target cosine is clamped this far
/// inside `[-1, 1]` before the angle is taken.
const COS_CLAMP: f64 = 1e-7;
/// Slack accepted on incoming cosines before they count as out of range.
const COS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginMode {
    ArcFace,
    CosFace,
    Plain,
}

impl MarginMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "arcface" => Ok(MarginMode::ArcFace),
            "cosface" => Ok(MarginMode::CosFace),
            "plain" => Ok(MarginMode::Plain),
            other => Err(Error::Config(format!(
                "unknown margin_mode '{}', expected arcface|cosface|plain",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MarginMode::ArcFace => "arcface",
            MarginMode::CosFace => "cosface",
            MarginMode::Plain => "plain",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub margin_mode: MarginMode,
    pub scale: f64,
    pub margin: f64,
    /// Weight of the self-grouping loss in the combined objective.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin_mode: MarginMode::ArcFace,
            scale: 64.0,
            margin: 0.5,
            lambda: 0.1,
        }
    }
}

impl LossConfig {
    pub fn cosface() -> Self {
        LossConfig {
            margin_mode: MarginMode::CosFace,
            margin: 0.35,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be non-negative, got {}", self.margin)));
        }
        if self.margin_mode == MarginMode::ArcFace && self.margin >= std::f64::consts::PI {
            return Err(Error::Config(format!(
                "arcface margin must stay below pi, got {}",
                self.margin
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Margin softmax over cosine logits, averaged across the batch.
pub fn margin_softmax_loss(
    g: &mut Graph,
    cosines: TensorRef,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<TensorRef> {
    cfg.validate()?;
    let shape = g.value(cosines).shape().to_vec();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::invalid(
            "margin_softmax_loss",
            format!("expected [n x m] cosines with m >= 2, got {:?}", shape),
        ));
    }
    let (n, m) = (shape[0], shape[1]);
    check_labels("margin_softmax_loss", labels, n, m)?;
    if g.value(cosines)
        .data()
        .iter()
        .any(|v| !v.is_finite() || v.abs() > 1.0 + COS_TOL)
    {
        return Err(Error::invalid("margin_softmax_loss", "cosines outside [-1, 1]"));
    }

    let modified = match cfg.margin_mode {
        MarginMode::Plain => cosines,
        MarginMode::CosFace => {
            let shifted = g.add_scalar(cosines, -cfg.margin)?;
            blend_target(g, cosines, shifted, labels, m)?
        }
        MarginMode::ArcFace => {
            let clamped = g.clamp(cosines, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)?;
            let theta = g.acos(clamped)?;
            let widened = g.add_scalar(theta, cfg.margin)?;
            let target = g.cos(widened)?;
            blend_target(g, cosines, target, labels, m)?
        }
    };
    let logits = g.scale(modified, cfg.scale)?;
    mean_cross_entropy(g, logits, labels)
}

/// Mean cross-entropy between `softmax(gdn_logits)` and the assigned
/// group labels.
pub fn self_grouping_loss(g: &mut Graph, gdn_logits: TensorRef, labels: &[usize]) -> Result<TensorRef> {
    let shape = g.value(gdn_logits).shape().to_vec();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::invalid(
            "self_grouping_loss",
            format!("expected [n x k] logits with k >= 2, got {:?}", shape),
        ));
    }
    check_labels("self_grouping_loss", labels, shape[0], shape[1])?;
    mean_cross_entropy(g, gdn_logits, labels)
}

/// `total = l1 + lambda * l2`; both inputs must be scalars.
pub fn combined_loss(g: &mut Graph, l1: TensorRef, l2: TensorRef, lambda: f64) -> Result<TensorRef> {
    for r in [l1, l2] {
        if g.value(r).numel() != 1 {
            return Err(Error::invalid(
                "combined_loss",
                format!("expected scalar loss, got shape {:?}", g.value(r).shape()),
            ));
        }
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("combined_loss", format!("bad lambda {}", lambda)));
    }
    let weighted = g.scale(l2, lambda)?;
    g.add(l1, weighted)
}

fn check_labels(op: &'static str, labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::invalid(
            op,
            format!("{} labels for {} rows", labels.len(), n),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(op, format!("label {} out of {} classes", bad, classes)));
    }
    Ok(())
}

/// Replaces the target entry of each row of `base` with the matching entry
/// of `transformed`, leaving non-target entries untouched.
fn blend_target(
    g: &mut Graph,
    base: TensorRef,
    transformed: TensorRef,
    labels: &[usize],
    m: usize,
) -> Result<TensorRef> {
    let n = labels.len();
    let mut mask = vec![0.0; n * m];
    let mut inv = vec![1.0; n * m];
    for (r, &l) in labels.iter().enumerate() {
        mask[r * m + l] = 1.0;
        inv[r * m + l] = 0.0;
    }
    let mask = g.constant(Tensor::new(vec![n, m], mask)?);
    let inv = g.constant(Tensor::new(vec![n, m], inv)?);
    let kept = g.mul(base, inv)?;
    let swapped = g.mul(transformed, mask)?;
    g.add(kept, swapped)
}

fn mean_cross_entropy(g: &mut Graph, logits: TensorRef, labels: &[usize]) -> Result<TensorRef> {
    let m = g.value(logits).shape()[1];
    let n = labels.len();
    let mut mask = vec![0.0; n * m];
    for (r, &l) in labels.iter().enumerate() {
        mask[r * m + l] = 1.0;
    }
    let mask = g.constant(Tensor::new(vec![n, m], mask)?);
    let picked = g.mul(logits, mask)?;
    let target = g.row_sum(picked)?;
    let lse = g.logsumexp_rows(logits)?;
    let ce = g.sub(lse, target)?;
    g.mean_all(ce)
}
