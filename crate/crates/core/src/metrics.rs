//! Similarity functions and recognition metrics.
//!
//! Verification metrics use exact threshold sweeps over the observed
//! scores, no interpolation: results are reproducible and can be checked
//! against brute-force oracles at desk scale.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Parameters of the group-aware similarity penalty. The distance `D` is
/// fixed: Euclidean between unit-normalized decision features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            beta: 0.1,
            gamma: 1.0 / 3.0,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Aggregated evaluation results; serializes directly to the report JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by the decimal rendering of the false-accept level.
    pub tar_at_far: BTreeMap<String, f64>,
    pub rank1: f64,
    pub pair_accuracy: f64,
    pub label_histogram: Vec<u64>,
    pub kl_to_uniform: f64,
}

/// Map key used for a false-accept level in [`EvalReport::tar_at_far`].
pub fn far_key(level: f64) -> String {
    format!("{}", level)
}

/// One exact point of the verification trade-off curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    check_finite("cosine_similarity", a)?;
    check_finite("cosine_similarity", b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine_similarity", "zero vector"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Cosine similarity of the fused embeddings, penalized by how far apart
/// the two samples' decision features sit:
/// `S* = S - beta * D^gamma`, `D` the Euclidean distance between the
/// unit-normalized decision features. Never exceeds the plain cosine.
pub fn group_aware_similarity(
    emb_i: &[f64],
    emb_j: &[f64],
    feat_i: &[f64],
    feat_j: &[f64],
    cfg: &SimilarityConfig,
) -> Result<f64> {
    cfg.validate()?;
    let s = cosine_similarity(emb_i, emb_j)?;
    if feat_i.len() != feat_j.len() || feat_i.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "group_aware_similarity",
            lhs: vec![feat_i.len()],
            rhs: vec![feat_j.len()],
        });
    }
    check_finite("group_aware_similarity", feat_i)?;
    check_finite("group_aware_similarity", feat_j)?;
    let (ni, nj) = (norm(feat_i), norm(feat_j));
    if ni == 0.0 || nj == 0.0 {
        return Err(Error::invalid("group_aware_similarity", "zero decision feature"));
    }
    let d = feat_i
        .iter()
        .zip(feat_j)
        .map(|(x, y)| {
            let diff = x / ni - y / nj;
            diff * diff
        })
        .sum::<f64>()
        .sqrt();
    Ok(s - cfg.beta * d.powf(cfg.gamma))
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Fraction of `sorted_scores` strictly above `t`.
fn frac_above(sorted_scores: &[f64], t: f64) -> f64 {
    let below = sorted_scores.partition_point(|&s| s <= t);
    (sorted_scores.len() - below) as f64 / sorted_scores.len() as f64
}

fn check_score_lists(op: &'static str, genuine: &[f64], impostor: &[f64]) -> Result<()> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::invalid(op, "score lists must be non-empty"));
    }
    check_finite(op, genuine)?;
    check_finite(op, impostor)
}

/// Candidate thresholds: every distinct observed score, ascending.
fn candidate_thresholds(genuine: &[f64], impostor: &[f64]) -> Vec<f64> {
    let mut all = Vec::with_capacity(genuine.len() + impostor.len());
    all.extend_from_slice(genuine);
    all.extend_from_slice(impostor);
    all.sort_by(f64::total_cmp);
    all.dedup();
    all
}

/// True-accept rate at each false-accept level.
///
/// The operating threshold for a level is the smallest observed score `t`
/// whose impostor pass fraction (scores strictly above `t`) falls strictly
/// below the level; the rate is the genuine fraction above that `t`. A
/// threshold at the global maximum passes nothing, so every level in
/// `(0, 1]` is achievable. Returned pairs keep the input level order.
pub fn tar_at_far(genuine: &[f64], impostor: &[f64], far_levels: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_score_lists("tar_at_far", genuine, impostor)?;
    for &l in far_levels {
        if !(l > 0.0 && l <= 1.0) {
            return Err(Error::invalid("tar_at_far", format!("false-accept level {} outside (0, 1]", l)));
        }
    }
    let gen_sorted = sorted(genuine);
    let imp_sorted = sorted(impostor);
    let candidates = candidate_thresholds(genuine, impostor);
    let impostor_fracs: Vec<f64> = candidates.iter().map(|&t| frac_above(&imp_sorted, t)).collect();

    let mut out = Vec::with_capacity(far_levels.len());
    for &level in far_levels {
        // impostor_fracs is non-increasing over the ascending candidates.
        let idx = impostor_fracs.partition_point(|&f| f >= level);
        let tar = match candidates.get(idx) {
            Some(&t) => frac_above(&gen_sorted, t),
            None => 0.0,
        };
        out.push((level, tar));
    }
    Ok(out)
}

/// Exact trade-off curve sampled at every distinct observed score.
pub fn roc_points(genuine: &[f64], impostor: &[f64]) -> Result<Vec<RocPoint>> {
    check_score_lists("roc_points", genuine, impostor)?;
    let gen_sorted = sorted(genuine);
    let imp_sorted = sorted(impostor);
    Ok(candidate_thresholds(genuine, impostor)
        .into_iter()
        .map(|t| RocPoint {
            threshold: t,
            far: frac_above(&imp_sorted, t),
            tar: frac_above(&gen_sorted, t),
        })
        .collect())
}

/// Best achievable pair-classification accuracy over an exact sweep of
/// thresholds (midpoints of adjacent distinct scores plus both extremes);
/// a pair is called genuine when its score is strictly above the threshold.
pub fn pair_verification_accuracy(pairs: &[(f64, bool)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("pair_verification_accuracy", "no pairs"));
    }
    let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    check_finite("pair_verification_accuracy", &scores)?;
    let n_same = pairs.iter().filter(|p| p.1).count();
    if n_same == 0 || n_same == pairs.len() {
        return Err(Error::invalid(
            "pair_verification_accuracy",
            "need both genuine and impostor pairs",
        ));
    }
    let mut distinct = sorted(&scores);
    distinct.dedup();
    let mut thresholds = Vec::with_capacity(distinct.len() + 1);
    thresholds.push(distinct[0] - 1.0);
    thresholds.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    thresholds.push(distinct[distinct.len() - 1] + 1.0);

    let accuracy_at = |t: f64| -> f64 {
        let correct = pairs
            .iter()
            .filter(|(score, same)| (*score > t) == *same)
            .count();
        correct as f64 / pairs.len() as f64
    };
    Ok(thresholds
        .into_iter()
        .map(accuracy_at)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Fraction of probes whose most similar gallery row carries the right
/// identity. Similarity ties resolve toward the lower gallery index.
pub fn rank1_identification<F>(
    probes: &Tensor,
    probe_ids: &[usize],
    gallery: &Tensor,
    gallery_ids: &[usize],
    sim: F,
) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> Result<f64>,
{
    let (p, g) = (probes.rows(), gallery.rows());
    if p == 0 || g == 0 {
        return Err(Error::invalid("rank1_identification", "empty probe or gallery set"));
    }
    if probe_ids.len() != p || gallery_ids.len() != g {
        return Err(Error::invalid(
            "rank1_identification",
            format!(
                "{} probe ids for {} probes, {} gallery ids for {} rows",
                probe_ids.len(),
                p,
                gallery_ids.len(),
                g
            ),
        ));
    }
    for &id in probe_ids {
        let copies = gallery_ids.iter().filter(|&&gid| gid == id).count();
        if copies != 1 {
            return Err(Error::invalid(
                "rank1_identification",
                format!("probe identity {} appears {} times in the gallery, expected once", id, copies),
            ));
        }
    }
    let mut hits = 0usize;
    for (i, &id) in probe_ids.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0usize;
        for j in 0..g {
            let s = sim(probes.row(i), gallery.row(j))?;
            if s > best {
                best = s;
                best_idx = j;
            }
        }
        if gallery_ids[best_idx] == id {
            hits += 1;
        }
    }
    Ok(hits as f64 / p as f64)
}

/// Histogram of group assignments and the KL divergence of the empirical
/// distribution from uniform, in nats (`0 ln 0 = 0`).
pub fn label_distribution_stats(labels: &[usize], num_groups: usize) -> Result<(Vec<u64>, f64)> {
    if num_groups == 0 {
        return Err(Error::invalid("label_distribution_stats", "zero groups"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("label_distribution_stats", "no labels"));
    }
    let mut histogram = vec![0u64; num_groups];
    for &l in labels {
        if l >= num_groups {
            return Err(Error::invalid(
                "label_distribution_stats",
                format!("label {} out of {} groups", l, num_groups),
            ));
        }
        histogram[l] += 1;
    }
    let n = labels.len() as f64;
    let k = num_groups as f64;
    let kl = histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / n;
            q * (q * k).ln()
        })
        .sum();
    Ok((histogram, kl))
}
