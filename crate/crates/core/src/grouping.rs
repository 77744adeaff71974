//! Group-label bookkeeping.
//!
//! The trainer never sees ground-truth groups. Labels come from the
//! decision network's own probabilities, renormalized against their
//! running expectation so that no group can absorb the whole batch:
//!
//! `p̃_k = (p_k − E[p_k]) / K + 1/K`
//!
//! which keeps every component in `[0, 2/K]` and pins the batch mean of
//! `p̃` at exactly `1/K` when the expectation is estimated from the batch
//! itself. The expectation is tracked as a ring buffer of recent
//! per-batch means.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::numerics::{argmax, Tensor};

/// Running estimate of `E[p(G_k|x)]` over the most recent batches.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupState {
    num_groups: usize,
    window: usize,
    buffer: VecDeque<Vec<f64>>,
    batches_seen: u64,
}

impl GroupState {
    pub fn new(num_groups: usize, window: usize) -> Result<Self> {
        if num_groups < 2 {
            return Err(Error::invalid("group_state", format!("need at least 2 groups, got {}", num_groups)));
        }
        if window == 0 {
            return Err(Error::invalid("group_state", "window must be positive"));
        }
        Ok(GroupState {
            num_groups,
            window,
            buffer: VecDeque::new(),
            batches_seen: 0,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn batches_seen(&self) -> u64 {
        self.batches_seen
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Retained per-batch means, oldest first.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.buffer.iter().cloned().collect()
    }

    /// Rebuilds a state from its serialized parts.
    pub fn from_parts(
        num_groups: usize,
        window: usize,
        batches_seen: u64,
        entries: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let mut state = GroupState::new(num_groups, window)?;
        let expected = batches_seen.min(window as u64) as usize;
        if entries.len() != expected {
            return Err(Error::invalid(
                "group_state",
                format!(
                    "{} retained entries inconsistent with {} batches over window {}",
                    entries.len(),
                    batches_seen,
                    window
                ),
            ));
        }
        for e in &entries {
            if e.len() != num_groups || e.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("group_state", "malformed retained entry"));
            }
        }
        state.buffer = entries.into();
        state.batches_seen = batches_seen;
        Ok(state)
    }

    /// Folds one batch of probabilities into the window, evicting the
    /// oldest entry once the window is full.
    pub fn update(&mut self, batch_probs: &Tensor) -> Result<()> {
        let mean = batch_mean(batch_probs, self.num_groups)?;
        if self.buffer.len() == self.window {
            self.buffer.pop_front();
        }
        self.buffer.push_back(mean);
        self.batches_seen += 1;
        Ok(())
    }

    /// Mean probability vector over the buffered batches.
    pub fn expectation(&self) -> Result<Vec<f64>> {
        if self.buffer.is_empty() {
            return Err(Error::invalid("group_state", "expectation of an empty window"));
        }
        let mut e = vec![0.0; self.num_groups];
        for entry in &self.buffer {
            for (acc, v) in e.iter_mut().zip(entry) {
                *acc += v;
            }
        }
        let n = self.buffer.len() as f64;
        e.iter_mut().for_each(|v| *v /= n);
        Ok(e)
    }

    /// Like [`GroupState::expectation`] but seeds an untouched window with
    /// the uniform vector, the safe start before any batch has arrived.
    pub fn expectation_or_uniform(&self) -> Vec<f64> {
        self.expectation()
            .unwrap_or_else(|_| vec![1.0 / self.num_groups as f64; self.num_groups])
    }

    /// Combines per-worker states that advanced in lockstep by averaging
    /// their per-step entries. Merging one state (or several identical
    /// ones) reproduces that state.
    pub fn merge(states: &[GroupState]) -> Result<GroupState> {
        let first = states
            .first()
            .ok_or_else(|| Error::invalid("group_state", "merge of zero states"))?;
        for s in states {
            if s.num_groups != first.num_groups || s.window != first.window {
                return Err(Error::invalid(
                    "group_state",
                    format!(
                        "merge requires identical geometry: {}x{} vs {}x{}",
                        first.num_groups, first.window, s.num_groups, s.window
                    ),
                ));
            }
            if s.buffer.len() != first.buffer.len() || s.batches_seen != first.batches_seen {
                return Err(Error::invalid(
                    "group_state",
                    "merge requires states advanced in lockstep",
                ));
            }
        }
        let mut merged = first.clone();
        let count = states.len() as f64;
        for (i, entry) in merged.buffer.iter_mut().enumerate() {
            for (k, v) in entry.iter_mut().enumerate() {
                let mut acc = 0.0;
                for s in states {
                    acc += s.buffer[i][k];
                }
                *v = acc / count;
            }
        }
        Ok(merged)
    }
}

fn batch_mean(batch_probs: &Tensor, num_groups: usize) -> Result<Vec<f64>> {
    let shape = batch_probs.shape();
    if shape.len() != 2 || shape[1] != num_groups {
        return Err(Error::invalid(
            "group_state",
            format!("expected [n x {}] probabilities, got shape {:?}", num_groups, shape),
        ));
    }
    let n = shape[0];
    if n == 0 {
        return Err(Error::invalid("group_state", "empty batch"));
    }
    if !batch_probs.all_finite() {
        return Err(Error::NonFinite { op: "group_state" });
    }
    let mut mean = vec![0.0; num_groups];
    for r in 0..n {
        for (acc, v) in mean.iter_mut().zip(batch_probs.row(r)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    Ok(mean)
}

/// Expectation-normalized probabilities `p̃ = (p − e)/K + 1/K`, row-wise.
pub fn expectation_normalized(probs: &Tensor, expectation: &[f64]) -> Result<Tensor> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[1] != expectation.len() {
        return Err(Error::invalid(
            "expectation_normalized",
            format!("probabilities {:?} vs expectation of length {}", shape, expectation.len()),
        ));
    }
    let k = expectation.len() as f64;
    let (n, d) = (shape[0], shape[1]);
    let mut data = vec![0.0; n * d];
    for r in 0..n {
        let row = probs.row(r);
        for c in 0..d {
            data[r * d + c] = (row[c] - expectation[c]) / k + 1.0 / k;
        }
    }
    Tensor::new(vec![n, d], data)
}

/// Self-distributed labels: argmax of `p̃` under the supplied expectation.
pub fn assign_labels_with_expectation(probs: &Tensor, expectation: &[f64]) -> Result<Vec<usize>> {
    let normalized = expectation_normalized(probs, expectation)?;
    Ok((0..normalized.shape()[0])
        .map(|r| argmax(normalized.row(r)))
        .collect())
}

/// Self-distributed labels against the state's current expectation.
/// The state must have seen at least one batch.
pub fn assign_labels_self_distributed(probs: &Tensor, state: &GroupState) -> Result<Vec<usize>> {
    let e = state.expectation()?;
    assign_labels_with_expectation(probs, &e)
}

/// Naive labels: plain row-wise argmax of the probabilities.
pub fn assign_labels_naive(probs: &Tensor) -> Result<Vec<usize>> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::invalid(
            "assign_labels",
            format!("expected [n x k] probabilities with k >= 2, got {:?}", shape),
        ));
    }
    Ok((0..shape[0]).map(|r| argmax(probs.row(r))).collect())
}
