//! Momentum SGD with coupled weight decay and a staged learning-rate
//! schedule.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};

/// Piecewise-constant learning rate: each entry `(step, rate)` takes
/// effect at `step` and holds until the next entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    entries: Vec<(u64, f64)>,
}

impl Schedule {
    pub fn new(entries: Vec<(u64, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("learning-rate schedule is empty".into()));
        }
        if entries[0].0 != 0 {
            return Err(Error::Config("learning-rate schedule must start at step 0".into()));
        }
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config(format!(
                    "schedule steps must increase: {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        for &(s, r) in &entries {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("rate at step {} must be positive, got {}", s, r)));
            }
        }
        Ok(Schedule { entries })
    }

    /// Three stages at 5e-3 / 5e-4 / 5e-5, switching after 5/8 and 7/8 of
    /// the run. Mirrors a long staged schedule rescaled to `total` steps.
    pub fn staged(total: u64) -> Self {
        let mut entries = vec![(0, 5e-3)];
        for (num, rate) in [(5u64, 5e-4), (7u64, 5e-5)] {
            let at = total * num / 8;
            // Collapse duplicates for tiny runs, keeping the later rate.
            if entries.last().map(|e| e.0) == Some(at) {
                entries.last_mut().unwrap().1 = rate;
            } else {
                entries.push((at, rate));
            }
        }
        Schedule { entries }
    }

    pub fn rate_at(&self, step: u64) -> f64 {
        let idx = self.entries.partition_point(|&(s, _)| s <= step);
        self.entries[idx - 1].1
    }

    pub fn entries(&self) -> &[(u64, f64)] {
        &self.entries
    }
}

/// Classic momentum SGD. Weight decay is coupled: it is added to the
/// gradient before the velocity update, so it passes through momentum.
/// Parameters can be frozen individually; frozen slots are skipped
/// entirely (no decay, no velocity).
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
    frozen: Vec<bool>,
}

impl Sgd {
    pub fn new(param_sizes: &[usize], momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", momentum)));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {}", weight_decay)));
        }
        Ok(Sgd {
            momentum,
            weight_decay,
            velocity: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            frozen: vec![false; param_sizes.len()],
        })
    }

    pub fn freeze(&mut self, indices: impl IntoIterator<Item = usize>) -> Result<()> {
        for i in indices {
            *self
                .frozen
                .get_mut(i)
                .ok_or_else(|| Error::invalid("sgd_freeze", format!("no parameter {}", i)))? = true;
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::invalid(
                "sgd_step",
                format!(
                    "optimizer tracks {} parameters, got {} tensors and {} gradients",
                    self.velocity.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid("sgd_step", format!("bad learning rate {}", lr)));
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if self.frozen[i] {
                continue;
            }
            let v = &mut self.velocity[i];
            if p.numel() != v.len() || g.len() != v.len() {
                return Err(Error::invalid(
                    "sgd_step",
                    format!("parameter {} size changed: {} vs {}", i, p.numel(), v.len()),
                ));
            }
            let data = p.data_mut();
            for j in 0..v.len() {
                let update = g[j] + self.weight_decay * data[j];
                v[j] = self.momentum * v[j] + update;
                data[j] -= lr * v[j];
            }
        }
        Ok(())
    }
}
