//! Learnable layers: fully-connected and batch normalization with running
//! statistics.

use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Tensor};
use rand::Rng;

pub const BN_EPS: f64 = 1e-5;
/// Running statistics keep this fraction of the old estimate per batch.
pub const BN_MOMENTUM: f64 = 0.9;

/// Fully-connected layer; weight is `[fan_in x fan_out]`, bias `[fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weight entries drawn uniformly from `±1/√fan_in`, bias zero.
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized by construction"),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn zeroed(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(vec![fan_in, fan_out]),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Batch normalization state: learnable affine plus running statistics
/// used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    /// Identity affine (gamma one, beta zero); running stats start at the
    /// standard-normal prior (mean zero, variance one).
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Tensor::new(vec![dim], vec![1.0; dim]).expect("sized by construction"),
            beta: Tensor::zeros(vec![dim]),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }

    /// Folds one batch's statistics into the running estimates:
    /// `new = momentum*old + (1-momentum)*batch`.
    pub fn absorb(&mut self, stats: &BatchStats) -> Result<()> {
        if stats.mean.len() != self.dim() || stats.var.len() != self.dim() {
            return Err(Error::invalid(
                "batch_norm",
                format!(
                    "statistics width {}/{} does not match layer width {}",
                    stats.mean.len(),
                    stats.var.len(),
                    self.dim()
                ),
            ));
        }
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn linear_init_respects_fan_in_bound() {
        let mut rng = StdRng::seed_from_u64(7);
        let l = Linear::new(16, 8, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(l.weight.data().iter().all(|w| w.abs() < bound));
        assert!(l.bias.data().iter().all(|&b| b == 0.0));
        assert_eq!(l.weight.shape(), &[16, 8]);
    }

    #[test]
    fn absorb_moves_running_stats_a_tenth_of_the_way() {
        let mut bn = BatchNorm::new(2);
        bn.absorb(&BatchStats {
            mean: vec![1.0, 2.0],
            var: vec![3.0, 5.0],
        })
        .unwrap();
        assert_abs_diff_eq!(bn.running_mean[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(bn.running_mean[1], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(bn.running_var[0], 0.9 + 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(bn.running_var[1], 0.9 + 0.5, epsilon = 1e-15);

        assert!(bn
            .absorb(&BatchStats {
                mean: vec![0.0],
                var: vec![1.0]
            })
            .is_err());
    }
}
