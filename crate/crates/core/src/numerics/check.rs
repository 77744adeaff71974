use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, TensorRef};
use crate::numerics::tensor::Tensor;

/// Central-finite-difference validation of reverse-mode gradients.
///
/// The closure rebuilds the computation from scratch on every call, so the
/// analytic pass and each probe evaluate the same function. Relative error
/// uses a guarded denominator: components where both gradients are below
/// `denom_floor` are compared against the floor instead, which keeps
/// finite-difference round-off on near-zero gradients from dominating.
pub struct GradCheck {
    pub step: f64,
    pub denom_floor: f64,
    // Multiplies one parameter's analytic gradient after backward; used by
    // tests to prove the harness flags a wrong backward rule.
    corrupt: Option<(usize, f64)>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            denom_floor: 1e-8,
            corrupt: None,
        }
    }
}

impl GradCheck {
    pub fn with_step(step: f64) -> Self {
        GradCheck {
            step,
            ..GradCheck::default()
        }
    }

    pub fn new(step: f64, denom_floor: f64) -> Self {
        GradCheck {
            step,
            denom_floor,
            corrupt: None,
        }
    }

    #[cfg(test)]
    fn corrupted(step: f64, param: usize, factor: f64) -> Self {
        GradCheck {
            step,
            denom_floor: 1e-8,
            corrupt: Some((param, factor)),
        }
    }

    /// Returns the maximum guarded relative error over every component of
    /// every parameter.
    pub fn run<F>(&self, params: &[Tensor], mut f: F) -> Result<f64>
    where
        F: FnMut(&mut Graph, &[TensorRef]) -> Result<TensorRef>,
    {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid("gradient_check", format!("step {} must be positive", self.step)));
        }

        let mut analytic: Vec<Vec<f64>> = {
            let mut g = Graph::new();
            let refs: Vec<TensorRef> = params.iter().map(|p| g.param(p.clone())).collect();
            let loss = f(&mut g, &refs)?;
            let v = g.value(loss).scalar_value()?;
            if !v.is_finite() {
                return Err(Error::NonFinite { op: "gradient_check" });
            }
            g.backward(loss)?;
            refs.iter()
                .map(|r| g.grad(*r).expect("parameter gradient").to_vec())
                .collect()
        };
        if let Some((pi, factor)) = self.corrupt {
            analytic[pi].iter_mut().for_each(|v| *v *= factor);
        }

        let mut work: Vec<Tensor> = params.to_vec();
        let mut max_err = 0.0_f64;
        for pi in 0..params.len() {
            for j in 0..params[pi].numel() {
                let orig = work[pi].data()[j];
                work[pi].data_mut()[j] = orig + self.step;
                let up = self.eval(&work, &mut f)?;
                work[pi].data_mut()[j] = orig - self.step;
                let down = self.eval(&work, &mut f)?;
                work[pi].data_mut()[j] = orig;

                let numeric = (up - down) / (2.0 * self.step);
                let a = analytic[pi][j];
                let denom = a.abs().max(numeric.abs()).max(self.denom_floor);
                max_err = max_err.max((a - numeric).abs() / denom);
            }
        }
        Ok(max_err)
    }

    fn eval<F>(&self, params: &[Tensor], f: &mut F) -> Result<f64>
    where
        F: FnMut(&mut Graph, &[TensorRef]) -> Result<TensorRef>,
    {
        let mut g = Graph::new();
        let refs: Vec<TensorRef> = params.iter().map(|p| g.constant(p.clone())).collect();
        let loss = f(&mut g, &refs)?;
        let v = g.value(loss).scalar_value()?;
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "gradient_check" });
        }
        Ok(v)
    }
}

/// [`GradCheck`] with the default denominator guard.
pub fn gradient_check<F>(params: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &[TensorRef]) -> Result<TensorRef>,
{
    GradCheck::with_step(h).run(params, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_tensor(rng: &mut StdRng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let x = random_tensor(&mut rng, vec![3, 4]);
        let err = gradient_check(&[x], 1e-5, |g, p| {
            let sq = g.mul(p[0], p[0])?;
            g.sum_all(sq)
        })
        .unwrap();
        assert!(err < 1e-8, "max rel err {}", err);
    }

    #[test]
    fn constant_function_reports_zero_error() {
        let x = Tensor::from_rows(&[vec![0.3, -0.7]]).unwrap();
        let err = gradient_check(&[x], 1e-5, |g, p| {
            let zero = g.scale(p[0], 0.0)?;
            g.sum_all(zero)
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn corrupted_backward_rule_is_flagged() {
        let mut rng = StdRng::seed_from_u64(12);
        let x = random_tensor(&mut rng, vec![2, 3]);
        let err = GradCheck::corrupted(1e-5, 0, 2.0)
            .run(&[x], |g, p| {
                let sq = g.mul(p[0], p[0])?;
                g.sum_all(sq)
            })
            .unwrap();
        assert!(err > 0.1, "corruption must surface, got {}", err);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::scalar(1.0);
        assert!(gradient_check(&[x], 0.0, |g, p| g.sum_all(p[0])).is_err());
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        // Inputs are sampled away from ReLU kinks and clamp/acos edges so
        // the function is smooth at every probe.
        let mut rng = StdRng::seed_from_u64(13);
        let h = 1e-5;
        let tol = 1e-6;

        let x = {
            let mut t = random_tensor(&mut rng, vec![4, 3]);
            t.data_mut().iter_mut().for_each(|v| {
                if v.abs() < 0.05 {
                    *v += 0.1;
                }
            });
            t
        };
        let w = random_tensor(&mut rng, vec![3, 5]);
        let b = random_tensor(&mut rng, vec![5]);
        let m = random_tensor(&mut rng, vec![6, 3]);
        let gamma = random_tensor(&mut rng, vec![3]);
        let beta = random_tensor(&mut rng, vec![3]);
        let col = random_tensor(&mut rng, vec![4, 1]);

        type Case<'a> = (
            &'a str,
            Vec<Tensor>,
            Box<dyn FnMut(&mut Graph, &[TensorRef]) -> crate::Result<TensorRef>>,
        );
        let cases: Vec<Case> = vec![
            ("fully_connected", vec![x.clone(), w.clone(), b.clone()], Box::new(|g, p| {
                let y = g.fully_connected(p[0], p[1], p[2])?;
                g.sum_all(y)
            })),
            ("matmul_nt", vec![x.clone(), m.clone()], Box::new(|g, p| {
                let y = g.matmul_nt(p[0], p[1])?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            })),
            ("batch_norm_train", vec![x.clone(), gamma.clone(), beta.clone()], Box::new(|g, p| {
                let (y, _) = g.batch_norm_train(p[0], p[1], p[2], 1e-5)?;
                let sq = g.mul(y, y)?;
                g.mean_all(sq)
            })),
            ("batch_norm_eval", vec![x.clone(), gamma.clone(), beta.clone()], Box::new(|g, p| {
                let y = g.batch_norm_eval(p[0], p[1], p[2], &[0.1, -0.2, 0.3], &[1.1, 0.9, 1.3], 1e-5)?;
                let sq = g.mul(y, y)?;
                g.mean_all(sq)
            })),
            ("relu", vec![x.clone()], Box::new(|g, p| {
                let y = g.relu(p[0])?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            })),
            ("softmax", vec![x.clone()], Box::new(|g, p| {
                let y = g.softmax(p[0])?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            })),
            ("l2_normalize", vec![x.clone()], Box::new(|g, p| {
                let y = g.l2_normalize(p[0])?;
                let sq = g.mul(y, y)?;
                let c = g.column(sq, 1)?;
                g.sum_all(c)
            })),
            ("add_sub_mul_scale", vec![x.clone(), x.clone()], Box::new(|g, p| {
                let s = g.add(p[0], p[1])?;
                let d = g.sub(s, p[1])?;
                let pr = g.mul(d, p[1])?;
                let sc = g.scale(pr, 1.7)?;
                let sh = g.add_scalar(sc, 0.3)?;
                g.mean_all(sh)
            })),
            ("trig_chain", vec![x.clone()], Box::new(|g, p| {
                // cos(acos(clamp(x)) + 0.2): the margin transform shape.
                let c = g.clamp(p[0], -0.9, 0.9)?;
                let a = g.acos(c)?;
                let s = g.add_scalar(a, 0.2)?;
                let y = g.cos(s)?;
                g.sum_all(y)
            })),
            ("concat_cols", vec![x.clone(), x.clone()], Box::new(|g, p| {
                let y = g.concat_cols(p[0], p[1])?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            })),
            ("mul_col_broadcast", vec![col.clone(), x.clone()], Box::new(|g, p| {
                let y = g.mul_col_broadcast(p[0], p[1])?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            })),
            ("choose_rows", vec![x.clone(), x.clone()], Box::new(|g, p| {
                let y = g.choose_rows(&[p[0], p[1]], &[0, 1, 1, 0])?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            })),
            ("row_sum", vec![x.clone()], Box::new(|g, p| {
                let y = g.row_sum(p[0])?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            })),
            ("logsumexp_rows", vec![x.clone()], Box::new(|g, p| {
                let y = g.logsumexp_rows(p[0])?;
                g.sum_all(y)
            })),
        ];

        for (name, params, mut build) in cases {
            let err = gradient_check(&params, h, &mut build)
                .unwrap_or_else(|e| panic!("{}: {}", name, e));
            assert!(err < tol, "{}: max rel err {}", name, err);
        }
    }
}
