//! Dense-tensor substrate: eager ops recorded on a tape, reverse-mode
//! gradients, and a finite-difference checker. Everything is `f64`,
//! row-major, single-threaded, and deterministic.

mod check;
mod graph;
mod tensor;

pub use check::{gradient_check, GradCheck};
pub use graph::{BatchStats, Graph, TensorRef};
pub use tensor::{argmax, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn fully_connected_known_value() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let w = g.constant(Tensor::from_rows(&[vec![2.0, 3.0], vec![5.0, 7.0]]).unwrap());
        let b = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = g.fully_connected(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0]);
    }

    #[test]
    fn fully_connected_matches_naive_triple_loop() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(3);
        let (n, i, o) = (8, 8, 8);
        let xv: Vec<f64> = (0..n * i).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let wv: Vec<f64> = (0..i * o).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let bv: Vec<f64> = (0..o).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let mut naive = vec![0.0; n * o];
        for r in 0..n {
            for c in 0..o {
                let mut acc = 0.0;
                for k in 0..i {
                    acc += xv[r * i + k] * wv[k * o + c];
                }
                naive[r * o + c] = acc + bv[c];
            }
        }

        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![n, i], xv).unwrap());
        let w = g.constant(Tensor::new(vec![i, o], wv).unwrap());
        let b = g.constant(Tensor::new(vec![o], bv).unwrap());
        let y = g.fully_connected(x, w, b).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&naive) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn fully_connected_names_both_shapes_on_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 3]));
        let w = g.constant(Tensor::zeros(vec![2, 2]));
        let b = g.constant(Tensor::zeros(vec![2]));
        let msg = g.fully_connected(x, w, b).unwrap_err().to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{}", msg);
    }

    #[test]
    fn batch_norm_centers_and_scales() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap());
        let gamma = g.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        let beta = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let (y, stats) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        assert_abs_diff_eq!(g.value(y).data()[0], -1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(g.value(y).data()[1], 1.0, epsilon = 1e-4);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);
    }

    #[test]
    fn batch_norm_rejects_single_row_in_train_mode() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let gamma = g.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let beta = g.constant(Tensor::zeros(vec![2]));
        assert!(g.batch_norm_train(x, gamma, beta, 1e-5).is_err());
    }

    #[test]
    fn batch_norm_constant_batch_is_near_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![5.0, -2.0]; 4]).unwrap());
        let gamma = g.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let beta = g.constant(Tensor::zeros(vec![2]));
        let (y, _) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        for v in g.value(y).data() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_statistics() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0]]).unwrap());
        let gamma = g.constant(Tensor::new(vec![1], vec![2.0]).unwrap());
        let beta = g.constant(Tensor::new(vec![1], vec![0.5]).unwrap());
        let y = g.batch_norm_eval(x, gamma, beta, &[0.0], &[1.0], 0.0).unwrap();
        assert_abs_diff_eq!(g.value(y).data()[0], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn softmax_known_value_and_row_sums() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![2.0_f64.ln(), 0.0]]).unwrap());
        let y = g.softmax(x).unwrap();
        assert_abs_diff_eq!(g.value(y).data()[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(y).data()[1], 1.0 / 3.0, epsilon = 1e-12);

        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1000.0, 999.0, -1000.0], vec![0.0, 0.0, 0.0]]).unwrap());
        let y = g.softmax(x).unwrap();
        for r in 0..2 {
            let sum: f64 = g.value(y).row(r).iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap());
        assert!(g.softmax(x).is_err());
    }

    #[test]
    fn l2_normalize_known_value_and_zero_row() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let y = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);

        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        assert!(g.l2_normalize(x).is_err());
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![3.0]]).unwrap());
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_abs_diff_eq!(g.grad(x).unwrap()[0], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn unused_parameter_reports_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let y = g.param(Tensor::from_rows(&[vec![5.0]]).unwrap());
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates_gradients() {
        // loss = sum(x + x) → d/dx = 2 everywhere.
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap());
        let y = g.add(x, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn repeated_backward_accumulates_and_reset_clears() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![4.0]]).unwrap());
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
        g.reset_grads();
        assert_eq!(g.grad(x).unwrap(), &[0.0]);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(7);
        let xv: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |xv: &[f64], wv: &[f64]| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![3, 4], xv.to_vec()).unwrap());
            let w = g.param(Tensor::new(vec![4, 5], wv.to_vec()).unwrap());
            let b = g.param(Tensor::zeros(vec![5]));
            let y = g.fully_connected(x, w, b).unwrap();
            let s = g.softmax(y).unwrap();
            let loss = g.mean_all(s).unwrap();
            g.backward(loss).unwrap();
            g.grad(w).unwrap().to_vec()
        };
        assert_eq!(run(&xv, &wv), run(&xv, &wv));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let y = g.relu(x).unwrap();
        let err = g.backward(y).unwrap_err().to_string();
        assert!(err.contains("scalar"), "{}", err);
    }

    #[test]
    fn backward_visits_each_op_once() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let a = g.relu(x).unwrap();
        let b = g.add(a, a).unwrap();
        let loss = g.mean_all(b).unwrap();
        assert_eq!(g.num_ops(), 3);
        g.backward(loss).unwrap();
        // With a = relu(x) fanning out into both add arguments, a single
        // reverse sweep must produce d(mean(2a))/dx = 2/4 per element.
        assert_eq!(g.grad(x).unwrap(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn choose_rows_routes_gradients_to_selected_tensors() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.param(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let y = g.choose_rows(&[a, b], &[1, 0]).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 3.0, 4.0]);
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_column_round_trip() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let y = g.concat_cols(a, b).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3]);
        assert_eq!(g.value(y).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let c = g.column(y, 2).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn logsumexp_is_stable_for_large_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1000.0, 1000.0]]).unwrap());
        let y = g.logsumexp_rows(x).unwrap();
        assert_abs_diff_eq!(g.value(y).data()[0], 1000.0 + 2.0_f64.ln(), epsilon = 1e-9);
    }
}
