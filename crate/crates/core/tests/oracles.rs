//! Finite-difference and closed-form oracles for the differentiable pieces.

use geocollapse::metrics::{empirical_gc, hutchinson_trace, sampled_gc, sharpness_estimate, SampleMode};
use geocollapse::nn::{
    forward, hvp, init_params, input_jacobian, logit_gc_and_grad, loss_and_grad, Activation, NetworkSpec, Parameters, Subnet,
};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn with_flat(params: &Parameters, theta: &[f64]) -> Parameters {
    Parameters::from_flat(&params.spec, theta).unwrap()
}

fn loss_at(params: &Parameters, theta: &[f64], x: &Array2<f64>, y: &[usize]) -> f64 {
    loss_and_grad(&with_flat(params, theta), x.view(), y).unwrap().0
}

fn nets() -> Vec<Parameters> {
    vec![
        init_params(&NetworkSpec::new(vec![4, 6, 5, 3], Activation::Tanh).unwrap(), 11),
        init_params(&NetworkSpec::new(vec![4, 6, 5, 3], Activation::Relu).unwrap(), 12),
        init_params(&NetworkSpec::new(vec![3, 5, 4], Activation::Tanh).unwrap(), 13),
    ]
}

#[test]
fn parameter_gradient_matches_central_differences() {
    let x = gaussian(7, 4, 1);
    let y = [0, 1, 2, 0, 1, 2, 1];
    for params in nets().into_iter().take(2) {
        let (_, grad) = loss_and_grad(&params, x.view(), &y).unwrap();
        let grad = grad.to_flat();
        let theta = params.to_flat();
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            tp[i] += h;
            let mut tm = theta.clone();
            tm[i] -= h;
            let fd = (loss_at(&params, &tp, &x, &y) - loss_at(&params, &tm, &x, &y)) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-6 * grad[i].abs().max(1.0), "{:?} param {i}: fd {fd} vs {}", params.spec.activation, grad[i]);
        }
    }
}

#[test]
fn input_jacobian_matches_central_differences() {
    let x = gaussian(3, 4, 2);
    for params in nets().into_iter().take(2) {
        for subnet in [Subnet::Embedding, Subnet::Logit] {
            for row in x.outer_iter() {
                let jac = input_jacobian(&params, row, subnet).unwrap();
                let h = 1e-6;
                for t in 0..row.len() {
                    let mut xp = row.to_owned();
                    xp[t] += h;
                    let mut xm = row.to_owned();
                    xm[t] -= h;
                    let eval = |v: &Array1<f64>| {
                        let tr = forward(&params, v.view().insert_axis(ndarray::Axis(0))).unwrap();
                        match subnet {
                            Subnet::Embedding => tr.embedding().row(0).to_owned(),
                            Subnet::Logit => tr.logits().row(0).to_owned(),
                        }
                    };
                    let col = (eval(&xp) - eval(&xm)) / (2.0 * h);
                    for (o, fd) in col.iter().enumerate() {
                        let exact = jac[[o, t]];
                        assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(1.0), "{subnet:?} [{o},{t}]: {fd} vs {exact}");
                    }
                }
            }
        }
    }
}

#[test]
fn gc_penalty_gradient_matches_central_differences() {
    let x = gaussian(5, 4, 3);
    for params in nets().into_iter().take(2) {
        let (value, grad) = logit_gc_and_grad(&params, x.view()).unwrap();
        assert_eq!(value, empirical_gc(&params, x.view(), Subnet::Logit).unwrap().value);
        let grad = grad.to_flat();
        let theta = params.to_flat();
        let gc_at = |t: &[f64]| logit_gc_and_grad(&with_flat(&params, t), x.view()).unwrap().0;
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            tp[i] += h;
            let mut tm = theta.clone();
            tm[i] -= h;
            let fd = (gc_at(&tp) - gc_at(&tm)) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-4 * grad[i].abs().max(1.0), "{:?} param {i}: fd {fd} vs {}", params.spec.activation, grad[i]);
        }
    }
}

/// Hessian of the loss from second differences of the loss itself.
fn explicit_hessian(params: &Parameters, x: &Array2<f64>, y: &[usize]) -> Array2<f64> {
    let theta = params.to_flat();
    let n = theta.len();
    let h = 1e-4;
    let mut hess = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let at = |si: f64, sj: f64| {
                let mut t = theta.clone();
                t[i] += si * h;
                t[j] += sj * h;
                loss_at(params, &t, x, y)
            };
            let v = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h);
            hess[[i, j]] = v;
            hess[[j, i]] = v;
        }
    }
    hess
}

#[test]
fn hvp_and_sharpness_match_explicit_hessian() {
    let params = nets().pop().unwrap();
    let x = gaussian(6, 3, 4);
    let y = [0, 1, 2, 3, 0, 1];
    let hess = explicit_hessian(&params, &x, &y);
    let n = params.num_params();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let hv = hvp(&params, x.view(), &y, &with_flat(&params, &v), 1e-4).unwrap().to_flat();
    let oracle = hess.dot(&Array1::from(v));
    for (a, b) in hv.iter().zip(oracle.iter()) {
        assert!((a - b).abs() < 1e-5 * b.abs().max(1.0), "{a} vs {b}");
    }

    // Hutchinson is unbiased with variance 2 Σ_{i≠j} H_ij² per probe.
    let probes = 2000;
    let trace: f64 = (0..n).map(|i| hess[[i, i]]).sum();
    let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| hess[[i, j]].powi(2)).sum();
    let se = (2.0 * off / probes as f64).sqrt();
    let est = sharpness_estimate(&params, x.view(), &y, probes, &mut rng).unwrap() * n as f64;
    assert!((est - trace).abs() < 4.0 * se + 1e-6, "estimate {est}, trace {trace}, se {se}");
}

#[test]
fn hutchinson_exact_on_diagonal_quadratic() {
    // Rademacher probes recover the trace of a diagonal Hessian exactly.
    let diag = [1.0, -2.0, 0.5, 4.0];
    let grad = |t: &[f64]| t.iter().zip(&diag).map(|(a, d)| a * d).collect::<Vec<_>>();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let est = hutchinson_trace(grad, &[0.3, 0.1, -2.0, 1.0], 3, 1e-3, &mut rng);
    assert!((est - 3.5).abs() < 1e-9);
}

#[test]
fn sampled_gc_error_shrinks_like_inverse_sqrt_trials() {
    let params = init_params(&NetworkSpec::new(vec![6, 10, 8, 4], Activation::Tanh).unwrap(), 5);
    let x = gaussian(40, 6, 6);
    let exact = empirical_gc(&params, x.view(), Subnet::Embedding).unwrap().value;
    let reps = 400;
    let rms = |mode: SampleMode, size: usize, trials: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trials as u64);
        let mse: f64 = (0..reps)
            .map(|_| (sampled_gc(&params, x.view(), Subnet::Embedding, mode, size, trials, &mut rng).unwrap().value - exact).powi(2))
            .sum::<f64>()
            / reps as f64;
        mse.sqrt()
    };
    for (mode, size) in [(SampleMode::SampleExamples, 5), (SampleMode::SampleEntries, 12), (SampleMode::SampleOutputs, 2)] {
        let ratio = rms(mode, size, 1) / rms(mode, size, 16);
        assert!((3.2..=5.0).contains(&ratio), "{mode:?}: rms ratio {ratio}, expected about 4");
    }
}
