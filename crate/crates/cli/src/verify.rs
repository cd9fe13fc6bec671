//! Self-checks of the numerical core against independent computations:
//! finite differences, closed forms for linear maps, unbiasedness of the
//! sampled GC estimators, the Gaussian Poincaré inequality, dense linear
//! solves and second differences of the loss.

use geocollapse::data::gen_gaussian_mixture;
use geocollapse::metrics::{class_stats, embed_dataset, empirical_gc, geometric_collapse, nc_measure, sampled_gc, SampleMode};
use geocollapse::nn::{
    forward, hvp, init_params, input_jacobian, logit_gc_and_grad, loss_and_grad, Activation, NetworkSpec, Parameters, Subnet,
};
use geocollapse::transfer::{augment, ridge_fit};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &str, worst: f64, tol: f64, what: &str) -> CheckResult {
    CheckResult { name: name.into(), passed: worst <= tol, detail: format!("worst {what} {worst:.3e} (tolerance {tol:.0e})") }
}

fn random_params(widths: &[usize], act: Activation, rng: &mut ChaCha8Rng) -> Parameters {
    let spec = NetworkSpec::new(widths.to_vec(), act).expect("valid widths");
    let mut p = init_params(&spec, rng.random());
    for l in &mut p.layers {
        l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    p
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
}

fn small_widths(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let depth = rng.random_range(2..=3);
    let mut w: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=5)).collect();
    w.push(rng.random_range(2..=4));
    w
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn central_diff<F: Fn(&[f64]) -> f64>(f: F, theta: &[f64], eps: f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            t[i] = theta[i] + eps;
            let up = f(&t);
            t[i] = theta[i] - eps;
            let down = f(&t);
            t[i] = theta[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn check_param_gradient(cases: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0.0f64;
    for c in 0..cases {
        let act = if c % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let widths = small_widths(rng);
        let p = random_params(&widths, act, rng);
        let x = random_matrix(6, widths[0], rng);
        let y: Vec<usize> = (0..6).map(|i| i % widths.last().unwrap()).collect();
        let (_, g) = loss_and_grad(&p, x.view(), &y).unwrap();
        let theta = p.to_flat();
        let fd = central_diff(
            |t| loss_and_grad(&Parameters::from_flat(&p.spec, t).unwrap(), x.view(), &y).unwrap().0,
            &theta,
            1e-6,
        );
        worst = worst.max(rel_err(&g.to_flat(), &fd));
    }
    result("parameter_gradient", worst, 1e-6, "relative error")
}

fn check_input_jacobian(cases: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0.0f64;
    for c in 0..cases {
        let act = if c % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let widths = small_widths(rng);
        let p = random_params(&widths, act, rng);
        let x: Array1<f64> = random_matrix(1, widths[0], rng).row(0).to_owned();
        for subnet in [Subnet::Embedding, Subnet::Logit] {
            let j = input_jacobian(&p, x.view(), subnet).unwrap();
            for o in 0..j.nrows() {
                let out = |v: &[f64]| {
                    let xv = Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap();
                    let tr = forward(&p, xv.view()).unwrap();
                    match subnet {
                        Subnet::Embedding => tr.embedding()[[0, o]],
                        Subnet::Logit => tr.logits()[[0, o]],
                    }
                };
                let fd = central_diff(out, x.as_slice().unwrap(), 1e-6);
                worst = worst.max(rel_err(j.row(o).as_slice().unwrap(), &fd));
            }
        }
    }
    result("input_jacobian", worst, 1e-6, "relative error")
}

fn check_gc_gradient(cases: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let widths = small_widths(rng);
        let p = random_params(&widths, Activation::Tanh, rng);
        let x = random_matrix(4, widths[0], rng);
        let (_, g) = logit_gc_and_grad(&p, x.view()).unwrap();
        let fd = central_diff(
            |t| empirical_gc(&Parameters::from_flat(&p.spec, t).unwrap(), x.view(), Subnet::Logit).unwrap().value,
            &p.to_flat(),
            1e-5,
        );
        worst = worst.max(rel_err(&g.to_flat(), &fd));
    }
    result("gc_gradient", worst, 1e-5, "relative error")
}

/// With nonnegative weights, positive biases and positive inputs every ReLU
/// is active, so the network is the linear map `W_L ⋯ W_1` plus a constant.
fn check_linear_gc(cases: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let widths = small_widths(rng);
        let mut p = random_params(&widths, Activation::Relu, rng);
        for l in &mut p.layers {
            l.weight.mapv_inplace(f64::abs);
            l.bias.mapv_inplace(|b| b.abs() + 0.1);
        }
        let x = random_matrix(5, widths[0], rng).mapv(f64::abs);
        let depth = p.layers.len();
        for (subnet, upto) in [(Subnet::Embedding, depth - 1), (Subnet::Logit, depth)] {
            let mut prod = p.layers[0].weight.clone();
            for l in &p.layers[1..upto] {
                prod = l.weight.dot(&prod);
            }
            let want: f64 = prod.iter().map(|v| v * v).sum();
            let got = empirical_gc(&p, x.view(), subnet).unwrap().value;
            worst = worst.max((got - want).abs() / want);
        }
    }
    result("linear_map_gc", worst, 1e-12, "relative error")
}

fn check_sampled_gc(cases: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    let trials = 400;
    let mut worst = 0.0f64;
    let mut bitwise = true;
    for _ in 0..cases.min(5) {
        let p = random_params(&[6, 8, 7, 3], Activation::Tanh, rng);
        let x = random_matrix(24, 6, rng);
        let full = empirical_gc(&p, x.view(), Subnet::Embedding).unwrap().value;
        for (mode, size, max) in
            [(SampleMode::SampleExamples, 6, 24), (SampleMode::SampleEntries, 10, 42), (SampleMode::SampleOutputs, 2, 7)]
        {
            let est = sampled_gc(&p, x.view(), Subnet::Embedding, mode, size, trials, rng).unwrap();
            let z = (est.value - full).abs() / (est.std_across_trials / (trials as f64).sqrt());
            worst = worst.max(z);
            let whole = sampled_gc(&p, x.view(), Subnet::Embedding, mode, max, 1, rng).unwrap().value;
            bitwise &= whole.to_bits() == full.to_bits();
        }
    }
    let mut r = result("sampled_gc_unbiased", worst, 4.0, "|z|");
    r.passed &= bitwise;
    r.detail.push_str(if bitwise { "; full-size samples reproduce the empirical value" } else { "; full-size sample differs" });
    r
}

/// Gaussian classes with covariance `σ² I` satisfy a Poincaré inequality with
/// constant `σ²`, so `nc ≤ σ² · geometric_collapse` for any smooth map.
fn check_poincare(cases: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0.0f64;
    for _ in 0..cases.min(8) {
        let sigma = rng.random_range(0.3..2.0);
        let ds = gen_gaussian_mixture(4, 5, 6.0, sigma, 200, rng.random()).unwrap();
        let p = random_params(&[5, 16, 8, 4], Activation::Tanh, rng);
        let z = embed_dataset(&p, &ds).unwrap();
        let stats = class_stats(z.view(), ds.y(), 4).unwrap();
        let gc = empirical_gc(&p, ds.x().view(), Subnet::Embedding).unwrap().value;
        let ratio = nc_measure(&stats).unwrap() / (sigma * sigma * geometric_collapse(gc, &stats).unwrap());
        worst = worst.max(ratio);
    }
    result("gaussian_poincare", worst, 1.0, "nc / (σ²·geometric_collapse)")
}

/// Gauss-Jordan elimination with partial pivoting.
fn solve_dense(mut a: Array2<f64>, mut b: Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs())).unwrap();
        for c in 0..n {
            a.swap([col, c], [piv, c]);
        }
        for c in 0..b.ncols() {
            b.swap([col, c], [piv, c]);
        }
        let d = a[[col, col]];
        for r in 0..n {
            if r != col {
                let f = a[[r, col]] / d;
                for c in 0..n {
                    a[[r, c]] -= f * a[[col, c]];
                }
                for c in 0..b.ncols() {
                    b[[r, c]] -= f * b[[col, c]];
                }
            }
        }
    }
    for r in 0..n {
        let d = a[[r, r]];
        b.row_mut(r).mapv_inplace(|v| v / d);
    }
    b
}

fn check_ridge(cases: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (n, p, l) = (rng.random_range(6..20), rng.random_range(2..8), rng.random_range(2..5));
        let z = random_matrix(n, p, rng) + rng.random_range(-5.0..5.0);
        let labels: Vec<usize> = (0..n).map(|i| i % l).collect();
        let lambda = rng.random_range(1e-3..1.0);
        let head = ridge_fit(z.view(), &labels, l, lambda).unwrap();
        let za = augment(z.view());
        let mut gram = za.t().dot(&za);
        for i in 0..p {
            gram[[i, i]] += lambda;
        }
        let y = Array2::from_shape_fn((n, l), |(i, c)| if labels[i] == c { 1.0 } else { 0.0 });
        let want = solve_dense(gram, za.t().dot(&y));
        worst = worst.max(rel_err(head.weight.as_slice().unwrap(), want.as_slice().unwrap()));
    }
    result("ridge_solution", worst, 1e-9, "relative error")
}

fn check_hvp(cases: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0.0f64;
    for _ in 0..cases.min(5) {
        let p = random_params(&[3, 4, 3], Activation::Tanh, rng);
        let x = random_matrix(5, 3, rng);
        let y = vec![0, 1, 2, 0, 1];
        let theta = p.to_flat();
        let n = theta.len();
        let loss = |t: &[f64]| loss_and_grad(&Parameters::from_flat(&p.spec, t).unwrap(), x.view(), &y).unwrap().0;
        let h = 1e-4;
        let mut hess = Array2::<f64>::zeros((n, n));
        let mut t = theta.clone();
        for i in 0..n {
            for j in i..n {
                let mut at = |di: f64, dj: f64| {
                    t[i] += di;
                    t[j] += dj;
                    let v = loss(&t);
                    t[i] = theta[i];
                    t[j] = theta[j];
                    v
                };
                let v = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h);
                hess[[i, j]] = v;
                hess[[j, i]] = v;
            }
        }
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let want = hess.dot(&Array1::from(v.clone()));
        let vp = Parameters::from_flat(&p.spec, &v).unwrap();
        let got = hvp(&p, x.view(), &y, &vp, 1e-5).unwrap().to_flat();
        worst = worst.max(rel_err(&got, want.as_slice().unwrap()));
    }
    result("hessian_vector_product", worst, 1e-5, "relative error")
}

/// Runs every check with `cases` random instances each (some checks cap the
/// count because a single instance is already expensive).
pub fn run_all(cases: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = cases.max(1);
    vec![
        check_param_gradient(cases, &mut rng),
        check_input_jacobian(cases, &mut rng),
        check_gc_gradient(cases, &mut rng),
        check_linear_gc(cases, &mut rng),
        check_sampled_gc(cases, &mut rng),
        check_poincare(cases, &mut rng),
        check_ridge(cases, &mut rng),
        check_hvp(cases, &mut rng),
    ]
}
