//! Few-shot evaluation of a frozen feature map: ridge-regression heads solved
//! through the normal equations, nearest-mean heads, and target-class NC.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::nearest_mean_error_embedded;
use crate::data::{sample_episode_indices, EpisodeSpec, LabeledDataset};
use crate::error::{contract, Error, Result};
use crate::metrics::{class_stats, embed, mean_and_std, nc_measure};
use crate::nn::Parameters;
use crate::par;

/// Linear head on bias-augmented features `[z, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeHead {
    /// `(p + 1) × l`; the last row is the bias.
    pub weight: Array2<f64>,
    pub lambda: f64,
    /// `‖(Z̃ᵀZ̃ + λI)W − Z̃ᵀY‖_max` of the solved system, `Z̃` the
    /// support-centred features.
    pub normal_residual: f64,
}

/// Appends a constant-1 column.
pub fn augment(z: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::ones((z.nrows(), z.ncols() + 1));
    out.slice_mut(s![.., ..z.ncols()]).assign(&z);
    out
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
/// Pivots below `1e-12 ·` (largest diagonal entry) are reported as singular.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("cholesky needs a square matrix, got {n}×{}", a.ncols())));
    }
    let scale = (0..n).map(|i| a[[i, i]].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for t in 0..j {
            diag -= l[[j, t]] * l[[j, t]];
        }
        if !(diag > tol) {
            return Err(Error::Singular(format!("pivot {j} is {diag:e}; the matrix is not numerically positive definite")));
        }
        let d = diag.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut v = a[[i, j]];
            for t in 0..j {
                v -= l[[i, t]] * l[[j, t]];
            }
            l[[i, j]] = v / d;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ X = B` given the Cholesky factor `L`.
pub fn cholesky_solve(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for mut col in x.columns_mut() {
        for i in 0..n {
            let mut v = col[i];
            for t in 0..i {
                v -= l[[i, t]] * col[t];
            }
            col[i] = v / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut v = col[i];
            for t in (i + 1)..n {
                v -= l[[t, i]] * col[t];
            }
            col[i] = v / l[[i, i]];
        }
    }
    x
}

/// Scale-aware default ridge coefficient `1e-3 · trace(ZᵀZ) / p`.
pub fn default_lambda(z: ArrayView2<f64>) -> f64 {
    let trace: f64 = z.iter().map(|v| v * v).sum();
    1e-3 * trace / z.ncols().max(1) as f64
}

/// Ridge regression on one-hot targets: solves `(ZᵀZ + λI′)W = ZᵀY` for the
/// bias-augmented `Z`, where `I′` leaves the bias unpenalized.
pub fn ridge_fit(z_support: ArrayView2<f64>, labels: &[usize], n_classes: usize, lambda: f64) -> Result<RidgeHead> {
    if z_support.nrows() == 0 {
        return contract("ridge fit needs at least one support example");
    }
    if labels.len() != z_support.nrows() {
        return Err(Error::Shape(format!("{} support rows but {} labels", z_support.nrows(), labels.len())));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return contract(format!("ridge lambda must be finite and nonnegative, got {lambda}"));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= n_classes) {
        return contract(format!("label {bad} out of range for {n_classes} classes"));
    }
    // The unpenalized bias is eliminated by centring on the support means;
    // this is the same solution as the augmented system but stays well
    // conditioned when embeddings carry a large common offset.
    let n = z_support.nrows() as f64;
    let p = z_support.ncols();
    let z_mean = z_support.mean_axis(Axis(0)).expect("nonempty support");
    let zc = &z_support - &z_mean;
    let mut y = Array2::<f64>::zeros((labels.len(), n_classes));
    for (i, &c) in labels.iter().enumerate() {
        y[[i, c]] = 1.0;
    }
    let y_mean = y.sum_axis(Axis(0)) / n;
    let mut gram = zc.t().dot(&zc);
    for i in 0..p {
        gram[[i, i]] += lambda;
    }
    let rhs = zc.t().dot(&y);
    let w = if p == 0 {
        Array2::<f64>::zeros((0, n_classes))
    } else {
        let l = cholesky(&gram).map_err(|e| match e {
            Error::Singular(msg) if lambda == 0.0 => Error::Singular(format!("{msg}; use a positive ridge lambda")),
            other => other,
        })?;
        cholesky_solve(&l, &rhs)
    };
    let residual = (gram.dot(&w) - &rhs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let bias = &y_mean - &z_mean.dot(&w);
    let mut weight = Array2::<f64>::zeros((p + 1, n_classes));
    weight.slice_mut(s![..p, ..]).assign(&w);
    weight.row_mut(p).assign(&bias);
    Ok(RidgeHead { weight, lambda, normal_residual: residual })
}

fn argmax_smallest(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

pub fn ridge_predict(head: &RidgeHead, z_query: ArrayView2<f64>) -> Vec<usize> {
    let scores = augment(z_query).dot(&head.weight);
    scores.outer_iter().map(argmax_smallest).collect()
}

/// Fraction of query rows whose argmax score matches the label (ties go to
/// the smaller class index).
pub fn ridge_predict_accuracy(head: &RidgeHead, z_query: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let pred = ridge_predict(head, z_query);
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// Outcome of one few-shot episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub ridge_accuracy: f64,
    pub nearest_mean_accuracy: f64,
    /// NC of the query embeddings; `None` when two query class means coincide.
    pub target_nc: Option<f64>,
    pub lambda: f64,
    pub normal_residual: f64,
}

/// Mean and standard deviation of episode results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSummary {
    pub n_episodes: usize,
    pub ridge_acc_mean: f64,
    pub ridge_acc_std: f64,
    pub nearest_mean_acc_mean: f64,
    pub nearest_mean_acc_std: f64,
    /// Over non-degenerate episodes only (NaN if there are none).
    pub target_nc_mean: f64,
    pub target_nc_std: f64,
    pub n_degenerate: usize,
    pub max_normal_residual: f64,
    pub episodes: Vec<EpisodeResult>,
}

fn run_episode(z_all: &Array2<f64>, target: &LabeledDataset, spec: &EpisodeSpec, lambda: Option<f64>, seed: u64) -> Result<EpisodeResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ep = sample_episode_indices(target, spec, &mut rng)?;
    let relabel = |i: usize| ep.classes.binary_search(&target.y()[i]).expect("episode class");
    let zs = z_all.select(Axis(0), &ep.support);
    let zq = z_all.select(Axis(0), &ep.query);
    let ys: Vec<usize> = ep.support.iter().map(|&i| relabel(i)).collect();
    let yq: Vec<usize> = ep.query.iter().map(|&i| relabel(i)).collect();
    let lambda = lambda.unwrap_or_else(|| default_lambda(zs.view()));
    let head = ridge_fit(zs.view(), &ys, spec.n_way, lambda)?;
    let ridge_accuracy = ridge_predict_accuracy(&head, zq.view(), &yq);
    let support_stats = class_stats(zs.view(), &ys, spec.n_way)?;
    let nearest_mean_accuracy = 1.0 - nearest_mean_error_embedded(&support_stats.means, zq.view(), &yq);
    let target_nc = if spec.n_way >= 2 {
        match nc_measure(&class_stats(zq.view(), &yq, spec.n_way)?) {
            Ok(v) => Some(v),
            Err(Error::DegenerateMeans { .. }) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(EpisodeResult { ridge_accuracy, nearest_mean_accuracy, target_nc, lambda, normal_residual: head.normal_residual })
}

/// Few-shot evaluation of a precomputed target embedding.
pub fn few_shot_eval_embedded<R: Rng + ?Sized>(
    z_all: &Array2<f64>,
    target: &LabeledDataset,
    spec: &EpisodeSpec,
    lambda: Option<f64>,
    rng: &mut R,
) -> Result<FewShotSummary> {
    spec.validate_for(target)?;
    // Episode seeds are drawn up front so episodes can run in any order.
    let seeds: Vec<u64> = (0..spec.n_episodes).map(|_| rng.random()).collect();
    let episodes = par::map_slice(&seeds, |&seed| run_episode(z_all, target, spec, lambda, seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let ridge: Vec<f64> = episodes.iter().map(|e| e.ridge_accuracy).collect();
    let nm: Vec<f64> = episodes.iter().map(|e| e.nearest_mean_accuracy).collect();
    let nc: Vec<f64> = episodes.iter().filter_map(|e| e.target_nc).collect();
    let (ridge_acc_mean, ridge_acc_std) = mean_and_std(&ridge);
    let (nearest_mean_acc_mean, nearest_mean_acc_std) = mean_and_std(&nm);
    let (target_nc_mean, target_nc_std) = if nc.is_empty() { (f64::NAN, f64::NAN) } else { mean_and_std(&nc) };
    Ok(FewShotSummary {
        n_episodes: episodes.len(),
        ridge_acc_mean,
        ridge_acc_std,
        nearest_mean_acc_mean,
        nearest_mean_acc_std,
        target_nc_mean,
        target_nc_std,
        n_degenerate: episodes.len() - nc.len(),
        max_normal_residual: episodes.iter().map(|e| e.normal_residual).fold(0.0, f64::max),
        episodes,
    })
}

/// Embeds the target set with the frozen feature map and runs
/// `spec.n_episodes` episodes. `lambda = None` picks [`default_lambda`] per
/// episode.
pub fn few_shot_eval<R: Rng + ?Sized>(
    params: &Parameters,
    target: &LabeledDataset,
    spec: &EpisodeSpec,
    lambda: Option<f64>,
    rng: &mut R,
) -> Result<FewShotSummary> {
    let z = embed(params, target.x().view())?;
    few_shot_eval_embedded(&z, target, spec, lambda, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian_mixture;
    use crate::nn::{Activation, NetworkSpec};
    use ndarray::{array, Array1};

    /// Gauss-Jordan inverse with partial pivoting (independent of Cholesky).
    fn inverse(a: &Array2<f64>) -> Array2<f64> {
        let n = a.nrows();
        let mut m = ndarray::concatenate(Axis(1), &[a.view(), Array2::<f64>::eye(n).view()]).unwrap();
        for c in 0..n {
            let piv = (c..n).max_by(|&i, &j| m[[i, c]].abs().partial_cmp(&m[[j, c]].abs()).unwrap()).unwrap();
            for t in 0..2 * n {
                m.swap([c, t], [piv, t]);
            }
            let d = m[[c, c]];
            m.row_mut(c).mapv_inplace(|v| v / d);
            for r in 0..n {
                if r != c {
                    let f = m[[r, c]];
                    let pivot_row = m.row(c).to_owned();
                    m.row_mut(r).scaled_add(-f, &pivot_row);
                }
            }
        }
        m.slice(s![.., n..]).to_owned()
    }

    fn explicit_ridge(z: &Array2<f64>, labels: &[usize], l: usize, lambda: f64) -> Array2<f64> {
        let za = augment(z.view());
        let mut gram = za.t().dot(&za);
        for i in 0..z.ncols() {
            gram[[i, i]] += lambda;
        }
        let mut y = Array2::<f64>::zeros((labels.len(), l));
        for (i, &c) in labels.iter().enumerate() {
            y[[i, c]] = 1.0;
        }
        inverse(&gram).dot(&za.t().dot(&y))
    }

    #[test]
    fn matches_explicit_inverse() {
        let z = Array2::from_shape_fn((10, 4), |(i, j)| ((i * 7 + j * 3) as f64 * 0.61).sin() + ((i * j + 1) as f64).sqrt().fract());
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        for lambda in [0.0, 0.1, 2.0] {
            let head = ridge_fit(z.view(), &labels, 3, lambda).unwrap();
            let oracle = explicit_ridge(&z, &labels, 3, lambda);
            let diff = (&head.weight - &oracle).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-8, "lambda {lambda}: {diff}");
            assert!(head.normal_residual < 1e-8);
        }
    }

    #[test]
    fn huge_lambda_leaves_only_class_frequencies() {
        let z = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5], [2.0, 2.0]];
        let labels = [0, 0, 0, 1];
        let head = ridge_fit(z.view(), &labels, 2, 1e12).unwrap();
        for v in head.weight.slice(s![..2, ..]).iter() {
            assert!(v.abs() < 1e-9);
        }
        let bias = head.weight.row(2);
        assert!((bias[0] - 0.75).abs() < 1e-6 && (bias[1] - 0.25).abs() < 1e-6);
        assert_eq!(ridge_predict(&head, z.view()), vec![0; 4]);
    }

    #[test]
    fn square_system_interpolates() {
        // Three support points in ℝ² plus bias: an invertible 3×3 system.
        let z = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let labels = [0, 1, 2];
        let head = ridge_fit(z.view(), &labels, 3, 0.0).unwrap();
        let fitted = augment(z.view()).dot(&head.weight);
        let resid = (&fitted - &Array2::<f64>::eye(3)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(resid < 1e-8);
        assert_eq!(ridge_predict_accuracy(&head, z.view(), &labels), 1.0);
    }

    #[test]
    fn singular_at_zero_lambda() {
        let z = array![[1.0, 1.0], [2.0, 2.0]];
        let err = ridge_fit(z.view(), &[0, 1], 2, 0.0).unwrap_err();
        assert!(matches!(err, Error::Singular(ref m) if m.contains("positive ridge lambda")));
        assert!(ridge_fit(z.view(), &[0, 1], 2, 0.5).is_ok());
        assert!(ridge_fit(z.view(), &[0, 1], 2, -1.0).is_err());
    }

    #[test]
    fn zero_head_predicts_class_zero() {
        let head = RidgeHead { weight: Array2::zeros((3, 4)), lambda: 0.0, normal_residual: 0.0 };
        let z = array![[1.0, 2.0], [-3.0, 0.0]];
        assert_eq!(ridge_predict(&head, z.view()), vec![0, 0]);
    }

    #[test]
    fn accuracy_matches_recount() {
        let head = RidgeHead {
            weight: array![[1.0, -1.0, 0.0], [0.0, 2.0, -2.0], [0.1, 0.0, 0.2]],
            lambda: 0.0,
            normal_residual: 0.0,
        };
        let z = Array2::from_shape_fn((12, 2), |(i, j)| ((i * 5 + j) as f64 * 1.3).cos());
        let labels: Vec<usize> = (0..12).map(|i| (i * 7) % 3).collect();
        let mut correct = 0;
        for i in 0..12 {
            let scores: Vec<f64> = (0..3)
                .map(|c| z[[i, 0]] * head.weight[[0, c]] + z[[i, 1]] * head.weight[[1, c]] + head.weight[[2, c]])
                .collect();
            let mut best = 0;
            for c in 1..3 {
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            correct += (best == labels[i]) as usize;
        }
        assert_eq!(ridge_predict_accuracy(&head, z.view(), &labels), correct as f64 / 12.0);
    }

    fn identity_net(d: usize) -> Parameters {
        let spec = NetworkSpec::new(vec![d, d, 2], Activation::Relu).unwrap();
        let mut p = Parameters::zeros(&spec);
        p.layers[0].weight = Array2::eye(d);
        p.layers[0].bias = Array1::from_elem(d, 1e3);
        p
    }

    #[test]
    fn identity_features_separate_a_clean_mixture() {
        let target = gen_gaussian_mixture(5, 10, 8.0, 1.0, 40, 3).unwrap();
        let spec = EpisodeSpec { n_way: 5, n_shot: 5, n_query: 15, n_episodes: 100 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let summary = few_shot_eval(&identity_net(10), &target, &spec, None, &mut rng).unwrap();
        assert!(summary.ridge_acc_mean > 0.95, "{}", summary.ridge_acc_mean);
        assert_eq!(summary.n_degenerate, 0);
        assert!(summary.max_normal_residual < 1e-8);
    }

    #[test]
    fn single_episode_has_zero_std() {
        let target = gen_gaussian_mixture(3, 4, 3.0, 1.0, 10, 1).unwrap();
        let spec = EpisodeSpec { n_way: 3, n_shot: 2, n_query: 3, n_episodes: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = few_shot_eval(&identity_net(4), &target, &spec, Some(0.1), &mut rng).unwrap();
        assert_eq!(s.ridge_acc_std, 0.0);
        assert_eq!(s.ridge_acc_mean, s.episodes[0].ridge_accuracy);
        assert_eq!(s.target_nc_mean, s.episodes[0].target_nc.unwrap());
    }
}
