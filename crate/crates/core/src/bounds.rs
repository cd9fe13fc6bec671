//! Numerical evaluation of the NC/GC bounds: nearest-mean error, the
//! generalization bound in terms of embedding GC, and the transfer bound over
//! a finite ensemble of trained feature maps.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{contract, Error, Result};
use crate::metrics::{class_stats, embed, empirical_gc, mean_and_std, ClassStats};
use crate::nn::{Parameters, Subnet};
use crate::par;

/// Index of the closest row of `means`; ties go to the smaller index.
pub fn nearest_mean_predict(means: ArrayView2<f64>, z: ArrayView1<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in means.outer_iter().enumerate() {
        let d = mu.iter().zip(z.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// Error rate on `test` of the nearest-class-mean classifier whose means are
/// the `train` embeddings' class averages.
pub fn nearest_mean_error(params: &Parameters, train: &LabeledDataset, test: &LabeledDataset) -> Result<f64> {
    if train.num_classes() != test.num_classes() {
        return contract(format!("train has {} classes, test has {}", train.num_classes(), test.num_classes()));
    }
    let stats = class_stats(embed(params, train.x().view())?.view(), train.y(), train.num_classes())?;
    let zt = embed(params, test.x().view())?;
    Ok(nearest_mean_error_embedded(&stats.means, zt.view(), test.y()))
}

pub fn nearest_mean_error_embedded(means: &Array2<f64>, z: ArrayView2<f64>, y: &[usize]) -> f64 {
    let wrong = z.outer_iter().zip(y).filter(|(row, &c)| nearest_mean_predict(means.view(), *row) != c).count();
    wrong as f64 / y.len() as f64
}

/// Largest `‖f(x) − f(x′)‖ / ‖x − x′‖` over sampled pairs: all pairs when
/// there are at most 256 rows, otherwise 256² random pairs. Always a lower
/// bound on the Lipschitz constant of `f`. Duplicate rows are skipped.
pub fn lipschitz_lower_bound_of<F, R>(f: F, x: ArrayView2<f64>, rng: &mut R) -> Result<f64>
where
    F: Fn(ArrayView2<f64>) -> Result<Array2<f64>>,
    R: Rng + ?Sized,
{
    let m = x.nrows();
    if m < 2 {
        return contract("Lipschitz estimate needs at least two rows");
    }
    let fx = f(x)?;
    let pairs: Vec<(usize, usize)> = if m <= 256 {
        (0..m).flat_map(|i| ((i + 1)..m).map(move |j| (i, j))).collect()
    } else {
        (0..256 * 256)
            .map(|_| (rng.random_range(0..m), rng.random_range(0..m)))
            .filter(|(i, j)| i != j)
            .collect()
    };
    let dist = |a: ArrayView1<f64>, b: ArrayView1<f64>| a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    let mut best: Option<f64> = None;
    for (i, j) in pairs {
        let dx = dist(x.row(i), x.row(j));
        if dx == 0.0 {
            continue;
        }
        let r = dist(fx.row(i), fx.row(j)) / dx;
        best = Some(best.map_or(r, |b: f64| b.max(r)));
    }
    best.ok_or_else(|| Error::Contract("every sampled pair of rows is a duplicate".into()))
}

/// Lipschitz lower bound of the feature map `f`.
pub fn lipschitz_lower_bound<R: Rng + ?Sized>(params: &Parameters, x: ArrayView2<f64>, rng: &mut R) -> Result<f64> {
    lipschitz_lower_bound_of(|v| embed(params, v), x, rng)
}

/// Constants entering the generalization bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Poincaré constant estimate.
    pub c: f64,
    /// Lipschitz constant estimate (only used with `include_lipschitz_term`).
    pub lipschitz: f64,
    pub delta: f64,
    /// Embedding width.
    pub p: usize,
    /// Samples per class.
    pub m_c: usize,
    pub k: usize,
    pub include_lipschitz_term: bool,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return contract(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.p == 0 || self.m_c == 0 || self.k == 0 {
            return contract("p, m_c and k must be at least 1");
        }
        if !(self.c >= 0.0) || !(self.lipschitz >= 0.0) {
            return contract("c and the Lipschitz constant must be nonnegative");
        }
        Ok(())
    }
}

/// Right-hand side of the nearest-mean generalization bound given
/// `Σ_{i≠j} 1/d_ij²` directly.
pub fn generalization_bound_rhs_from_sum(gc_hat: f64, inv_sq_dist_sum: f64, inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let lip = if inputs.include_lipschitz_term {
        inputs.lipschitz * ((2.0 / inputs.delta).ln() / (2.0 * inputs.m_c as f64 * inputs.k as f64)).sqrt()
    } else {
        0.0
    };
    Ok(16.0 * inputs.c * (1.0 / inputs.p as f64 + 1.0 / inputs.m_c as f64) * (gc_hat + lip) * inv_sq_dist_sum)
}

/// `16 c (1/p + 1/m_c) (ĜC + [L √(log(2/δ) / (2 m_c k))]) Σ_{i≠j} 1/d_ij²`.
pub fn generalization_bound_rhs(gc_hat: f64, stats: &ClassStats, inputs: &BoundInputs) -> Result<f64> {
    generalization_bound_rhs_from_sum(gc_hat, stats.inv_sq_dist_sum()?, inputs)
}

/// Ensemble-level quantities of the transfer bound. All suprema and infima
/// run over the finite ensemble and the available samples only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    /// Smallest class-mean distance over members and class pairs.
    pub delta_fstar: f64,
    /// Largest per-class embedding GC over members and classes.
    pub sup_gc_per_class: f64,
    /// Largest embedding norm over members and samples (a lower bound on the
    /// supremum over the support).
    pub sup_embed_norm: f64,
    /// Monte-Carlo Rademacher complexity of the (mean, variance) set,
    /// restricted to the ensemble.
    pub rademacher_h: f64,
    /// Standard error of `rademacher_h`.
    pub rademacher_h_std: f64,
    pub ensemble_size: usize,
}

/// Monte-Carlo Rademacher complexity `E_ε sup_{a∈A} ⟨ε, a⟩` of the rows of
/// `set`; returns the mean and its standard error.
pub fn rademacher_estimate<R: Rng + ?Sized>(set: ArrayView2<f64>, trials: usize, rng: &mut R) -> Result<(f64, f64)> {
    if set.nrows() == 0 || trials == 0 {
        return contract("Rademacher estimate needs a nonempty set and at least one trial");
    }
    let n = set.ncols();
    let mut values = Vec::with_capacity(trials);
    let mut eps = vec![0.0; n];
    for _ in 0..trials {
        eps.iter_mut().for_each(|e| *e = if rng.random::<bool>() { 1.0 } else { -1.0 });
        let sup = set
            .outer_iter()
            .map(|a| a.iter().zip(&eps).map(|(x, e)| x * e).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        values.push(sup);
    }
    let (mean, std) = mean_and_std(&values);
    Ok((mean, std / (trials as f64).sqrt()))
}

struct MemberSummary {
    min_dist: f64,
    degenerate: Option<(usize, usize)>,
    sup_gc: f64,
    sup_norm: f64,
    /// Rows `(μ_c ‖ Var_c)` for the source classes.
    source_points: Array2<f64>,
}

fn summarize_member(f: &Parameters, all: &LabeledDataset, n_source: usize) -> Result<MemberSummary> {
    let z = embed(f, all.x().view())?;
    let stats = class_stats(z.view(), all.y(), all.num_classes())?;
    let mut min_dist = f64::INFINITY;
    let mut degenerate = None;
    for i in 0..stats.k {
        for j in (i + 1)..stats.k {
            let d = stats.dist[[i, j]];
            if d == 0.0 && degenerate.is_none() {
                degenerate = Some((i, j));
            }
            min_dist = min_dist.min(d);
        }
    }
    let mut sup_gc = 0.0f64;
    for idx in all.class_indices() {
        let xc = all.x().select(Axis(0), &idx);
        sup_gc = sup_gc.max(empirical_gc(f, xc.view(), Subnet::Embedding)?.value);
    }
    let sup_norm = z.outer_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max);
    let p = stats.means.ncols();
    let mut source_points = Array2::<f64>::zeros((n_source, p + 1));
    for c in 0..n_source {
        let mut row = source_points.row_mut(c);
        row.slice_mut(ndarray::s![..p]).assign(&stats.means.row(c));
        row[p] = stats.variances[c];
    }
    Ok(MemberSummary { min_dist, degenerate, sup_gc, sup_norm, source_points })
}

fn concat_classes(source: &LabeledDataset, target: &LabeledDataset) -> Result<LabeledDataset> {
    if source.per_class() != target.per_class() {
        // Trim the larger side so the union stays balanced.
        let m = source.per_class().min(target.per_class());
        let trim = |ds: &LabeledDataset| -> Result<LabeledDataset> {
            let idx: Vec<usize> = ds.class_indices().into_iter().flat_map(|v| v.into_iter().take(m)).collect();
            ds.subset(&idx)
        };
        return concat_classes(&trim(source)?, &trim(target)?);
    }
    let x = ndarray::concatenate(Axis(0), &[source.x().view(), target.x().view()]).map_err(|e| Error::Shape(e.to_string()))?;
    let k0 = source.num_classes();
    let y = source.y().iter().copied().chain(target.y().iter().map(|&c| c + k0)).collect();
    LabeledDataset::new(x, y, k0 + target.num_classes())
}

/// Statistics of a trained ensemble. Class-mean separation, per-class GC and
/// embedding norms range over source and (if given) target classes; the
/// Rademacher term ranges over the source classes only.
pub fn ensemble_stats<R: Rng + ?Sized>(
    ensemble: &[Parameters],
    source: &LabeledDataset,
    target: Option<&LabeledDataset>,
    rademacher_trials: usize,
    rng: &mut R,
) -> Result<EnsembleStats> {
    if ensemble.is_empty() {
        return contract("ensemble must contain at least one feature map");
    }
    let all = match target {
        Some(t) => concat_classes(source, t)?,
        None => source.clone(),
    };
    let n_source = source.num_classes();
    let summaries = par::map_slice(ensemble, |f| summarize_member(f, &all, n_source));
    let summaries: Vec<MemberSummary> = summaries.into_iter().collect::<Result<_>>()?;
    if let Some((i, j)) = summaries.iter().find_map(|s| s.degenerate) {
        return Err(Error::DegenerateMeans { i, j });
    }
    let views: Vec<_> = summaries.iter().map(|s| s.source_points.view()).collect();
    let set = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let (h, h_std) = rademacher_estimate(set.view(), rademacher_trials, rng)?;
    Ok(EnsembleStats {
        delta_fstar: summaries.iter().map(|s| s.min_dist).fold(f64::INFINITY, f64::min),
        sup_gc_per_class: summaries.iter().map(|s| s.sup_gc).fold(0.0, f64::max),
        sup_embed_norm: summaries.iter().map(|s| s.sup_norm).fold(0.0, f64::max),
        rademacher_h: h,
        rademacher_h_std: h_std,
        ensemble_size: ensemble.len(),
    })
}

/// The three terms of the transfer bound on the expected target-pair CDNV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferBound {
    pub total: f64,
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
}

/// Evaluates the transfer bound literally; `k` is the number of source classes.
pub fn transfer_bound_rhs(
    source_gc: f64,
    source_stats: &ClassStats,
    ens: &EnsembleStats,
    c_source: f64,
    c_target: f64,
    delta: f64,
    k: usize,
) -> Result<TransferBound> {
    if !(delta > 0.0 && delta < 1.0) {
        return contract(format!("delta must lie in (0, 1), got {delta}"));
    }
    if k < 2 {
        return contract("transfer bound needs at least two source classes");
    }
    if !(ens.delta_fstar > 0.0) {
        return contract("ensemble class-mean separation is zero; the transfer bound is infinite");
    }
    let kf = k as f64;
    let df = ens.delta_fstar;
    let term1 = c_source * (source_gc / (kf - 1.0) * source_stats.inv_sq_dist_sum()?);
    let term2 = (8.0 + 16.0 * c_target * ens.sup_gc_per_class / df)
        * ((2.0 * std::f64::consts::PI * kf.ln()).sqrt() * ens.rademacher_h / ((kf - 1.0) * df));
    let term3 = (1.0 + 4.0 * ens.sup_embed_norm / (df * df))
        * (2.0 * (1.0 / delta).ln().sqrt() * c_target * ens.sup_gc_per_class / (kf.sqrt() * df * df));
    Ok(TransferBound { total: term1 + term2 + term3, term1, term2, term3 })
}
