//! Scalar diagnostics of a trained network: geometric complexity (GC) and its
//! sampled estimators, class statistics, CDNV, neural collapse (NC),
//! geometric collapse, the Poincaré-constant lower bound, loss slope and
//! sharpness.
//!
//! Pair sums and averages run over ordered pairs `i ≠ j`; variances divide by
//! the class count (population convention).

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{contract, Error, Result};
use crate::nn::{forward, input_jacobian, loss_and_grad, Parameters, Subnet};
use crate::par;

/// Per-class means, scalar variances and pairwise mean distances of an
/// embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub k: usize,
    /// `k × p`.
    pub means: Array2<f64>,
    pub variances: Vec<f64>,
    /// `k × k`, symmetric with zero diagonal.
    pub dist: Array2<f64>,
    pub counts: Vec<usize>,
}

/// Embedding rows of every example, in dataset order.
pub fn embed_dataset(params: &Parameters, ds: &LabeledDataset) -> Result<Array2<f64>> {
    embed(params, ds.x().view())
}

pub fn embed(params: &Parameters, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut trace = forward(params, x)?;
    let depth = trace.post.len();
    Ok(trace.post.swap_remove(depth - 2))
}

pub fn class_stats(z: ArrayView2<f64>, y: &[usize], k: usize) -> Result<ClassStats> {
    if z.nrows() != y.len() {
        return Err(Error::Shape(format!("{} embeddings but {} labels", z.nrows(), y.len())));
    }
    let p = z.ncols();
    let mut means = Array2::<f64>::zeros((k, p));
    let mut counts = vec![0usize; k];
    for (row, &c) in z.outer_iter().zip(y) {
        if c >= k {
            return contract(format!("label {c} out of range for {k} classes"));
        }
        let mut m = means.row_mut(c);
        m += &row;
        counts[c] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return contract(format!("class {c} has no examples"));
    }
    for (mut m, &n) in means.outer_iter_mut().zip(&counts) {
        m /= n as f64;
    }
    let mut variances = vec![0.0; k];
    for (row, &c) in z.outer_iter().zip(y) {
        let mu = means.row(c);
        variances[c] += row.iter().zip(mu.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    for (v, &n) in variances.iter_mut().zip(&counts) {
        *v /= n as f64;
    }
    let mut dist = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in (i + 1)..k {
            let d = means.row(i).iter().zip(means.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    Ok(ClassStats { k, means, variances, dist, counts })
}

impl ClassStats {
    fn checked_dist(&self, i: usize, j: usize) -> Result<f64> {
        let d = self.dist[[i, j]];
        if d > 0.0 {
            Ok(d)
        } else {
            Err(Error::DegenerateMeans { i: i.min(j), j: i.max(j) })
        }
    }

    /// `Σ_{i≠j} 1/d_ij²` over ordered pairs.
    pub fn inv_sq_dist_sum(&self) -> Result<f64> {
        let mut sum = 0.0;
        for i in 0..self.k {
            for j in 0..self.k {
                if i != j {
                    let d = self.checked_dist(i, j)?;
                    sum += 1.0 / (d * d);
                }
            }
        }
        Ok(sum)
    }

    /// Smallest distance between two class means.
    pub fn min_dist(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.k {
            for j in (i + 1)..self.k {
                best = best.min(self.dist[[i, j]]);
            }
        }
        best
    }
}

/// Class-distance normalized variance `(Var_i + Var_j) / (2 d_ij²)`.
pub fn cdnv(stats: &ClassStats, i: usize, j: usize) -> Result<f64> {
    if i == j || i >= stats.k || j >= stats.k {
        return contract(format!("cdnv needs two distinct classes below {}, got ({i}, {j})", stats.k));
    }
    let d = stats.checked_dist(i, j)?;
    Ok((stats.variances[i] + stats.variances[j]) / (2.0 * d * d))
}

/// Average CDNV over ordered class pairs.
pub fn nc_measure(stats: &ClassStats) -> Result<f64> {
    if stats.k < 2 {
        return contract("neural collapse needs at least two classes");
    }
    let mut sum = 0.0;
    for i in 0..stats.k {
        for j in 0..stats.k {
            if i != j {
                sum += cdnv(stats, i, j)?;
            }
        }
    }
    Ok(sum / (stats.k * (stats.k - 1)) as f64)
}

/// `gc / (k − 1) · Σ_{i≠j} 1/d_ij²`.
pub fn geometric_collapse(gc_value: f64, stats: &ClassStats) -> Result<f64> {
    if stats.k < 2 {
        return contract("geometric collapse needs at least two classes");
    }
    Ok(gc_value / (stats.k - 1) as f64 * stats.inv_sq_dist_sum()?)
}

/// Smallest Poincaré constant consistent with `nc ≤ c · geometric_collapse`
/// at this checkpoint.
pub fn poincare_lower_bound(nc: f64, gc_value: f64, stats: &ClassStats) -> Result<f64> {
    let gcol = geometric_collapse(gc_value, stats)?;
    if !(gcol > 0.0) {
        return contract("geometric collapse is zero; the Poincaré ratio is undefined");
    }
    Ok(nc / gcol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Full,
    SampleExamples,
    SampleEntries,
    SampleOutputs,
}

impl SampleMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::SampleExamples => "sample_examples",
            Self::SampleEntries => "sample_entries",
            Self::SampleOutputs => "sample_outputs",
        }
    }
}

impl std::str::FromStr for SampleMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "sample_examples" => Ok(Self::SampleExamples),
            "sample_entries" => Ok(Self::SampleEntries),
            "sample_outputs" => Ok(Self::SampleOutputs),
            other => Err(format!(
                "unknown GC mode {other:?} (expected full, sample_examples, sample_entries or sample_outputs)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcEstimate {
    /// Mean over trials.
    pub value: f64,
    pub mode: SampleMode,
    pub sample_size: usize,
    pub trials: usize,
    /// Sample standard deviation of the per-trial values (0 for one trial).
    pub std_across_trials: f64,
}

/// Squared sum in row-major order; the sampled estimators accumulate in the
/// same order so that a full-size sample reproduces this value bitwise.
fn frobenius_sq(j: &Array2<f64>) -> f64 {
    j.iter().fold(0.0, |acc, v| acc + v * v)
}

pub fn jacobians(params: &Parameters, x: ArrayView2<f64>, subnet: Subnet) -> Result<Vec<Array2<f64>>> {
    if x.ncols() != params.spec.input_dim() {
        return Err(Error::Shape(format!("input has {} columns, network expects {}", x.ncols(), params.spec.input_dim())));
    }
    Ok(par::map_range(x.nrows(), |i| input_jacobian(params, x.row(i), subnet).expect("shape checked")))
}

fn mean_in_order(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let sum = values.into_iter().fold(0.0, |acc, v| {
        n += 1;
        acc + v
    });
    sum / n as f64
}

/// `(1/|X|) Σ ‖∇_x f(x)‖²_F`.
pub fn empirical_gc(params: &Parameters, x: ArrayView2<f64>, subnet: Subnet) -> Result<GcEstimate> {
    if x.nrows() == 0 {
        return contract("empirical GC needs a nonempty batch");
    }
    let jacs = jacobians(params, x, subnet)?;
    Ok(GcEstimate {
        value: mean_in_order(jacs.iter().map(frobenius_sq)),
        mode: SampleMode::Full,
        sample_size: x.nrows(),
        trials: 1,
        std_across_trials: 0.0,
    })
}

fn sorted_sample<R: Rng + ?Sized>(rng: &mut R, n: usize, amount: usize) -> Vec<usize> {
    let mut v = index::sample(rng, n, amount).into_vec();
    v.sort_unstable();
    v
}

/// One sampled GC trial over precomputed Jacobians.
fn sample_trial<R: Rng + ?Sized>(jacs: &[Array2<f64>], mode: SampleMode, sample_size: usize, rng: &mut R) -> f64 {
    match mode {
        SampleMode::Full => mean_in_order(jacs.iter().map(frobenius_sq)),
        SampleMode::SampleExamples => {
            let rows = sorted_sample(rng, jacs.len(), sample_size);
            mean_in_order(rows.into_iter().map(|i| frobenius_sq(&jacs[i])))
        }
        SampleMode::SampleEntries => {
            let total = jacs[0].len();
            let scale = total as f64 / sample_size as f64;
            let mut per_example = Vec::with_capacity(jacs.len());
            for j in jacs {
                let flat = j.as_slice().expect("standard layout");
                let acc = sorted_sample(rng, total, sample_size).into_iter().fold(0.0, |acc, e| acc + flat[e] * flat[e]);
                per_example.push(acc * scale);
            }
            mean_in_order(per_example)
        }
        SampleMode::SampleOutputs => {
            let outputs = jacs[0].nrows();
            let scale = outputs as f64 / sample_size as f64;
            let rows = sorted_sample(rng, outputs, sample_size);
            mean_in_order(jacs.iter().map(|j| {
                let acc = rows.iter().fold(0.0, |acc, &r| j.row(r).iter().fold(acc, |a, v| a + v * v));
                acc * scale
            }))
        }
    }
}

pub(crate) fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let mean = mean_in_order(values.iter().copied());
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss = values.iter().fold(0.0, |acc, v| acc + (v - mean) * (v - mean));
    (mean, (ss / (values.len() - 1) as f64).sqrt())
}

/// GC estimated by sampling examples, Jacobian entries (per example) or
/// output coordinates. Each mode is unbiased for [`empirical_gc`] on `x`.
pub fn sampled_gc<R: Rng + ?Sized>(
    params: &Parameters,
    x: ArrayView2<f64>,
    subnet: Subnet,
    mode: SampleMode,
    sample_size: usize,
    trials: usize,
    rng: &mut R,
) -> Result<GcEstimate> {
    if x.nrows() == 0 {
        return contract("sampled GC needs a nonempty batch");
    }
    if trials == 0 {
        return contract("sampled GC needs at least one trial");
    }
    let out_dim = match subnet {
        Subnet::Embedding => params.spec.embed_dim(),
        Subnet::Logit => params.spec.num_classes(),
    };
    let max = match mode {
        SampleMode::Full => x.nrows(),
        SampleMode::SampleExamples => x.nrows(),
        SampleMode::SampleEntries => out_dim * params.spec.input_dim(),
        SampleMode::SampleOutputs => out_dim,
    };
    if sample_size == 0 || sample_size > max {
        return contract(format!("sample_size {sample_size} out of range 1..={max} for {mode:?}"));
    }
    let jacs = jacobians(params, x, subnet)?;
    let per_trial: Vec<f64> = (0..trials).map(|_| sample_trial(&jacs, mode, sample_size, rng)).collect();
    let (value, std) = mean_and_std(&per_trial);
    Ok(GcEstimate { value, mode, sample_size, trials, std_across_trials: std })
}

/// Learning-path slope `‖∇L(θ)‖²` over the batch.
pub fn loss_slope(params: &Parameters, x: ArrayView2<f64>, y: &[usize]) -> Result<f64> {
    Ok(loss_and_grad(params, x, y)?.1.norm_sq())
}

/// Hutchinson estimate of `trace(H)` for a gradient oracle over flat vectors,
/// using Rademacher probes and finite-difference Hessian-vector products.
pub fn hutchinson_trace<G, R>(grad: G, theta: &[f64], n_probes: usize, eps: f64, rng: &mut R) -> f64
where
    G: Fn(&[f64]) -> Vec<f64>,
    R: Rng + ?Sized,
{
    assert!(n_probes >= 1, "at least one probe");
    let mut total = 0.0;
    for _ in 0..n_probes {
        let v: Vec<f64> = (0..theta.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let hv = crate::nn::hvp_with(&grad, theta, &v, eps);
        total += v.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>();
    }
    total / n_probes as f64
}

/// `trace(H)/n` of the mean cross-entropy on the batch.
pub fn sharpness_estimate<R: Rng + ?Sized>(
    params: &Parameters,
    x: ArrayView2<f64>,
    y: &[usize],
    n_probes: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_probes == 0 {
        return contract("sharpness needs at least one probe");
    }
    loss_and_grad(params, x, y)?;
    let spec = params.spec.clone();
    let grad = |theta: &[f64]| {
        let p = Parameters::from_flat(&spec, theta).expect("length fixed");
        loss_and_grad(&p, x, y).expect("shapes checked").1.to_flat()
    };
    let eps = crate::nn::default_hvp_eps(params);
    let trace = hutchinson_trace(grad, &params.to_flat(), n_probes, eps, rng);
    Ok(trace / params.num_params() as f64)
}

/// Splits a dataset into `ceil(m / batch)` evaluation batches, dealing each
/// class round-robin so every batch is as balanced as the counts allow.
pub fn stratified_batches(ds: &LabeledDataset, batch: usize) -> Vec<Vec<usize>> {
    let batch = batch.max(1);
    let n_batches = ds.len().div_ceil(batch).max(1);
    let mut out = vec![Vec::new(); n_batches];
    for members in ds.class_indices() {
        for (j, i) in members.into_iter().enumerate() {
            out[j % n_batches].push(i);
        }
    }
    for b in &mut out {
        b.sort_unstable();
    }
    out
}

/// Embedding-level metrics averaged over evaluation batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingMetrics {
    pub embedding_gc: f64,
    pub logit_gc: f64,
    pub nc: f64,
    pub inv_sq_dist_sum: f64,
    pub geometric_collapse: f64,
}

fn batch_metrics(params: &Parameters, x: ArrayView2<f64>, y: &[usize], k: usize) -> Result<EmbeddingMetrics> {
    let emb_jacs = jacobians(params, x, Subnet::Embedding)?;
    let head = &params.layers.last().unwrap().weight;
    let embedding_gc = mean_in_order(emb_jacs.iter().map(frobenius_sq));
    let logit_gc = mean_in_order(emb_jacs.iter().map(|j| frobenius_sq(&head.dot(j))));
    let z = embed(params, x)?;
    let stats = class_stats(z.view(), y, k)?;
    let nc = nc_measure(&stats)?;
    let inv = stats.inv_sq_dist_sum()?;
    Ok(EmbeddingMetrics {
        embedding_gc,
        logit_gc,
        nc,
        inv_sq_dist_sum: inv,
        geometric_collapse: geometric_collapse(embedding_gc, &stats)?,
    })
}

/// Embedding GC, logit GC, NC, `Σ 1/d²` and geometric collapse of `ds`,
/// each computed per evaluation batch and averaged over batches.
pub fn embedding_metrics(params: &Parameters, ds: &LabeledDataset, eval_batch: usize) -> Result<EmbeddingMetrics> {
    let batches = stratified_batches(ds, eval_batch);
    let mut acc = [0.0f64; 5];
    for idx in &batches {
        let x = ds.x().select(Axis(0), idx);
        let y: Vec<usize> = idx.iter().map(|&i| ds.y()[i]).collect();
        let m = batch_metrics(params, x.view(), &y, ds.num_classes())?;
        for (a, v) in acc.iter_mut().zip([m.embedding_gc, m.logit_gc, m.nc, m.inv_sq_dist_sum, m.geometric_collapse]) {
            *a += v;
        }
    }
    let n = batches.len() as f64;
    Ok(EmbeddingMetrics {
        embedding_gc: acc[0] / n,
        logit_gc: acc[1] / n,
        nc: acc[2] / n,
        inv_sq_dist_sum: acc[3] / n,
        geometric_collapse: acc[4] / n,
    })
}

/// One logged evaluation step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub embedding_gc: f64,
    pub logit_gc: f64,
    pub nc: f64,
    pub geometric_collapse: f64,
    pub inv_sq_dist_sum: f64,
    pub slope: f64,
    pub sharpness: f64,
    pub c_lower_bound: f64,
    pub gen_bound_lhs: f64,
    pub gen_bound_rhs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_nc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_ridge_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_nearest_mean_acc: Option<f64>,
}

/// A scalar field of a [`MetricsRecord`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldValue {
    Int(usize),
    Float(f64),
}

impl MetricsRecord {
    /// Field names and values in declaration order; absent optional fields
    /// are omitted.
    pub fn fields(&self) -> Vec<(&'static str, FieldValue)> {
        use FieldValue::{Float, Int};
        let mut out = vec![
            ("step", Int(self.step)),
            ("train_loss", Float(self.train_loss)),
            ("train_acc", Float(self.train_acc)),
            ("test_acc", Float(self.test_acc)),
            ("embedding_gc", Float(self.embedding_gc)),
            ("logit_gc", Float(self.logit_gc)),
            ("nc", Float(self.nc)),
            ("geometric_collapse", Float(self.geometric_collapse)),
            ("inv_sq_dist_sum", Float(self.inv_sq_dist_sum)),
            ("slope", Float(self.slope)),
            ("sharpness", Float(self.sharpness)),
            ("c_lower_bound", Float(self.c_lower_bound)),
            ("gen_bound_lhs", Float(self.gen_bound_lhs)),
            ("gen_bound_rhs", Float(self.gen_bound_rhs)),
        ];
        for (name, v) in [
            ("target_nc", self.target_nc),
            ("target_ridge_acc", self.target_ridge_acc),
            ("target_nearest_mean_acc", self.target_nearest_mean_acc),
        ] {
            if let Some(v) = v {
                out.push((name, Float(v)));
            }
        }
        out
    }
}
