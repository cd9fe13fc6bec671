//! Plain SGD with L2 and explicit logit-GC regularization, periodic metric
//! logging and sweeps over independent runs.

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{generalization_bound_rhs_from_sum, nearest_mean_error, BoundInputs};
use crate::data::{EpisodeSpec, LabeledDataset};
use crate::error::{contract, Error, Result};
use crate::metrics::{embedding_metrics, sharpness_estimate, MetricsRecord};
use crate::nn::{forward, init_params, logit_gc_and_grad, loss_and_grad, NetworkSpec, Parameters};
use crate::par;
use crate::transfer::few_shot_eval;

/// Loss above this (or any non-finite loss or parameter) counts as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Confidence level used for the logged generalization bound (the Lipschitz
/// term is omitted there, so it only matters when that term is restored).
pub const LOGGED_BOUND_DELTA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub network: NetworkSpec,
    pub lr: f64,
    pub batch_size: usize,
    /// Coefficient of `l2 · ‖θ‖²`; the gradient contribution is `2 · l2 · θ`.
    pub l2: f64,
    /// Coefficient of the empirical logit GC penalty.
    pub gc_reg: f64,
    pub steps: usize,
    pub log_every: usize,
    pub seed: u64,
    pub eval_batch: usize,
    pub sharpness_probes: usize,
}

impl TrainConfig {
    pub fn new(network: NetworkSpec, seed: u64) -> Self {
        Self {
            network,
            lr: 0.05,
            batch_size: 32,
            l2: 0.0,
            gc_reg: 0.0,
            steps: 1000,
            log_every: 100,
            seed,
            eval_batch: 512,
            sharpness_probes: 2,
        }
    }

    pub fn validate(&self, train_len: usize) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return contract(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        if !(self.l2 >= 0.0) || !(self.gc_reg >= 0.0) {
            return contract("l2 and gc_reg must be nonnegative");
        }
        if self.batch_size == 0 || self.batch_size > train_len {
            return contract(format!("batch_size {} must lie in 1..={train_len}", self.batch_size));
        }
        if self.log_every == 0 || (self.steps > 0 && self.log_every > self.steps) {
            return contract(format!("log_every {} must lie in 1..=steps ({})", self.log_every, self.steps));
        }
        if self.eval_batch == 0 || self.sharpness_probes == 0 {
            return contract("eval_batch and sharpness_probes must be positive");
        }
        Ok(())
    }
}

/// Target classes evaluated few-shot at every checkpoint.
#[derive(Debug, Clone)]
pub struct TransferProbe {
    pub target: LabeledDataset,
    pub episodes: EpisodeSpec,
    pub lambda: Option<f64>,
    /// Fixes the episode draws, shared by every checkpoint.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub config: TrainConfig,
    pub records: Vec<MetricsRecord>,
    pub final_params: Parameters,
    /// Step at which training diverged, if it did.
    pub diverged_at: Option<usize>,
}

impl RunLog {
    /// Largest logged Poincaré lower bound (NaN entries skipped).
    pub fn max_c_lower_bound(&self) -> f64 {
        self.records.iter().map(|r| r.c_lower_bound).filter(|v| v.is_finite()).fold(f64::NAN, f64::max)
    }
}

/// `θ − η (∇L + 2·l2·θ + gc_reg·∇GC)`.
pub fn sgd_update(params: &Parameters, loss_grad: &Parameters, gc_grad: Option<&Parameters>, config: &TrainConfig) -> Parameters {
    let mut direction = loss_grad.clone();
    if config.l2 != 0.0 {
        direction.axpy(2.0 * config.l2, params);
    }
    if let Some(g) = gc_grad {
        direction.axpy(config.gc_reg, g);
    }
    let mut next = params.clone();
    next.axpy(-config.lr, &direction);
    next
}

/// One SGD step on a mini-batch; returns the new parameters and the batch
/// loss. `step` only labels a divergence error.
pub fn sgd_step(params: &Parameters, x: ArrayView2<f64>, y: &[usize], config: &TrainConfig, step: usize) -> Result<(Parameters, f64)> {
    let (loss, grad) = loss_and_grad(params, x, y)?;
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::Diverged { step });
    }
    let gc_grad = if config.gc_reg > 0.0 { Some(logit_gc_and_grad(params, x)?.1) } else { None };
    let next = sgd_update(params, &grad, gc_grad.as_ref(), config);
    if !next.is_finite() {
        return Err(Error::Diverged { step });
    }
    Ok((next, loss))
}

/// Fraction of rows whose argmax logit equals the label; ties go to the
/// smaller class index.
pub fn accuracy(params: &Parameters, ds: &LabeledDataset) -> Result<f64> {
    let trace = forward(params, ds.x().view())?;
    Ok(accuracy_from_logits(trace.logits().view(), ds.y()))
}

pub fn accuracy_from_logits(logits: ArrayView2<f64>, y: &[usize]) -> f64 {
    let correct = logits
        .outer_iter()
        .zip(y)
        .filter(|(row, &c)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == c
        })
        .count();
    correct as f64 / y.len() as f64
}

struct Evaluator<'a> {
    config: &'a TrainConfig,
    train: &'a LabeledDataset,
    test: &'a LabeledDataset,
    probe: Option<&'a TransferProbe>,
    sharpness_rng: ChaCha8Rng,
    running_c: f64,
}

impl Evaluator<'_> {
    fn record(&mut self, params: &Parameters, step: usize) -> Result<MetricsRecord> {
        let x = self.train.x().view();
        let (train_loss, grad) = loss_and_grad(params, x, self.train.y())?;
        let slope = grad.norm_sq();
        let sharpness = sharpness_estimate(params, x, self.train.y(), self.config.sharpness_probes, &mut self.sharpness_rng)?;
        let train_acc = accuracy(params, self.train)?;
        let test_acc = accuracy(params, self.test)?;
        let gen_bound_lhs = match nearest_mean_error(params, self.train, self.test) {
            Ok(v) => v,
            Err(Error::Contract(_)) | Err(Error::DegenerateMeans { .. }) => f64::NAN,
            Err(e) => return Err(e),
        };

        let nan = f64::NAN;
        let (embedding_gc, logit_gc, nc, gcol, inv) = match embedding_metrics(params, self.train, self.config.eval_batch) {
            Ok(m) => (m.embedding_gc, m.logit_gc, m.nc, m.geometric_collapse, m.inv_sq_dist_sum),
            Err(Error::DegenerateMeans { .. }) => {
                let emb = crate::metrics::empirical_gc(params, x, crate::nn::Subnet::Embedding)?.value;
                let logit = crate::metrics::empirical_gc(params, x, crate::nn::Subnet::Logit)?.value;
                (emb, logit, nan, nan, nan)
            }
            Err(e) => return Err(e),
        };
        let c_lower_bound = if gcol > 0.0 { nc / gcol } else { nan };
        if c_lower_bound.is_finite() {
            self.running_c = if self.running_c.is_finite() { self.running_c.max(c_lower_bound) } else { c_lower_bound };
        }
        let gen_bound_rhs = if self.running_c.is_finite() && inv.is_finite() {
            let inputs = BoundInputs {
                c: self.running_c,
                lipschitz: 0.0,
                delta: LOGGED_BOUND_DELTA,
                p: params.spec.embed_dim(),
                m_c: self.train.per_class(),
                k: self.train.num_classes(),
                include_lipschitz_term: false,
            };
            generalization_bound_rhs_from_sum(embedding_gc, inv, &inputs)?
        } else {
            nan
        };

        let (mut target_nc, mut target_ridge_acc, mut target_nearest_mean_acc) = (None, None, None);
        if let Some(probe) = self.probe {
            let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
            let s = few_shot_eval(params, &probe.target, &probe.episodes, probe.lambda, &mut rng)?;
            target_nc = Some(s.target_nc_mean);
            target_ridge_acc = Some(s.ridge_acc_mean);
            target_nearest_mean_acc = Some(s.nearest_mean_acc_mean);
        }

        Ok(MetricsRecord {
            step,
            train_loss,
            train_acc,
            test_acc,
            embedding_gc,
            logit_gc,
            nc,
            geometric_collapse: gcol,
            inv_sq_dist_sum: inv,
            slope,
            sharpness,
            c_lower_bound,
            gen_bound_lhs,
            gen_bound_rhs,
            target_nc,
            target_ridge_acc,
            target_nearest_mean_acc,
        })
    }
}

fn check_datasets(config: &TrainConfig, train: &LabeledDataset, test: &LabeledDataset) -> Result<()> {
    let spec = &config.network;
    if train.dim() != spec.input_dim() || test.dim() != spec.input_dim() {
        return contract(format!("datasets have {} / {} features, network expects {}", train.dim(), test.dim(), spec.input_dim()));
    }
    if train.num_classes() != spec.num_classes() || test.num_classes() != spec.num_classes() {
        return contract(format!(
            "datasets have {} / {} classes, network has {} logits",
            train.num_classes(),
            test.num_classes(),
            spec.num_classes()
        ));
    }
    config.validate(train.len())
}

/// Trains from `init_params(config.network, config.seed)`, calling
/// `on_record` for each logged record as soon as it is computed.
///
/// Divergence does not produce an error: the partial log is returned with
/// `diverged_at` set.
pub fn train_run_with<F>(
    config: &TrainConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    probe: Option<&TransferProbe>,
    mut on_record: F,
) -> Result<RunLog>
where
    F: FnMut(&MetricsRecord),
{
    check_datasets(config, train, test)?;
    if let Some(p) = probe {
        p.episodes.validate_for(&p.target)?;
        if p.target.dim() != train.dim() {
            return contract("target dataset feature count differs from the training set");
        }
    }
    let mut params = init_params(&config.network, config.seed);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    batch_rng.set_stream(1);
    let mut sharpness_rng = ChaCha8Rng::seed_from_u64(config.seed);
    sharpness_rng.set_stream(2);
    let mut eval = Evaluator { config, train, test, probe, sharpness_rng, running_c: f64::NAN };

    let mut records = Vec::with_capacity(config.steps / config.log_every + 1);
    let first = eval.record(&params, 0)?;
    on_record(&first);
    records.push(first);

    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut diverged_at = None;
    for step in 1..=config.steps {
        if cursor + config.batch_size > n {
            order.shuffle(&mut batch_rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + config.batch_size];
        cursor += config.batch_size;
        let xb = train.x().select(Axis(0), idx);
        let yb: Vec<usize> = idx.iter().map(|&i| train.y()[i]).collect();
        match sgd_step(&params, xb.view(), &yb, config, step) {
            Ok((next, _)) => params = next,
            Err(Error::Diverged { step }) => {
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        }
        if step % config.log_every == 0 {
            let rec = eval.record(&params, step)?;
            on_record(&rec);
            records.push(rec);
        }
    }
    Ok(RunLog { config: config.clone(), records, final_params: params, diverged_at })
}

pub fn train_run(config: &TrainConfig, train: &LabeledDataset, test: &LabeledDataset, probe: Option<&TransferProbe>) -> Result<RunLog> {
    train_run_with(config, train, test, probe, |_| {})
}

/// One run of a sweep; datasets are shared read-only between jobs.
#[derive(Debug, Clone)]
pub struct TrainJob<'a> {
    pub config: TrainConfig,
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub probe: Option<&'a TransferProbe>,
}

/// Runs independent jobs on at most `max_parallel` workers; results keep the
/// input order. `on_record(job_index, record)` streams records as they are
/// produced.
pub fn run_sweep_with<F>(jobs: &[TrainJob<'_>], max_parallel: usize, on_record: F) -> Result<Vec<RunLog>>
where
    F: Fn(usize, &MetricsRecord) + Sync + Send,
{
    if jobs.is_empty() {
        return contract("sweep needs at least one configuration");
    }
    par::with_threads(max_parallel, || {
        par::map_range(jobs.len(), |i| {
            let job = &jobs[i];
            train_run_with(&job.config, job.train, job.test, job.probe, |r| on_record(i, r))
        })
    })
    .into_iter()
    .collect()
}

pub fn run_sweep(jobs: &[TrainJob<'_>], max_parallel: usize) -> Result<Vec<RunLog>> {
    run_sweep_with(jobs, max_parallel, |_, _| {})
}
