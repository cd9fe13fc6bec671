use std::path::{Path, PathBuf};
use std::sync::Mutex;

use geocollapse::bounds::{
    ensemble_stats, generalization_bound_rhs_from_sum, lipschitz_lower_bound, transfer_bound_rhs, BoundInputs,
};
use geocollapse::data::{gen_subspace_mixture, load_idx, split_classes, stratified_split, ClassSplit, LabeledDataset};
use geocollapse::metrics::{
    class_stats, embed_dataset, empirical_gc, geometric_collapse, nc_measure, sampled_gc, SampleMode,
};
use geocollapse::nn::{NetworkSpec, Subnet};
use geocollapse::train::{run_sweep_with, train_run_with, RunLog, TrainConfig, TrainJob, TransferProbe};
use geocollapse::transfer::few_shot_eval;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, DatasetKind, ExperimentConfig, SweepAxis};
use crate::output::{fmt_f64, record_columns, write_csv, JsonlWriter};
use crate::verify;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Sweep,
    Transfer,
    EstimateGc,
    Bounds,
    Verify,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run {run} diverged at step {step}")]
    Diverged { run: String, step: usize },
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] geocollapse::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::Verification(_) => 4,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}

fn cfg_err<T>(key: &str, msg: impl Into<String>) -> Result<T, CliError> {
    Err(ConfigError::Constraint { key: key.into(), msg: msg.into() }.into())
}

/// Datasets and network shape derived from a config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub target: Option<LabeledDataset>,
    pub spec: NetworkSpec,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let d = &cfg.dataset;
    let full = match &d.kind {
        DatasetKind::Synthetic => gen_subspace_mixture(d.classes, d.dim, d.signal_dims, d.mean_scale, d.sigma, d.per_class, d.seed)?,
        DatasetKind::Idx { images, labels } => {
            let (ds, trim) = load_idx(images, labels)?;
            if trim.dropped > 0 {
                eprintln!(
                    "idx: classes were imbalanced ({:?}); kept {} per class, dropped {}",
                    trim.original_counts, trim.kept_per_class, trim.dropped
                );
            }
            ds
        }
    };
    let (source, target) = match (&d.source_classes, &d.target_classes) {
        (Some(s), Some(t)) => {
            if let Some(&bad) = s.iter().chain(t).find(|&&c| c >= full.num_classes()) {
                return cfg_err("dataset.source_classes", format!("class {bad} out of range for {} classes", full.num_classes()));
            }
            let (a, b) = split_classes(&full, &ClassSplit { source: s.clone(), target: t.clone() })?;
            (a, Some(b))
        }
        _ => (full, None),
    };
    let (train, test) = match stratified_split(&source, d.test_fraction, d.seed) {
        Ok(v) => v,
        Err(geocollapse::Error::Contract(msg)) => return cfg_err("dataset.test_fraction", msg),
        Err(e) => return Err(e.into()),
    };
    let widths = cfg.network.layer_widths.clone().ok_or_else(|| ConfigError::Missing("network.layer_widths".into()))?;
    if widths[0] != train.dim() || *widths.last().unwrap() != train.num_classes() {
        return cfg_err(
            "network.layer_widths",
            format!("must start at the input dimension {} and end at the class count {}", train.dim(), train.num_classes()),
        );
    }
    let spec = NetworkSpec::new(widths, cfg.network.activation)?;
    if cfg.train.batch_size > train.len() {
        return cfg_err("train.batch_size", format!("exceeds the training-set size {}", train.len()));
    }
    Ok(Prepared { train, test, target, spec })
}

pub fn train_config(cfg: &ExperimentConfig, spec: &NetworkSpec) -> TrainConfig {
    let t = &cfg.train;
    TrainConfig {
        network: spec.clone(),
        lr: t.lr,
        batch_size: t.batch_size,
        l2: t.l2,
        gc_reg: t.gc_reg,
        steps: t.steps,
        log_every: t.log_every,
        seed: t.seed,
        eval_batch: t.eval_batch,
        sharpness_probes: t.sharpness_probes,
    }
}

fn probe(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Option<TransferProbe>, CliError> {
    let Some(target) = &prep.target else { return Ok(None) };
    if let Err(e) = cfg.transfer.episodes.validate_for(target) {
        return cfg_err("transfer.n_way", e.to_string());
    }
    Ok(Some(TransferProbe { target: target.clone(), episodes: cfg.transfer.episodes, lambda: cfg.transfer.lambda, seed: cfg.transfer.seed }))
}

fn out_path(cfg: &ExperimentConfig, suffix: &str) -> PathBuf {
    cfg.output.dir.join(format!("{}{suffix}", cfg.output.run_id))
}

fn start_output(cfg: &ExperimentConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.output.dir)?;
    std::fs::write(out_path(cfg, ".config.toml"), cfg.to_toml())?;
    Ok(())
}

/// Trains one configuration, streaming records to `jsonl`.
fn train_logged(tc: &TrainConfig, prep: &Prepared, probe: Option<&TransferProbe>, jsonl: &Path) -> Result<RunLog, CliError> {
    let mut writer = JsonlWriter::create(jsonl)?;
    let mut io_err = None;
    let log = train_run_with(tc, &prep.train, &prep.test, probe, |r| {
        if io_err.is_none() {
            io_err = writer.write(r).err();
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    Ok(log)
}

fn summary_row(prefix: Vec<String>, log: &RunLog) -> (Vec<String>, Vec<String>) {
    let (names, values) = record_columns(log.records.last().expect("step-0 record always exists"));
    let mut header = vec![];
    let mut row = prefix;
    header.extend(names);
    row.extend(values);
    (header, row)
}

fn diverged(run: &str, log: &RunLog) -> Result<(), CliError> {
    match log.diverged_at {
        Some(step) => Err(CliError::Diverged { run: run.to_string(), step }),
        None => Ok(()),
    }
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let prep = prepare(cfg)?;
    let probe = probe(cfg, &prep)?;
    start_output(cfg)?;
    let tc = train_config(cfg, &prep.spec);
    let log = train_logged(&tc, &prep, probe.as_ref(), &out_path(cfg, ".jsonl"))?;
    write_run_summary(cfg, &log, vec![], vec![])?;
    diverged(&cfg.output.run_id, &log)
}

fn write_run_summary(cfg: &ExperimentConfig, log: &RunLog, extra_names: Vec<String>, extra: Vec<String>) -> Result<(), CliError> {
    let prefix = vec![cfg.output.run_id.clone(), log.config.seed.to_string(), log.diverged_at.map_or(String::new(), |s| s.to_string())];
    let (names, mut row) = summary_row(prefix, log);
    let mut header: Vec<String> = ["run", "seed", "diverged_at"].map(String::from).to_vec();
    header.extend(names);
    header.extend(extra_names);
    row.extend(extra);
    write_csv(&out_path(cfg, "_summary.csv"), &header, &[row])?;
    Ok(())
}

fn axis_value_label(axis: SweepAxis, v: f64) -> String {
    match axis {
        SweepAxis::BatchSize => format!("{}", v as usize),
        _ => format!("{v:?}"),
    }
}

fn apply_axis(tc: &mut TrainConfig, axis: SweepAxis, v: f64) {
    match axis {
        SweepAxis::Lr => tc.lr = v,
        SweepAxis::BatchSize => tc.batch_size = v as usize,
        SweepAxis::L2 => tc.l2 = v,
        SweepAxis::GcReg => tc.gc_reg = v,
    }
}

/// The name, label and config of every run in the sweep, in grid order
/// (values outer, seeds inner).
pub fn sweep_plan(cfg: &ExperimentConfig, spec: &NetworkSpec) -> Result<Vec<(String, String, TrainConfig)>, CliError> {
    let axis = cfg.sweep.axis.ok_or_else(|| ConfigError::Missing("sweep.axis".into()))?;
    let base = train_config(cfg, spec);
    let mut plan = vec![];
    for &v in &cfg.sweep.values {
        for &seed in &cfg.sweep.seeds {
            let mut tc = TrainConfig { seed, ..base.clone() };
            apply_axis(&mut tc, axis, v);
            let label = axis_value_label(axis, v);
            plan.push((format!("{}_{}={}_seed{}", cfg.output.run_id, axis.name(), label, seed), label, tc));
        }
    }
    Ok(plan)
}

fn cmd_sweep(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let prep = prepare(cfg)?;
    let probe = probe(cfg, &prep)?;
    let axis = cfg.sweep.axis.ok_or_else(|| ConfigError::Missing("sweep.axis".into()))?;
    if axis == SweepAxis::BatchSize && cfg.sweep.values.iter().any(|&v| v as usize > prep.train.len()) {
        return cfg_err("sweep.values", format!("batch sizes must not exceed the training-set size {}", prep.train.len()));
    }
    start_output(cfg)?;
    let plan = sweep_plan(cfg, &prep.spec)?;
    let writers: Vec<Mutex<JsonlWriter>> = plan
        .iter()
        .map(|(name, _, _)| JsonlWriter::create(&cfg.output.dir.join(format!("{name}.jsonl"))).map(Mutex::new))
        .collect::<Result<_, _>>()?;
    let io_errs: Mutex<Vec<std::io::Error>> = Mutex::new(vec![]);
    let jobs: Vec<TrainJob> =
        plan.iter().map(|(_, _, tc)| TrainJob { config: tc.clone(), train: &prep.train, test: &prep.test, probe: probe.as_ref() }).collect();
    let logs = run_sweep_with(&jobs, cfg.sweep.max_parallel, |i, r| {
        if let Err(e) = writers[i].lock().unwrap().write(r) {
            io_errs.lock().unwrap().push(e);
        }
    })?;
    if let Some(e) = io_errs.into_inner().unwrap().pop() {
        return Err(e.into());
    }

    let mut header: Vec<String> = ["run", "axis", "value", "seed", "diverged_at"].map(String::from).to_vec();
    let mut rows = vec![];
    for ((name, label, tc), log) in plan.iter().zip(&logs) {
        let prefix = vec![
            name.clone(),
            axis.name().to_string(),
            label.clone(),
            tc.seed.to_string(),
            log.diverged_at.map_or(String::new(), |s| s.to_string()),
        ];
        let (names, row) = summary_row(prefix, log);
        if rows.is_empty() {
            header.extend(names);
        }
        rows.push(row);
        if let Some(step) = log.diverged_at {
            eprintln!("warning: run {name} diverged at step {step}");
        }
    }
    write_csv(&out_path(cfg, "_summary.csv"), &header, &rows)?;
    Ok(())
}

fn cmd_transfer(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let prep = prepare(cfg)?;
    let probe = probe(cfg, &prep)?.ok_or_else(|| ConfigError::Missing("dataset.target_classes".into()))?;
    start_output(cfg)?;
    let tc = train_config(cfg, &prep.spec);
    let log = train_logged(&tc, &prep, Some(&probe), &out_path(cfg, ".jsonl"))?;
    diverged(&cfg.output.run_id, &log)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.transfer.seed);
    let s = few_shot_eval(&log.final_params, &probe.target, &probe.episodes, probe.lambda, &mut rng)?;
    let header = ["episode", "ridge_accuracy", "nearest_mean_accuracy", "target_nc", "lambda", "normal_residual"].map(String::from);
    let rows: Vec<Vec<String>> = s
        .episodes
        .iter()
        .enumerate()
        .map(|(i, e)| {
            vec![
                i.to_string(),
                fmt_f64(e.ridge_accuracy),
                fmt_f64(e.nearest_mean_accuracy),
                e.target_nc.map_or_else(String::new, fmt_f64),
                fmt_f64(e.lambda),
                fmt_f64(e.normal_residual),
            ]
        })
        .collect();
    write_csv(&out_path(cfg, "_episodes.csv"), &header, &rows)?;
    let names = [
        "ridge_acc_mean",
        "ridge_acc_std",
        "nearest_mean_acc_mean",
        "nearest_mean_acc_std",
        "target_nc_mean",
        "target_nc_std",
        "n_degenerate",
        "max_normal_residual",
    ]
    .map(String::from)
    .to_vec();
    let values = vec![
        fmt_f64(s.ridge_acc_mean),
        fmt_f64(s.ridge_acc_std),
        fmt_f64(s.nearest_mean_acc_mean),
        fmt_f64(s.nearest_mean_acc_std),
        fmt_f64(s.target_nc_mean),
        fmt_f64(s.target_nc_std),
        s.n_degenerate.to_string(),
        fmt_f64(s.max_normal_residual),
    ];
    write_run_summary(cfg, &log, names, values)
}

fn cmd_estimate_gc(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let prep = prepare(cfg)?;
    start_output(cfg)?;
    let tc = train_config(cfg, &prep.spec);
    let log = train_logged(&tc, &prep, None, &out_path(cfg, ".jsonl"))?;
    diverged(&cfg.output.run_id, &log)?;
    let params = &log.final_params;
    let x = prep.train.x().view();
    let subnet = cfg.gc.subnet;
    let full = empirical_gc(params, x, subnet)?.value;
    let out_dim = match subnet {
        Subnet::Embedding => prep.spec.embed_dim(),
        Subnet::Logit => prep.spec.num_classes(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.gc.seed);
    let header = ["mode", "sample_size", "trials", "value", "std_across_trials", "full_value", "rel_error"].map(String::from);
    let mut rows = vec![];
    for &mode in &cfg.gc.modes {
        let max = match mode {
            SampleMode::Full | SampleMode::SampleExamples => x.nrows(),
            SampleMode::SampleEntries => out_dim * x.ncols(),
            SampleMode::SampleOutputs => out_dim,
        };
        let size = ((cfg.gc.fraction * max as f64).ceil() as usize).clamp(1, max);
        let (est, size, trials) = if mode == SampleMode::Full {
            (empirical_gc(params, x, subnet)?, x.nrows(), 1)
        } else {
            (sampled_gc(params, x, subnet, mode, size, cfg.gc.trials, &mut rng)?, size, cfg.gc.trials)
        };
        rows.push(vec![
            mode.name().to_string(),
            size.to_string(),
            trials.to_string(),
            fmt_f64(est.value),
            fmt_f64(est.std_across_trials),
            fmt_f64(full),
            fmt_f64((est.value - full) / full),
        ]);
    }
    write_csv(&out_path(cfg, "_gc.csv"), &header, &rows)?;
    Ok(())
}

fn cmd_bounds(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let prep = prepare(cfg)?;
    start_output(cfg)?;
    let base = train_config(cfg, &prep.spec);
    let mut logs = vec![];
    for &seed in &cfg.sweep.seeds {
        let tc = TrainConfig { seed, ..base.clone() };
        let log = train_logged(&tc, &prep, None, &out_path(cfg, &format!("_seed{seed}.jsonl")))?;
        diverged(&format!("{}_seed{seed}", cfg.output.run_id), &log)?;
        logs.push(log);
    }

    let header = [
        "seed", "step", "nc", "c_star", "geometric_collapse", "nc_bound", "nc_holds", "gen_bound_lhs", "gen_bound_rhs", "gen_holds",
    ]
    .map(String::from);
    let mut rows = vec![];
    let (mut nc_ok, mut gen_ok, mut total) = (0usize, 0usize, 0usize);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    for log in &logs {
        let c_star = cfg.bounds.c.unwrap_or_else(|| log.max_c_lower_bound());
        let lipschitz = if cfg.bounds.include_lipschitz {
            lipschitz_lower_bound(&log.final_params, prep.train.x().view(), &mut rng)?
        } else {
            0.0
        };
        let inputs = BoundInputs {
            c: c_star,
            lipschitz,
            delta: cfg.bounds.delta,
            p: prep.spec.embed_dim(),
            m_c: prep.train.per_class(),
            k: prep.train.num_classes(),
            include_lipschitz_term: cfg.bounds.include_lipschitz,
        };
        for r in &log.records {
            if !(r.nc.is_finite() && c_star.is_finite()) {
                continue;
            }
            let nc_bound = c_star * r.geometric_collapse;
            let rhs = generalization_bound_rhs_from_sum(r.embedding_gc, r.inv_sq_dist_sum, &inputs)?;
            let nc_holds = r.nc <= nc_bound;
            let gen_holds = r.gen_bound_lhs <= rhs;
            total += 1;
            nc_ok += nc_holds as usize;
            gen_ok += gen_holds as usize;
            rows.push(vec![
                log.config.seed.to_string(),
                r.step.to_string(),
                fmt_f64(r.nc),
                fmt_f64(c_star),
                fmt_f64(r.geometric_collapse),
                fmt_f64(nc_bound),
                nc_holds.to_string(),
                fmt_f64(r.gen_bound_lhs),
                fmt_f64(rhs),
                gen_holds.to_string(),
            ]);
        }
    }
    write_csv(&out_path(cfg, "_bounds.csv"), &header, &rows)?;
    println!("nc <= c*·geometric_collapse at {nc_ok}/{total} checkpoints; generalization bound holds at {gen_ok}/{total}");

    if let Some(target) = &prep.target {
        let ensemble: Vec<_> = logs.iter().map(|l| l.final_params.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.transfer.seed);
        let ens = ensemble_stats(&ensemble, &prep.train, Some(target), cfg.bounds.rademacher_trials, &mut rng)?;
        let lead = &logs[0];
        let z = embed_dataset(&lead.final_params, &prep.train)?;
        let stats = class_stats(z.view(), prep.train.y(), prep.train.num_classes())?;
        let source_gc = empirical_gc(&lead.final_params, prep.train.x().view(), Subnet::Embedding)?.value;
        let c_source = cfg.bounds.c_source.unwrap_or_else(|| lead.max_c_lower_bound());
        let c_target = match cfg.bounds.c_target {
            Some(c) => c,
            None => target_c_lower_bound(&ensemble, target)?,
        };
        let tb = transfer_bound_rhs(source_gc, &stats, &ens, c_source, c_target, cfg.bounds.delta, prep.train.num_classes())?;
        let zt = embed_dataset(&lead.final_params, target)?;
        let target_nc = nc_measure(&class_stats(zt.view(), target.y(), target.num_classes())?)?;
        let header = [
            "total", "term1", "term2", "term3", "delta_fstar", "sup_gc_per_class", "sup_embed_norm", "rademacher_h",
            "rademacher_h_std", "ensemble_size", "c_source", "c_target", "target_nc",
        ]
        .map(String::from);
        let row = vec![
            fmt_f64(tb.total),
            fmt_f64(tb.term1),
            fmt_f64(tb.term2),
            fmt_f64(tb.term3),
            fmt_f64(ens.delta_fstar),
            fmt_f64(ens.sup_gc_per_class),
            fmt_f64(ens.sup_embed_norm),
            fmt_f64(ens.rademacher_h),
            fmt_f64(ens.rademacher_h_std),
            ens.ensemble_size.to_string(),
            fmt_f64(c_source),
            fmt_f64(c_target),
            fmt_f64(target_nc),
        ];
        write_csv(&out_path(cfg, "_transfer_bound.csv"), &header, &[row])?;
        println!("transfer bound {} (target NC {})", fmt_f64(tb.total), fmt_f64(target_nc));
    }
    Ok(())
}

/// Largest `nc / geometric_collapse` of the target classes over the ensemble
/// at the final parameters.
pub fn target_c_lower_bound(ensemble: &[geocollapse::nn::Parameters], target: &LabeledDataset) -> Result<f64, CliError> {
    let mut best = f64::NAN;
    for f in ensemble {
        let z = embed_dataset(f, target)?;
        let stats = class_stats(z.view(), target.y(), target.num_classes())?;
        let gc = empirical_gc(f, target.x().view(), Subnet::Embedding)?.value;
        let c = nc_measure(&stats)? / geometric_collapse(gc, &stats)?;
        best = if best.is_nan() { c } else { best.max(c) };
    }
    Ok(best)
}

fn cmd_verify(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let results = verify::run_all(cfg.verify.cases, cfg.verify.seed);
    let mut failed = vec![];
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}

pub fn run_command(cfg: &ExperimentConfig, command: Command) -> Result<(), CliError> {
    match command {
        Command::Train => cmd_train(cfg),
        Command::Sweep => cmd_sweep(cfg),
        Command::Transfer => cmd_transfer(cfg),
        Command::EstimateGc => cmd_estimate_gc(cfg),
        Command::Bounds => cmd_bounds(cfg),
        Command::Verify => cmd_verify(cfg),
    }
}
