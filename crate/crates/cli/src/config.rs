//! Experiment configuration: a TOML document read as flat dotted keys
//! (`train.lr = 0.01`), checked against a fixed schema with defaults filled.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use geocollapse::data::EpisodeSpec;
use geocollapse::metrics::SampleMode;
use geocollapse::nn::{Activation, Subnet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Read(String),
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}` must be {expected}")]
    Type { key: String, expected: &'static str },
    #[error("config key `{key}`: {msg}")]
    Constraint { key: String, msg: String },
    #[error("config key `{0}` is required")]
    Missing(String),
}

fn constraint<T>(key: &str, msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Constraint { key: key.to_string(), msg: msg.into() })
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    Synthetic,
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub classes: usize,
    pub dim: usize,
    pub signal_dims: usize,
    pub mean_scale: f64,
    pub sigma: f64,
    pub per_class: usize,
    pub seed: u64,
    pub test_fraction: f64,
    pub source_classes: Option<Vec<usize>>,
    pub target_classes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// `None` only for IDX data, where it must be given explicitly.
    pub layer_widths: Option<Vec<usize>>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    /// Coefficient of `l2 · ‖θ‖²` added to the loss (gradient term `2·l2·θ`).
    pub l2: f64,
    pub gc_reg: f64,
    pub steps: usize,
    pub log_every: usize,
    pub seed: u64,
    pub eval_batch: usize,
    pub sharpness_probes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Lr,
    BatchSize,
    L2,
    GcReg,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lr => "lr",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::L2 => "l2",
            SweepAxis::GcReg => "gc_reg",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub axis: Option<SweepAxis>,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub max_parallel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferConfig {
    pub episodes: EpisodeSpec,
    pub lambda: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsConfig {
    pub c: Option<f64>,
    pub c_source: Option<f64>,
    pub c_target: Option<f64>,
    pub delta: f64,
    pub include_lipschitz: bool,
    pub rademacher_trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcConfig {
    pub subnet: Subnet,
    pub modes: Vec<SampleMode>,
    pub fraction: f64,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub cases: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub run_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub train: TrainSection,
    pub sweep: SweepConfig,
    pub transfer: TransferConfig,
    pub bounds: BoundsConfig,
    pub gc: GcConfig,
    pub verify: VerifyConfig,
    pub output: OutputConfig,
}

/// Flattened `key → value` view of a parsed document; keys are removed as the
/// schema consumes them so leftovers can be reported.
struct Fields {
    map: BTreeMap<String, toml::Value>,
}

fn flatten(prefix: &str, table: toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other);
            }
        }
    }
}

impl Fields {
    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.map.remove(key)
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.opt_f64(key)?.unwrap_or(default))
    }

    fn opt_f64(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Float(v)) => Ok(Some(v)),
            Some(toml::Value::Integer(v)) => Ok(Some(v as f64)),
            Some(_) => Err(ConfigError::Type { key: key.into(), expected: "a number" }),
        }
    }

    fn opt_u64(&mut self, key: &str) -> Result<Option<u64>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Integer(v)) if v >= 0 => Ok(Some(v as u64)),
            Some(_) => Err(ConfigError::Type { key: key.into(), expected: "a nonnegative integer" }),
        }
    }

    fn u64(&mut self, key: &str, default: u64) -> Result<u64, ConfigError> {
        Ok(self.opt_u64(key)?.unwrap_or(default))
    }

    fn opt_usize(&mut self, key: &str) -> Result<Option<usize>, ConfigError> {
        Ok(self.opt_u64(key)?.map(|v| v as usize))
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        Ok(self.opt_usize(key)?.unwrap_or(default))
    }

    fn positive(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        let v = self.usize(key, default)?;
        if v == 0 {
            return constraint(key, "must be at least 1");
        }
        Ok(v)
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(toml::Value::Boolean(b)) => Ok(b),
            Some(_) => Err(ConfigError::Type { key: key.into(), expected: "a boolean" }),
        }
    }

    fn opt_str(&mut self, key: &str) -> Result<Option<String>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(ConfigError::Type { key: key.into(), expected: "a string" }),
        }
    }

    fn opt_list<T>(&mut self, key: &str, expected: &'static str, f: impl Fn(&toml::Value) -> Option<T>) -> Result<Option<Vec<T>>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Array(items)) => items
                .iter()
                .map(|v| f(v).ok_or(ConfigError::Type { key: key.into(), expected }))
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
            Some(_) => Err(ConfigError::Type { key: key.into(), expected }),
        }
    }

    fn opt_usize_list(&mut self, key: &str) -> Result<Option<Vec<usize>>, ConfigError> {
        self.opt_list(key, "a list of nonnegative integers", |v| v.as_integer().filter(|&i| i >= 0).map(|i| i as usize))
    }

    fn opt_u64_list(&mut self, key: &str) -> Result<Option<Vec<u64>>, ConfigError> {
        self.opt_list(key, "a list of nonnegative integers", |v| v.as_integer().filter(|&i| i >= 0).map(|i| i as u64))
    }

    fn opt_f64_list(&mut self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        self.opt_list(key, "a list of numbers", |v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)))
    }

    fn opt_str_list(&mut self, key: &str) -> Result<Option<Vec<String>>, ConfigError> {
        self.opt_list(key, "a list of strings", |v| v.as_str().map(str::to_string))
    }
}

fn finite_nonneg(key: &str, v: f64) -> Result<f64, ConfigError> {
    if !(v.is_finite() && v >= 0.0) {
        return constraint(key, format!("must be finite and nonnegative, got {v}"));
    }
    Ok(v)
}

fn finite_pos(key: &str, v: f64) -> Result<f64, ConfigError> {
    if !(v.is_finite() && v > 0.0) {
        return constraint(key, format!("must be finite and positive, got {v}"));
    }
    Ok(v)
}

fn parse_dataset(f: &mut Fields) -> Result<DatasetConfig, ConfigError> {
    let kind = match f.opt_str("dataset.kind")?.as_deref() {
        None | Some("synthetic") => DatasetKind::Synthetic,
        Some("idx") => {
            let images = f.opt_str("dataset.images")?.ok_or_else(|| ConfigError::Missing("dataset.images".into()))?;
            let labels = f.opt_str("dataset.labels")?.ok_or_else(|| ConfigError::Missing("dataset.labels".into()))?;
            DatasetKind::Idx { images: images.into(), labels: labels.into() }
        }
        Some(other) => return constraint("dataset.kind", format!("expected \"synthetic\" or \"idx\", got {other:?}")),
    };
    let classes = f.positive("dataset.classes", 5)?;
    let dim = f.positive("dataset.dim", 20)?;
    let signal_dims = f.usize("dataset.signal_dims", dim)?;
    if signal_dims == 0 || signal_dims > dim {
        return constraint("dataset.signal_dims", format!("must lie in 1..={dim}"));
    }
    let mean_scale = finite_nonneg("dataset.mean_scale", f.f64("dataset.mean_scale", 10.0)?)?;
    let sigma = finite_pos("dataset.sigma", f.f64("dataset.sigma", 1.0)?)?;
    let per_class = f.positive("dataset.per_class", 100)?;
    let seed = f.u64("dataset.seed", 0)?;
    let test_fraction = f.f64("dataset.test_fraction", 0.2)?;
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return constraint("dataset.test_fraction", "must lie strictly between 0 and 1");
    }
    let source_classes = f.opt_usize_list("dataset.source_classes")?;
    let target_classes = f.opt_usize_list("dataset.target_classes")?;
    match (&source_classes, &target_classes) {
        (Some(s), Some(t)) => {
            if s.is_empty() || t.is_empty() {
                return constraint("dataset.source_classes", "source and target class lists must be nonempty");
            }
            if s.iter().any(|c| t.contains(c)) {
                return constraint("dataset.target_classes", "must be disjoint from dataset.source_classes");
            }
            if let DatasetKind::Synthetic = kind {
                if let Some(&bad) = s.iter().chain(t).find(|&&c| c >= classes) {
                    return constraint("dataset.source_classes", format!("class {bad} out of range for {classes} classes"));
                }
            }
        }
        (None, None) => {}
        (Some(_), None) => return Err(ConfigError::Missing("dataset.target_classes".into())),
        (None, Some(_)) => return Err(ConfigError::Missing("dataset.source_classes".into())),
    }
    Ok(DatasetConfig { kind, classes, dim, signal_dims, mean_scale, sigma, per_class, seed, test_fraction, source_classes, target_classes })
}

fn parse_network(f: &mut Fields, ds: &DatasetConfig) -> Result<NetworkConfig, ConfigError> {
    let activation = match f.opt_str("network.activation")? {
        None => Activation::Relu,
        Some(s) => s.parse().map_err(|_| ConfigError::Constraint {
            key: "network.activation".into(),
            msg: format!("expected \"relu\" or \"tanh\", got {s:?}"),
        })?,
    };
    let explicit = f.opt_usize_list("network.layer_widths")?;
    let out_classes = ds.source_classes.as_ref().map_or(ds.classes, Vec::len);
    let layer_widths = match (explicit, &ds.kind) {
        (Some(w), _) => {
            if w.len() < 3 || w.contains(&0) {
                return constraint("network.layer_widths", "needs at least 3 positive widths (input, hidden, logits)");
            }
            if let DatasetKind::Synthetic = ds.kind {
                if w[0] != ds.dim || *w.last().unwrap() != out_classes {
                    return constraint(
                        "network.layer_widths",
                        format!("must start at dataset.dim = {} and end at the class count {out_classes}", ds.dim),
                    );
                }
            }
            Some(w)
        }
        (None, DatasetKind::Synthetic) => Some(vec![ds.dim, 64, 32, out_classes]),
        (None, DatasetKind::Idx { .. }) => return Err(ConfigError::Missing("network.layer_widths".into())),
    };
    Ok(NetworkConfig { layer_widths, activation })
}

fn parse_train(f: &mut Fields) -> Result<TrainSection, ConfigError> {
    let lr = f.f64("train.lr", 0.05)?;
    if !(lr.is_finite() && lr > 0.0) {
        return constraint("train.lr", format!("must be positive and finite, got {lr}"));
    }
    let batch_size = f.positive("train.batch_size", 32)?;
    let l2 = finite_nonneg("train.l2", f.f64("train.l2", 0.0)?)?;
    let gc_reg = finite_nonneg("train.gc_reg", f.f64("train.gc_reg", 0.0)?)?;
    let steps = f.usize("train.steps", 5000)?;
    let log_every = f.usize("train.log_every", (steps / 100).max(1))?;
    if log_every == 0 || (steps > 0 && log_every > steps) {
        return constraint("train.log_every", format!("must lie in 1..=train.steps ({steps})"));
    }
    let seed = f.u64("train.seed", 0)?;
    let eval_batch = f.positive("train.eval_batch", 512)?;
    let sharpness_probes = f.positive("train.sharpness_probes", 2)?;
    Ok(TrainSection { lr, batch_size, l2, gc_reg, steps, log_every, seed, eval_batch, sharpness_probes })
}

fn parse_sweep(f: &mut Fields, train: &TrainSection) -> Result<SweepConfig, ConfigError> {
    let axis = match f.opt_str("sweep.axis")?.as_deref() {
        None => None,
        Some("lr") => Some(SweepAxis::Lr),
        Some("batch_size") => Some(SweepAxis::BatchSize),
        Some("l2") => Some(SweepAxis::L2),
        Some("gc_reg") => Some(SweepAxis::GcReg),
        Some(other) => return constraint("sweep.axis", format!("expected lr, batch_size, l2 or gc_reg, got {other:?}")),
    };
    let values = f.opt_f64_list("sweep.values")?.unwrap_or_default();
    match axis {
        Some(a) => {
            if values.is_empty() {
                return constraint("sweep.values", "must list at least one value");
            }
            for &v in &values {
                let ok = match a {
                    SweepAxis::Lr => v.is_finite() && v > 0.0,
                    SweepAxis::BatchSize => v >= 1.0 && v.fract() == 0.0 && v.is_finite(),
                    SweepAxis::L2 | SweepAxis::GcReg => v.is_finite() && v >= 0.0,
                };
                if !ok {
                    return constraint("sweep.values", format!("{v} is not a valid {} value", a.name()));
                }
            }
        }
        None if !values.is_empty() => return Err(ConfigError::Missing("sweep.axis".into())),
        None => {}
    }
    let seeds = f.opt_u64_list("sweep.seeds")?.unwrap_or_else(|| vec![train.seed]);
    if seeds.is_empty() {
        return constraint("sweep.seeds", "must list at least one seed");
    }
    let max_parallel = f.positive("sweep.max_parallel", 1)?;
    Ok(SweepConfig { axis, values, seeds, max_parallel })
}

fn parse_transfer(f: &mut Fields) -> Result<TransferConfig, ConfigError> {
    let episodes = EpisodeSpec {
        n_way: f.positive("transfer.n_way", 5)?,
        n_shot: f.positive("transfer.n_shot", 5)?,
        n_query: f.positive("transfer.n_query", 15)?,
        n_episodes: f.positive("transfer.n_episodes", 100)?,
    };
    let lambda = match f.opt_f64("transfer.lambda")? {
        Some(v) => Some(finite_nonneg("transfer.lambda", v)?),
        None => None,
    };
    let seed = f.u64("transfer.seed", 0)?;
    Ok(TransferConfig { episodes, lambda, seed })
}

fn parse_bounds(f: &mut Fields) -> Result<BoundsConfig, ConfigError> {
    let mut opt_pos = |key: &str| -> Result<Option<f64>, ConfigError> {
        match f.opt_f64(key)? {
            Some(v) => Ok(Some(finite_pos(key, v)?)),
            None => Ok(None),
        }
    };
    let c = opt_pos("bounds.c")?;
    let c_source = opt_pos("bounds.c_source")?;
    let c_target = opt_pos("bounds.c_target")?;
    let delta = f.f64("bounds.delta", 0.05)?;
    if !(delta > 0.0 && delta < 1.0) {
        return constraint("bounds.delta", "must lie strictly between 0 and 1");
    }
    let include_lipschitz = f.bool("bounds.include_lipschitz", false)?;
    let rademacher_trials = f.positive("bounds.rademacher_trials", 1000)?;
    Ok(BoundsConfig { c, c_source, c_target, delta, include_lipschitz, rademacher_trials })
}

fn parse_gc(f: &mut Fields) -> Result<GcConfig, ConfigError> {
    let subnet = match f.opt_str("gc.subnet")?.as_deref() {
        None | Some("embedding") => Subnet::Embedding,
        Some("logit") => Subnet::Logit,
        Some(other) => return constraint("gc.subnet", format!("expected \"embedding\" or \"logit\", got {other:?}")),
    };
    let modes = match f.opt_str_list("gc.modes")? {
        None => vec![SampleMode::Full, SampleMode::SampleExamples, SampleMode::SampleEntries, SampleMode::SampleOutputs],
        Some(names) => {
            if names.is_empty() {
                return constraint("gc.modes", "must list at least one mode");
            }
            names.iter().map(|n| n.parse::<SampleMode>().map_err(|msg| ConfigError::Constraint { key: "gc.modes".into(), msg })).collect::<Result<_, _>>()?
        }
    };
    let fraction = f.f64("gc.fraction", 0.25)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return constraint("gc.fraction", "must lie in (0, 1]");
    }
    let trials = f.positive("gc.trials", 20)?;
    let seed = f.u64("gc.seed", 0)?;
    Ok(GcConfig { subnet, modes, fraction, trials, seed })
}

/// Parses a config document. Every key not in the schema is an error.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    let mut map = BTreeMap::new();
    flatten("", table, &mut map);
    let mut f = Fields { map };

    let dataset = parse_dataset(&mut f)?;
    let network = parse_network(&mut f, &dataset)?;
    let train = parse_train(&mut f)?;
    let sweep = parse_sweep(&mut f, &train)?;
    let transfer = parse_transfer(&mut f)?;
    let bounds = parse_bounds(&mut f)?;
    let gc = parse_gc(&mut f)?;
    let verify = VerifyConfig { cases: f.positive("verify.cases", 20)?, seed: f.u64("verify.seed", 0)? };
    let output = OutputConfig {
        dir: f.opt_str("output.dir")?.unwrap_or_else(|| "out".into()).into(),
        run_id: f.opt_str("output.run_id")?.unwrap_or_else(|| "run".into()),
    };
    if output.run_id.is_empty() || output.run_id.contains(['/', '\\']) {
        return constraint("output.run_id", "must be a nonempty file-name fragment");
    }
    if let Some(key) = f.map.keys().next() {
        return Err(ConfigError::UnknownKey(key.clone()));
    }
    Ok(ExperimentConfig { dataset, network, train, sweep, transfer, bounds, gc, verify, output })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

/// Shortest representation that parses back to the same `f64`, always in
/// TOML float syntax.
fn toml_f64(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'E']) || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

fn list<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    format!("[{}]", items.iter().map(f).collect::<Vec<_>>().join(", "))
}

fn mode_name(m: SampleMode) -> &'static str {
    match m {
        SampleMode::Full => "full",
        SampleMode::SampleExamples => "sample_examples",
        SampleMode::SampleEntries => "sample_entries",
        SampleMode::SampleOutputs => "sample_outputs",
    }
}

impl ExperimentConfig {
    /// Every key with its resolved value, one `key = value` line each; the
    /// result parses back to an identical config.
    pub fn to_toml(&self) -> String {
        let mut o = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        let d = &self.dataset;
        match &d.kind {
            DatasetKind::Synthetic => line("dataset.kind", toml_str("synthetic")),
            DatasetKind::Idx { images, labels } => {
                line("dataset.kind", toml_str("idx"));
                line("dataset.images", toml_str(&images.to_string_lossy()));
                line("dataset.labels", toml_str(&labels.to_string_lossy()));
            }
        }
        line("dataset.classes", d.classes.to_string());
        line("dataset.dim", d.dim.to_string());
        line("dataset.signal_dims", d.signal_dims.to_string());
        line("dataset.mean_scale", toml_f64(d.mean_scale));
        line("dataset.sigma", toml_f64(d.sigma));
        line("dataset.per_class", d.per_class.to_string());
        line("dataset.seed", d.seed.to_string());
        line("dataset.test_fraction", toml_f64(d.test_fraction));
        if let (Some(s), Some(t)) = (&d.source_classes, &d.target_classes) {
            line("dataset.source_classes", list(s, usize::to_string));
            line("dataset.target_classes", list(t, usize::to_string));
        }
        if let Some(w) = &self.network.layer_widths {
            line("network.layer_widths", list(w, usize::to_string));
        }
        line("network.activation", toml_str(self.network.activation.name()));
        let t = &self.train;
        line("train.lr", toml_f64(t.lr));
        line("train.batch_size", t.batch_size.to_string());
        line("train.l2", toml_f64(t.l2));
        line("train.gc_reg", toml_f64(t.gc_reg));
        line("train.steps", t.steps.to_string());
        line("train.log_every", t.log_every.to_string());
        line("train.seed", t.seed.to_string());
        line("train.eval_batch", t.eval_batch.to_string());
        line("train.sharpness_probes", t.sharpness_probes.to_string());
        let s = &self.sweep;
        if let Some(a) = s.axis {
            line("sweep.axis", toml_str(a.name()));
            line("sweep.values", list(&s.values, |v| toml_f64(*v)));
        }
        line("sweep.seeds", list(&s.seeds, u64::to_string));
        line("sweep.max_parallel", s.max_parallel.to_string());
        let e = &self.transfer.episodes;
        line("transfer.n_way", e.n_way.to_string());
        line("transfer.n_shot", e.n_shot.to_string());
        line("transfer.n_query", e.n_query.to_string());
        line("transfer.n_episodes", e.n_episodes.to_string());
        if let Some(l) = self.transfer.lambda {
            line("transfer.lambda", toml_f64(l));
        }
        line("transfer.seed", self.transfer.seed.to_string());
        let b = &self.bounds;
        for (k, v) in [("bounds.c", b.c), ("bounds.c_source", b.c_source), ("bounds.c_target", b.c_target)] {
            if let Some(v) = v {
                line(k, toml_f64(v));
            }
        }
        line("bounds.delta", toml_f64(b.delta));
        line("bounds.include_lipschitz", b.include_lipschitz.to_string());
        line("bounds.rademacher_trials", b.rademacher_trials.to_string());
        let g = &self.gc;
        line("gc.subnet", toml_str(if g.subnet == Subnet::Logit { "logit" } else { "embedding" }));
        line("gc.modes", list(&g.modes, |m| toml_str(mode_name(*m))));
        line("gc.fraction", toml_f64(g.fraction));
        line("gc.trials", g.trials.to_string());
        line("gc.seed", g.seed.to_string());
        line("verify.cases", self.verify.cases.to_string());
        line("verify.seed", self.verify.seed.to_string());
        line("output.dir", toml_str(&self.output.dir.to_string_lossy()));
        line("output.run_id", toml_str(&self.output.run_id));
        o
    }

    /// Applies `--seed`: replaces the training seed and the sweep seed list.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.sweep.seeds = vec![seed];
    }
}
