//! Balanced labeled datasets: Gaussian-mixture synthesis, IDX ingestion,
//! class and train/test splits, and few-shot episode sampling.

use std::io::Read;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Inputs `x` (`m × d`), labels in `[0, k)`, every class equally represented.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    x: Array2<f64>,
    y: Vec<usize>,
    k: usize,
}

impl LabeledDataset {
    pub fn new(x: Array2<f64>, y: Vec<usize>, k: usize) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", x.nrows(), y.len())));
        }
        if k == 0 {
            return contract("class count must be positive");
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= k) {
            return contract(format!("label {bad} out of range for {k} classes"));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return contract("dataset contains non-finite inputs");
        }
        let counts = class_counts(&y, k);
        if counts.iter().any(|&c| c != counts[0]) {
            return contract(format!("dataset is not balanced: per-class counts {counts:?}"));
        }
        Ok(Self { x, y, k })
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn per_class(&self) -> usize {
        self.len() / self.k
    }

    /// Row indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &c) in self.y.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    /// Rows `idx` with labels remapped through `relabel`; not balance-checked.
    pub(crate) fn gather(&self, idx: &[usize], relabel: impl Fn(usize) -> usize) -> (Array2<f64>, Vec<usize>) {
        (self.x.select(Axis(0), idx), idx.iter().map(|&i| relabel(self.y[i])).collect())
    }

    /// Subset of rows keeping the original labels; must stay balanced.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let (x, y) = self.gather(idx, |c| c);
        Self::new(x, y, self.k)
    }
}

pub(crate) fn class_counts(y: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for &c in y {
        counts[c] += 1;
    }
    counts
}

/// `k` isotropic Gaussian classes in `ℝ^d` whose means lie uniformly on the
/// sphere of radius `mean_scale`. Rows are grouped by class. The means are
/// drawn first, so datasets with the same seed share the same mixture
/// regardless of `m_per_class`.
pub fn gen_gaussian_mixture(
    k: usize,
    d: usize,
    mean_scale: f64,
    sigma: f64,
    m_per_class: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    gen_subspace_mixture(k, d, d, mean_scale, sigma, m_per_class, seed)
}

/// Like [`gen_gaussian_mixture`], but every class mean lies in the span of
/// the first `signal_dims` coordinates; the noise stays isotropic in all `d`.
/// With `signal_dims == d` the two generators coincide.
pub fn gen_subspace_mixture(
    k: usize,
    d: usize,
    signal_dims: usize,
    mean_scale: f64,
    sigma: f64,
    m_per_class: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if k == 0 || d == 0 || m_per_class == 0 {
        return contract("k, d and m_per_class must be at least 1");
    }
    if signal_dims == 0 || signal_dims > d {
        return contract(format!("signal_dims {signal_dims} must lie in 1..={d}"));
    }
    if !(sigma > 0.0) || !mean_scale.is_finite() {
        return contract(format!("sigma must be positive and mean_scale finite (sigma={sigma}, mean_scale={mean_scale})"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Array2::<f64>::zeros((k, d));
    for mut full in means.outer_iter_mut() {
        let mut row = full.slice_mut(s![..signal_dims]);
        loop {
            row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row *= mean_scale / norm;
                break;
            }
        }
    }
    let m = k * m_per_class;
    let mut x = Array2::<f64>::zeros((m, d));
    let mut y = Vec::with_capacity(m);
    for c in 0..k {
        for i in 0..m_per_class {
            let mut row = x.row_mut(c * m_per_class + i);
            for (v, mu) in row.iter_mut().zip(means.row(c)) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = mu + sigma * z;
            }
            y.push(c);
        }
    }
    LabeledDataset::new(x, y, k)
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// What balancing removed from an IDX file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrimReport {
    /// Original label values, index = dense class id.
    pub label_values: Vec<u8>,
    pub original_counts: Vec<usize>,
    pub kept_per_class: usize,
    pub dropped: usize,
}

fn read_u32(buf: &[u8], at: usize, what: &str) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX image/label pair.
///
/// Pixels are scaled to `[0, 1]` and images flattened row-major. Label values
/// are re-indexed densely in increasing order. If classes are imbalanced,
/// every class keeps its first `min_count` examples in file order.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<(LabeledDataset, TrimReport)> {
    let img_magic = read_u32(images, 0, "images")?;
    if img_magic != IMAGE_MAGIC {
        return Err(Error::Format(format!("image file magic {img_magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let lbl_magic = read_u32(labels, 0, "labels")?;
    if lbl_magic != LABEL_MAGIC {
        return Err(Error::Format(format!("label file magic {lbl_magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let n = read_u32(images, 4, "images")? as usize;
    let rows = read_u32(images, 8, "images")? as usize;
    let cols = read_u32(images, 12, "images")? as usize;
    let n_labels = read_u32(labels, 4, "labels")? as usize;
    if n != n_labels {
        return Err(Error::Format(format!("{n} images but {n_labels} labels")));
    }
    let d = rows * cols;
    let pixels = &images[16..];
    if pixels.len() != n * d {
        return Err(Error::Format(format!("image payload has {} bytes, header implies {}", pixels.len(), n * d)));
    }
    let raw_labels = &labels[8..];
    if raw_labels.len() != n {
        return Err(Error::Format(format!("label payload has {} bytes, header implies {n}", raw_labels.len())));
    }
    if n == 0 {
        return Err(Error::Format("IDX files contain no examples".into()));
    }

    let mut label_values: Vec<u8> = raw_labels.to_vec();
    label_values.sort_unstable();
    label_values.dedup();
    let dense = |v: u8| label_values.binary_search(&v).unwrap();
    let k = label_values.len();
    let y_all: Vec<usize> = raw_labels.iter().map(|&v| dense(v)).collect();
    let original_counts = class_counts(&y_all, k);
    let keep = *original_counts.iter().min().unwrap();

    let mut taken = vec![0usize; k];
    let mut idx = Vec::with_capacity(keep * k);
    for (i, &c) in y_all.iter().enumerate() {
        if taken[c] < keep {
            taken[c] += 1;
            idx.push(i);
        }
    }
    let mut x = Array2::<f64>::zeros((idx.len(), d));
    for (r, &i) in idx.iter().enumerate() {
        for (v, &p) in x.row_mut(r).iter_mut().zip(&pixels[i * d..(i + 1) * d]) {
            *v = p as f64 / 255.0;
        }
    }
    let y = idx.iter().map(|&i| y_all[i]).collect();
    let report = TrimReport { label_values, original_counts, kept_per_class: keep, dropped: n - idx.len() };
    Ok((LabeledDataset::new(x, y, k)?, report))
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(LabeledDataset, TrimReport)> {
    let read = |p: &Path| -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        std::fs::File::open(p)?.read_to_end(&mut buf)?;
        Ok(buf)
    };
    parse_idx(&read(images_path)?, &read(labels_path)?)
}

/// Disjoint source and target class ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

fn restrict_classes(ds: &LabeledDataset, classes: &[usize]) -> Result<LabeledDataset> {
    let mut map = vec![usize::MAX; ds.k];
    for (new, &old) in classes.iter().enumerate() {
        map[old] = new;
    }
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| map[ds.y[i]] != usize::MAX).collect();
    let (x, y) = ds.gather(&idx, |c| map[c]);
    LabeledDataset::new(x, y, classes.len())
}

/// Splits classes into source and target datasets, each re-indexed densely
/// from 0 in the order the ids are listed.
pub fn split_classes(ds: &LabeledDataset, split: &ClassSplit) -> Result<(LabeledDataset, LabeledDataset)> {
    if split.source.is_empty() || split.target.is_empty() {
        return contract("source and target class lists must both be nonempty");
    }
    let mut seen = vec![false; ds.k];
    for &c in split.source.iter().chain(&split.target) {
        if c >= ds.k {
            return contract(format!("class id {c} out of range for {} classes", ds.k));
        }
        if seen[c] {
            return contract(format!("class id {c} listed twice (source and target must be disjoint)"));
        }
        seen[c] = true;
    }
    Ok((restrict_classes(ds, &split.source)?, restrict_classes(ds, &split.target)?))
}

/// Per-class random split into `(train, test)` with `round(test_fraction · m_c)`
/// test examples per class. Row order within each side follows the dataset.
pub fn stratified_split(ds: &LabeledDataset, test_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return contract(format!("test_fraction must lie in (0, 1), got {test_fraction}"));
    }
    let m_c = ds.per_class();
    let n_test = (test_fraction * m_c as f64).round() as usize;
    if n_test == 0 || n_test >= m_c {
        return contract(format!("test_fraction {test_fraction} leaves {n_test} of {m_c} examples per class for testing"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; ds.len()];
    for members in ds.class_indices() {
        for j in index::sample(&mut rng, m_c, n_test) {
            is_test[members[j]] = true;
        }
    }
    let (test_idx, train_idx): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| is_test[i]);
    Ok((ds.subset(&train_idx)?, ds.subset(&test_idx)?))
}

/// Shape of a few-shot task: `n_way` classes with `n_shot` support and
/// `n_query` query examples each, repeated `n_episodes` times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub n_shot: usize,
    pub n_query: usize,
    pub n_episodes: usize,
}

impl EpisodeSpec {
    pub fn validate_for(&self, target: &LabeledDataset) -> Result<()> {
        if self.n_way == 0 || self.n_shot == 0 || self.n_query == 0 || self.n_episodes == 0 {
            return contract(format!("episode spec fields must be positive: {self:?}"));
        }
        if self.n_way > target.k {
            return contract(format!("n_way = {} exceeds the {} target classes", self.n_way, target.k));
        }
        if self.n_shot + self.n_query > target.per_class() {
            return contract(format!(
                "episodes need {} examples per class, target has {}",
                self.n_shot + self.n_query,
                target.per_class()
            ));
        }
        Ok(())
    }
}

/// Row indices chosen for one episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeIndices {
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

pub fn sample_episode_indices<R: Rng + ?Sized>(target: &LabeledDataset, spec: &EpisodeSpec, rng: &mut R) -> Result<EpisodeIndices> {
    spec.validate_for(target)?;
    let members = target.class_indices();
    let mut classes = index::sample(rng, target.k, spec.n_way).into_vec();
    classes.sort_unstable();
    let mut support = Vec::with_capacity(spec.n_way * spec.n_shot);
    let mut query = Vec::with_capacity(spec.n_way * spec.n_query);
    for &c in &classes {
        let mut pick = index::sample(rng, members[c].len(), spec.n_shot + spec.n_query).into_vec();
        pick.shuffle(rng);
        support.extend(pick[..spec.n_shot].iter().map(|&j| members[c][j]));
        query.extend(pick[spec.n_shot..].iter().map(|&j| members[c][j]));
    }
    Ok(EpisodeIndices { classes, support, query })
}

/// Draws an `n_way` episode; labels are re-indexed `0..n_way` in increasing
/// original-class order.
pub fn sample_episode<R: Rng + ?Sized>(
    target: &LabeledDataset,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let ep = sample_episode_indices(target, spec, rng)?;
    episode_datasets(target, &ep)
}

pub fn episode_datasets(target: &LabeledDataset, ep: &EpisodeIndices) -> Result<(LabeledDataset, LabeledDataset)> {
    let relabel = |c: usize| ep.classes.binary_search(&c).expect("episode class");
    let (sx, sy) = target.gather(&ep.support, relabel);
    let (qx, qy) = target.gather(&ep.query, relabel);
    Ok((LabeledDataset::new(sx, sy, ep.classes.len())?, LabeledDataset::new(qx, qy, ep.classes.len())?))
}
