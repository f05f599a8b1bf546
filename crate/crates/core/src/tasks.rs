//! Synthetic task streams for the three data-availability settings.
//!
//! Classes sit on a regular simplex. Each domain applies its own rotation,
//! translation and smooth feature warp, all scaled by a single shift
//! parameter. Noise draws are shared across domains, so a zero shift makes
//! every domain an exact copy.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{MiraError, Result};
use crate::numerics::Tensor;
use crate::rng::{gaussian_vec, rng_for};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Dg,
    #[default]
    Dil,
    Cil,
}

impl Setting {
    pub fn is_continual(self) -> bool {
        !matches!(self, Setting::Dg)
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dg => "dg",
            Self::Dil => "dil",
            Self::Cil => "cil",
        })
    }
}

impl FromStr for Setting {
    type Err = MiraError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dg" => Ok(Self::Dg),
            "dil" => Ok(Self::Dil),
            "cil" => Ok(Self::Cil),
            other => Err(MiraError::Config(format!("unknown setting {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub task_id: usize,
    /// `None` when the task mixes domains.
    pub domain_id: Option<usize>,
    pub label_set: BTreeSet<usize>,
}

impl TaskDataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        task_id: usize,
        domain_id: Option<usize>,
        label_set: BTreeSet<usize>,
    ) -> Result<Self> {
        if labels.is_empty() || features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(MiraError::Input(format!(
                "task {task_id}: {} labels for features {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(y) = labels.iter().find(|y| !label_set.contains(y)) {
            return Err(MiraError::Input(format!(
                "task {task_id}: label {y} outside its label set"
            )));
        }
        Ok(Self {
            features,
            labels,
            task_id,
            domain_id,
            label_set,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows `idx` as a `[|idx| × D]` tensor plus their labels.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        let x = Tensor::matrix(idx.len(), d, data).expect("non-empty batch");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    fn subset(&self, idx: &[usize], task_id: usize) -> Self {
        let (features, labels) = self.gather(idx);
        Self {
            features,
            labels,
            task_id,
            domain_id: self.domain_id,
            label_set: self.label_set.clone(),
        }
    }

    fn concat(parts: &[TaskDataset], task_id: usize, label_set: BTreeSet<usize>) -> Result<Self> {
        let d = parts[0].input_dim();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            data.extend_from_slice(p.features.data());
            labels.extend_from_slice(&p.labels);
        }
        if labels.is_empty() {
            return Err(MiraError::Config(format!("task {task_id} would be empty")));
        }
        let features = Tensor::matrix(labels.len(), d, data)?;
        let domains: BTreeSet<_> = parts.iter().map(|p| p.domain_id).collect();
        let domain_id = if domains.len() == 1 {
            parts[0].domain_id
        } else {
            None
        };
        Self::new(features, labels, task_id, domain_id, label_set)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    pub samples_per_class: usize,
    pub domain_shift: f64,
    pub input_dim: usize,
    pub noise: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            num_domains: 4,
            samples_per_class: 200,
            domain_shift: 3.0,
            input_dim: 16,
            noise: 0.3,
        }
    }
}

/// One dataset per domain, all sharing the label set `0..num_classes`.
pub fn make_domain_blobs(spec: &BlobSpec, seed: u64) -> Result<Vec<TaskDataset>> {
    let (c, dom, n, d) = (
        spec.num_classes,
        spec.num_domains,
        spec.samples_per_class,
        spec.input_dim,
    );
    if dom < 2 || c < 2 || n == 0 || d == 0 {
        return Err(MiraError::Config(format!(
            "blob spec needs ≥ 2 domains, ≥ 2 classes and positive sizes, got {spec:?}"
        )));
    }
    if !(spec.domain_shift >= 0.0 && spec.noise >= 0.0) {
        return Err(MiraError::Config(
            "domain shift and noise must be non-negative".into(),
        ));
    }

    let means = class_means(c, d, seed);
    let mut noise_rng = rng_for(seed, "blob-noise", &[]);
    let noise: Vec<Vec<f64>> = (0..c * n)
        .map(|_| gaussian_vec(&mut noise_rng, d, spec.noise))
        .collect();
    let labels: Vec<usize> = (0..c).flat_map(|k| std::iter::repeat_n(k, n)).collect();
    let label_set: BTreeSet<usize> = (0..c).collect();

    (0..dom)
        .map(|di| {
            let t = DomainTransform::sample(d, spec.domain_shift, seed, di);
            let mut data = Vec::with_capacity(c * n * d);
            for (i, z) in noise.iter().enumerate() {
                let mu = &means[i / n];
                let x: Vec<f64> = mu.iter().zip(z).map(|(m, e)| m + e).collect();
                data.extend(t.apply(&x));
            }
            let features = Tensor::matrix(c * n, d, data)?;
            TaskDataset::new(features, labels.clone(), di, Some(di), label_set.clone())
        })
        .collect()
}

/// Unit-radius simplex vertices, randomly rotated into `R^d`.
fn class_means(c: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, "class-means", &[]);
    if c > d {
        return (0..c)
            .map(|_| {
                let v = gaussian_vec(&mut rng, d, 1.0);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
    }
    let rot = DMatrix::from_vec(d, d, gaussian_vec(&mut rng, d * d, 1.0))
        .qr()
        .q();
    let centroid = 1.0 / c as f64;
    let radius = ((1.0 - centroid).powi(2) + (c - 1) as f64 * centroid * centroid).sqrt();
    (0..c)
        .map(|k| {
            let mut v = nalgebra::DVector::<f64>::zeros(d);
            for j in 0..c {
                v[j] = (if j == k { 1.0 } else { 0.0 } - centroid) / radius;
            }
            (&rot * v).iter().copied().collect()
        })
        .collect()
}

struct DomainTransform {
    rotation: DMatrix<f64>,
    translation: Vec<f64>,
    warp: Vec<f64>,
}

impl DomainTransform {
    fn sample(d: usize, shift: f64, seed: u64, domain: usize) -> Self {
        let mut rng = rng_for(seed, "domain", &[domain as u64]);
        let raw = gaussian_vec(&mut rng, d * d, 1.0 / (d as f64).sqrt());
        let skew = DMatrix::from_fn(d, d, |r, c| shift * (raw[r * d + c] - raw[c * d + r]) / 2.0);
        let eye = DMatrix::<f64>::identity(d, d);
        // Cayley transform of a skew matrix is orthogonal; I − A is always invertible.
        let rotation = (&eye - &skew)
            .try_inverse()
            .expect("I − A is invertible for skew A")
            * (&eye + &skew);
        let dir = gaussian_vec(&mut rng, d, 1.0);
        let norm = dir
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        let translation = dir.iter().map(|v| shift * v / norm).collect();
        let warp = gaussian_vec(&mut rng, d, 0.5)
            .into_iter()
            .map(|v| shift * v)
            .collect();
        Self {
            rotation,
            translation,
            warp,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let y: Vec<f64> = (0..d)
            .map(|r| {
                (0..d).map(|c| self.rotation[(r, c)] * x[c]).sum::<f64>() + self.translation[r]
            })
            .collect();
        (0..d)
            .map(|i| y[i] + self.warp[i] * y[(i + 1) % d].tanh())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    /// Fraction of each class held out as the test split of CL tasks.
    pub test_fraction: f64,
    pub cil_tasks: usize,
    /// Held-out domain for DG.
    pub holdout: usize,
    /// Use only the first `n` domains as tasks; all when `None`.
    pub num_tasks: Option<usize>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 0.25,
            cil_tasks: 4,
            holdout: 3,
            num_tasks: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub setting: Setting,
    pub tasks: Vec<TaskDataset>,
    /// One test split per task for CL; a single held-out domain for DG.
    pub tests: Vec<TaskDataset>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.tasks
            .iter()
            .chain(&self.tests)
            .flat_map(|t| t.label_set.iter())
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Checks the sharing, disjointness and holdout rules of the setting.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(MiraError::Config("stream has no tasks".into()));
        }
        let d = self.input_dim();
        if self
            .tasks
            .iter()
            .chain(&self.tests)
            .any(|t| t.input_dim() != d || t.is_empty())
        {
            return Err(MiraError::Config(
                "tasks disagree on input dimension or are empty".into(),
            ));
        }
        match self.setting {
            Setting::Dil => {
                let first = &self.tasks[0].label_set;
                if self.tasks.iter().any(|t| &t.label_set != first) {
                    return Err(MiraError::Config(
                        "DIL tasks must share one label set".into(),
                    ));
                }
            }
            Setting::Cil => {
                let mut seen = BTreeSet::new();
                for t in &self.tasks {
                    if !t.label_set.is_disjoint(&seen) {
                        return Err(MiraError::Config("CIL label sets must be disjoint".into()));
                    }
                    seen.extend(t.label_set.iter().copied());
                }
            }
            Setting::Dg => {
                if self.tests.len() != 1 {
                    return Err(MiraError::Config(
                        "DG needs exactly one held-out test set".into(),
                    ));
                }
                let held = self.tests[0].domain_id;
                if held.is_none() || self.tasks.iter().any(|t| t.domain_id == held) {
                    return Err(MiraError::Config(
                        "DG held-out domain appears in training".into(),
                    ));
                }
            }
        }
        if self.setting.is_continual() && self.tests.len() != self.tasks.len() {
            return Err(MiraError::Config(
                "CL streams need one test split per task".into(),
            ));
        }
        Ok(())
    }
}

/// Splits each class of `data` into train and test parts.
fn split_by_class(data: &TaskDataset, test_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for &c in &data.label_set {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        let n_test = ((idx.len() as f64) * test_fraction).round() as usize;
        let n_test = n_test.min(idx.len().saturating_sub(1));
        let cut = idx.len() - n_test;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    (train, test)
}

fn shuffled(mut idx: Vec<usize>, seed: u64, purpose: &str, task: usize) -> Vec<usize> {
    idx.shuffle(&mut rng_for(seed, purpose, &[task as u64]));
    idx
}

pub fn build_stream(
    setting: Setting,
    domains: &[TaskDataset],
    split: &SplitSpec,
    seed: u64,
) -> Result<TaskStream> {
    if domains.is_empty() {
        return Err(MiraError::Config("no domains".into()));
    }
    if !(0.0..1.0).contains(&split.test_fraction) {
        return Err(MiraError::Config("test fraction must lie in [0, 1)".into()));
    }
    let mut tasks = Vec::new();
    let mut tests = Vec::new();
    match setting {
        Setting::Dil => {
            let count = split.num_tasks.unwrap_or(domains.len()).min(domains.len());
            for (t, dom) in domains.iter().take(count).enumerate() {
                let (tr, te) = split_by_class(dom, split.test_fraction);
                if te.is_empty() {
                    return Err(MiraError::Config(format!("domain {t} too small to split")));
                }
                tasks.push(dom.subset(&shuffled(tr, seed, "order", t), t));
                tests.push(dom.subset(&te, t));
            }
        }
        Setting::Cil => {
            let classes: BTreeSet<usize> = domains
                .iter()
                .flat_map(|d| d.label_set.iter().copied())
                .collect();
            let classes: Vec<usize> = classes.into_iter().collect();
            let groups = split.cil_tasks;
            if groups == 0 || classes.len() < groups {
                return Err(MiraError::Config(format!(
                    "{} classes cannot form {groups} class-incremental tasks",
                    classes.len()
                )));
            }
            let (base, extra) = (classes.len() / groups, classes.len() % groups);
            let mut start = 0;
            for t in 0..groups {
                let size = base + usize::from(t < extra);
                let group: BTreeSet<usize> = classes[start..start + size].iter().copied().collect();
                start += size;
                let mut train_parts = Vec::new();
                let mut test_parts = Vec::new();
                for dom in domains {
                    let keep: Vec<usize> = (0..dom.len())
                        .filter(|&i| group.contains(&dom.labels[i]))
                        .collect();
                    if keep.is_empty() {
                        continue;
                    }
                    let mut part = dom.subset(&keep, t);
                    part.label_set = group.clone();
                    let (tr, te) = split_by_class(&part, split.test_fraction);
                    train_parts.push(part.subset(&tr, t));
                    if !te.is_empty() {
                        test_parts.push(part.subset(&te, t));
                    }
                }
                if test_parts.is_empty() {
                    return Err(MiraError::Config(format!(
                        "CIL task {t} has no test samples"
                    )));
                }
                let train = TaskDataset::concat(&train_parts, t, group.clone())?;
                let order = shuffled((0..train.len()).collect(), seed, "order", t);
                tasks.push(train.subset(&order, t));
                tests.push(TaskDataset::concat(&test_parts, t, group)?);
            }
        }
        Setting::Dg => {
            let holdout = split.holdout;
            let held = domains
                .iter()
                .find(|d| d.domain_id == Some(holdout))
                .ok_or_else(|| {
                    MiraError::Config(format!("held-out domain {holdout} not present"))
                })?;
            for dom in domains.iter().filter(|d| d.domain_id != Some(holdout)) {
                let t = tasks.len();
                let order = shuffled((0..dom.len()).collect(), seed, "order", t);
                tasks.push(dom.subset(&order, t));
            }
            if tasks.is_empty() {
                return Err(MiraError::Config(
                    "DG needs at least one source domain".into(),
                ));
            }
            let mut test = held.clone();
            test.task_id = tasks.len();
            tests.push(test);
        }
    }
    let stream = TaskStream {
        setting,
        tasks,
        tests,
    };
    stream.validate()?;
    Ok(stream)
}

/// Reads domains from a CSV with header `f0..f{D−1},label,domain`.
pub fn read_domains_csv(path: &Path) -> Result<Vec<TaskDataset>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let n = headers.len();
    let well_formed = n >= 3
        && headers.get(n - 2) == Some("label")
        && headers.get(n - 1) == Some("domain")
        && headers
            .iter()
            .take(n - 2)
            .enumerate()
            .all(|(i, h)| h == format!("f{i}"));
    if !well_formed {
        return Err(MiraError::Input(format!(
            "{}: header must be f0..f{{D-1}},label,domain",
            path.display()
        )));
    }
    let d = n - 2;
    let mut rows: std::collections::BTreeMap<usize, (Vec<f64>, Vec<usize>)> = Default::default();
    let mut classes = BTreeSet::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse_err = |what: &str| {
            MiraError::Input(format!("{}: row {}: bad {what}", path.display(), line + 2))
        };
        let feats = (0..d)
            .map(|i| {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err("feature"))
            })
            .collect::<Result<Vec<f64>>>()?;
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("feature"));
        }
        let label: usize = rec[d].trim().parse().map_err(|_| parse_err("label"))?;
        let domain: usize = rec[d + 1].trim().parse().map_err(|_| parse_err("domain"))?;
        let entry = rows.entry(domain).or_default();
        entry.0.extend(feats);
        entry.1.push(label);
        classes.insert(label);
    }
    if rows.is_empty() {
        return Err(MiraError::Input(format!("{}: no rows", path.display())));
    }
    rows.into_iter()
        .map(|(dom, (data, labels))| {
            let features = Tensor::matrix(labels.len(), d, data)?;
            TaskDataset::new(features, labels, dom, Some(dom), classes.clone())
        })
        .collect()
}

pub fn write_domains_csv(path: &Path, domains: &[TaskDataset]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = domains.first().map_or(0, TaskDataset::input_dim);
    let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    header.push("domain".into());
    w.write_record(&header)?;
    for dom in domains {
        let id = dom.domain_id.unwrap_or(dom.task_id);
        for i in 0..dom.len() {
            let mut rec: Vec<String> = dom.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(dom.labels[i].to_string());
            rec.push(id.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
