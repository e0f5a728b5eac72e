//! Datasets: CSV ingestion, stratified splits, OOD protocols, standardization
//! and synthetic Gaussian blobs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Per-feature affine map `x -> (x - mean) / std`. Under min-max scaling
/// `mean` holds the training minimum and `std` the training range.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x d`, row-major.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub feature_names: Vec<String>,
    /// Columns removed at load time because they were constant.
    pub dropped_features: Vec<String>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} rows but {} labels", features.rows(), labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= class_names.len()) {
            return Err(Error::Index(format!(
                "label {bad} with only {} classes",
                class_names.len()
            )));
        }
        let feature_names = (0..features.cols()).map(|j| format!("x{j}")).collect();
        Ok(Self {
            features,
            labels,
            class_names,
            feature_names,
            dropped_features: Vec::new(),
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row_slice(i)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            feature_names: self.feature_names.clone(),
            dropped_features: self.dropped_features.clone(),
            standardization: self.standardization.clone(),
        }
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names
            .iter()
            .position(|c| c.eq_ignore_ascii_case(name.trim()))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set("content", "dataset");
        c.set("class_names", self.class_names.join("\t"));
        c.set("feature_names", self.feature_names.join("\t"));
        c.set("dropped_features", self.dropped_features.join("\t"));
        c.push("features", self.features.clone());
        c.push(
            "labels",
            Tensor::column(self.labels.iter().map(|&y| y as f64).collect()),
        );
        if let Some(s) = &self.standardization {
            c.push("std_mean", Tensor::row(s.mean.clone()));
            c.push("std_scale", Tensor::row(s.std.clone()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.get("content")? != "dataset" {
            return Err(Error::Format {
                path: Default::default(),
                msg: "container does not hold a dataset".into(),
            });
        }
        let split = |key: &str| -> Result<Vec<String>> {
            let v = c.get(key)?;
            Ok(if v.is_empty() {
                Vec::new()
            } else {
                v.split('\t').map(str::to_string).collect()
            })
        };
        let labels = c
            .array("labels")?
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect();
        let mut ds = Dataset::new(c.array("features")?.clone(), labels, split("class_names")?)?;
        ds.feature_names = split("feature_names")?;
        ds.dropped_features = split("dropped_features")?;
        if let (Ok(m), Ok(s)) = (c.array("std_mean"), c.array("std_scale")) {
            ds.standardization = Some(Standardization {
                mean: m.data().to_vec(),
                std: s.data().to_vec(),
            });
        }
        Ok(ds)
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

/// Parse delimiter-separated numeric text. Lines starting with `#` are
/// skipped. A header row is detected when the first line has a non-numeric
/// feature field. `delimiter = ' '` splits on
/// any run of whitespace.
///
/// Class names are sorted (numerically when all parse as integers) and
/// constant columns are dropped and listed in `dropped_features`.
pub fn load_csv(path: &Path, label_column: &LabelColumn, delimiter: char) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, label_column, delimiter)
}

pub fn parse_csv(text: &str, label_column: &LabelColumn, delimiter: char) -> Result<Dataset> {
    let split = |line: &str| -> Vec<String> {
        if delimiter == ' ' {
            line.split_whitespace().map(str::to_string).collect()
        } else {
            line.split(delimiter).map(|f| f.trim().to_string()).collect()
        }
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .peekable();
    let Some(&(first_no, first)) = lines.peek() else {
        return Err(Error::Parse {
            line: 1,
            msg: "empty file".into(),
        });
    };
    let first_fields = split(first);
    let width = first_fields.len();
    let label_idx = match label_column {
        LabelColumn::Index(i) => *i,
        LabelColumn::Name(name) => first_fields
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| Error::Parse {
                line: first_no + 1,
                msg: format!("no column named {name:?}"),
            })?,
    };
    if label_idx >= width {
        return Err(Error::Parse {
            line: first_no + 1,
            msg: format!("label column {label_idx} but only {width} fields"),
        });
    }
    let has_header = matches!(label_column, LabelColumn::Name(_))
        || first_fields
            .iter()
            .enumerate()
            .any(|(j, f)| j != label_idx && f.parse::<f64>().is_err());
    let mut header: Vec<String> = if has_header {
        lines.next();
        first_fields
    } else {
        (0..width).map(|j| format!("x{j}")).collect()
    };
    header.remove(label_idx);

    let mut rows: Vec<f64> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    for (no, line) in lines {
        let fields = split(line);
        if fields.len() != width {
            return Err(Error::Parse {
                line: no + 1,
                msg: format!("expected {width} fields, found {}", fields.len()),
            });
        }
        for (j, f) in fields.iter().enumerate() {
            if j == label_idx {
                raw_labels.push(f.clone());
            } else {
                let v: f64 = f.parse().map_err(|_| Error::Parse {
                    line: no + 1,
                    msg: format!("non-numeric field {f:?} in column {j}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: no + 1,
                        msg: format!("non-finite field {f:?} in column {j}"),
                    });
                }
                rows.push(v);
            }
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::Parse {
            line: first_no + 1,
            msg: "no data rows".into(),
        });
    }
    let n = raw_labels.len();
    let d = width - 1;

    let mut names: Vec<String> = raw_labels.clone();
    names.sort();
    names.dedup();
    if names.iter().all(|s| s.parse::<i64>().is_ok()) {
        names.sort_by_key(|s| s.parse::<i64>().expect("checked"));
    }
    let lookup: BTreeMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let labels: Vec<usize> = raw_labels.iter().map(|s| lookup[s.as_str()]).collect();

    let keep: Vec<usize> = (0..d)
        .filter(|&j| {
            let v0 = rows[j];
            (0..n).any(|i| rows[i * d + j] != v0)
        })
        .collect();
    let dropped = (0..d)
        .filter(|j| !keep.contains(j))
        .map(|j| header[j].clone())
        .collect();
    let mut data = Vec::with_capacity(n * keep.len());
    for i in 0..n {
        data.extend(keep.iter().map(|&j| rows[i * d + j]));
    }
    let features = Tensor::new(n, keep.len(), data)?;
    let mut ds = Dataset::new(features, labels, names)?;
    ds.feature_names = keep.iter().map(|&j| header[j].clone()).collect();
    ds.dropped_features = dropped;
    Ok(ds)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Classes too small to appear in every split.
    pub warnings: Vec<String>,
}

/// Stratified split: within each class `round(f_train n_c)` rows go to train,
/// `round(f_val n_c)` to validation, the rest to test. Rows keep their
/// original relative order.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain("split", format!("fractions {fractions:?} must sum to 1")));
    }
    let mut rng = RngStream::new(seed, 0x5917);
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut warnings = Vec::new();
    for c in 0..ds.num_classes() {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 3 {
            warnings.push(format!(
                "class {} has {} members; stratification is best-effort",
                ds.class_names[c],
                idx.len()
            ));
        }
        rng.shuffle(&mut idx);
        let n = idx.len() as f64;
        let n_train = ((fractions[0] * n).round() as usize).min(idx.len());
        let n_val = ((fractions[1] * n).round() as usize).min(idx.len() - n_train);
        parts[0].extend_from_slice(&idx[..n_train]);
        parts[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(Splits {
        train: ds.subset(&parts[0]),
        val: ds.subset(&parts[1]),
        test: ds.subset(&parts[2]),
        warnings,
    })
}

/// Class names held out of the in-distribution label space.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodProtocol {
    /// OOD examples PriorNet sees during training.
    #[serde(default)]
    pub ood_train_classes: Vec<String>,
    /// OOD examples used for evaluation.
    #[serde(default)]
    pub ood_test_classes: Vec<String>,
}

impl OodProtocol {
    pub fn segment() -> Self {
        Self {
            ood_train_classes: vec!["window".into()],
            ood_test_classes: vec!["sky".into()],
        }
    }

    pub fn sensorless() -> Self {
        Self {
            ood_train_classes: vec!["9".into()],
            ood_test_classes: vec!["10".into(), "11".into()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct OodSplit {
    pub id: Dataset,
    pub ood_train: Dataset,
    pub ood_test: Dataset,
    /// `id_to_original[new] = old` class index.
    pub id_to_original: Vec<usize>,
}

impl OodSplit {
    pub fn original_label(&self, id_label: usize) -> usize {
        self.id_to_original[id_label]
    }
}

pub fn apply_ood_protocol(ds: &Dataset, protocol: &OodProtocol) -> Result<OodSplit> {
    let resolve = |names: &[String]| -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                ds.class_index(n)
                    .ok_or_else(|| Error::Contract(format!("protocol class {n:?} not in dataset")))
            })
            .collect()
    };
    let tr = resolve(&protocol.ood_train_classes)?;
    let te = resolve(&protocol.ood_test_classes)?;
    if tr.iter().any(|c| te.contains(c)) {
        return Err(Error::Contract("ood_train and ood_test classes overlap".into()));
    }
    let id_to_original: Vec<usize> = (0..ds.num_classes())
        .filter(|c| !tr.contains(c) && !te.contains(c))
        .collect();
    if id_to_original.len() < 2 {
        return Err(Error::Contract("fewer than two in-distribution classes".into()));
    }
    let mut new_label = vec![usize::MAX; ds.num_classes()];
    for (new, &old) in id_to_original.iter().enumerate() {
        new_label[old] = new;
    }
    let take = |classes: &[usize], relabel: &dyn Fn(usize) -> usize, names: Vec<String>| {
        let idx: Vec<usize> = (0..ds.len())
            .filter(|&i| classes.contains(&ds.labels[i]))
            .collect();
        let mut sub = ds.subset(&idx);
        sub.labels = sub.labels.iter().map(|&y| relabel(y)).collect();
        sub.class_names = names;
        sub
    };
    let names_of = |cs: &[usize]| cs.iter().map(|&c| ds.class_names[c].clone()).collect::<Vec<_>>();
    let id = take(&id_to_original, &|y| new_label[y], names_of(&id_to_original));
    let ood_train = take(&tr, &|y| tr.iter().position(|&c| c == y).expect("member"), names_of(&tr));
    let ood_test = take(&te, &|y| te.iter().position(|&c| c == y).expect("member"), names_of(&te));
    Ok(OodSplit {
        id,
        ood_train,
        ood_test,
        id_to_original,
    })
}

/// How `Standardization::fit_with` maps training features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Zero mean, unit population standard deviation.
    #[default]
    ZScore,
    /// Training range onto `[0, 1]`.
    MinMax,
}

impl Standardization {
    pub fn fit_with(train: &Dataset, scaling: Scaling) -> Result<Self> {
        match scaling {
            Scaling::ZScore => Self::fit(train),
            Scaling::MinMax => {
                if train.is_empty() {
                    return Err(Error::Contract("cannot standardize on an empty training set".into()));
                }
                let d = train.dim();
                let (mut lo, mut hi) = (vec![f64::INFINITY; d], vec![f64::NEG_INFINITY; d]);
                for i in 0..train.len() {
                    for (j, v) in train.row(i).iter().enumerate() {
                        lo[j] = lo[j].min(*v);
                        hi[j] = hi[j].max(*v);
                    }
                }
                let std = lo.iter().zip(&hi).map(|(a, b)| if b > a { b - a } else { 1.0 }).collect();
                Ok(Self { mean: lo, std })
            }
        }
    }

    /// Population mean and standard deviation per feature. Features constant
    /// on `train` get scale 1.
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Contract("cannot standardize on an empty training set".into()));
        }
        let (n, d) = (train.len(), train.dim());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(train.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    /// Applying the statistics a dataset already carries is a no-op.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.standardization.as_ref() == Some(self) {
            return Ok(ds.clone());
        }
        if ds.dim() != self.mean.len() {
            return Err(Error::shape(
                "standardize",
                format!("{} features, statistics for {}", ds.dim(), self.mean.len()),
            ));
        }
        let d = ds.dim();
        let mut out = ds.clone();
        for (k, v) in out.features.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        out.standardization = Some(self.clone());
        Ok(out)
    }
}

/// Fit z-scores on `train`, apply to `train` and every set in `others`.
pub fn standardize(train: &Dataset, others: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>)> {
    standardize_with(train, others, Scaling::ZScore)
}

pub fn standardize_with(train: &Dataset, others: &[&Dataset], scaling: Scaling) -> Result<(Dataset, Vec<Dataset>)> {
    let stats = Standardization::fit_with(train, scaling)?;
    let t = stats.apply(train)?;
    let rest = others.iter().map(|d| stats.apply(d)).collect::<Result<_>>()?;
    Ok((t, rest))
}

/// Standardized experiment sets. `ood_train` and `ood_test` are empty when
/// no protocol applies.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub ood_train: Dataset,
    pub ood_test: Dataset,
    pub warnings: Vec<String>,
}

/// Holds out the protocol classes, splits the rest and scales every set with
/// the statistics of the training split.
pub fn prepare(
    ds: &Dataset,
    protocol: Option<&OodProtocol>,
    fractions: [f64; 3],
    scaling: Scaling,
    seed: u64,
) -> Result<Prepared> {
    let (id, ood_train, ood_test) = match protocol {
        Some(p) => {
            let o = apply_ood_protocol(ds, p)?;
            (o.id, o.ood_train, o.ood_test)
        }
        None => (ds.clone(), ds.subset(&[]), ds.subset(&[])),
    };
    let s = split(&id, fractions, seed)?;
    let (train, rest) = standardize_with(&s.train, &[&s.val, &s.test, &ood_train, &ood_test], scaling)?;
    let [val, test, ood_train, ood_test]: [Dataset; 4] = rest.try_into().expect("four sets");
    Ok(Prepared {
        train,
        val,
        test,
        ood_train,
        ood_test,
        warnings: s.warnings,
    })
}

/// Like [`prepare`] for data whose OOD examples come as a separate set,
/// such as [`synth_blobs`]. Half of the OOD rows, chosen per seed, go to
/// `ood_train` and the rest to `ood_test`.
pub fn prepare_with_ood(
    id: &Dataset,
    ood: &Dataset,
    fractions: [f64; 3],
    scaling: Scaling,
    seed: u64,
) -> Result<Prepared> {
    if ood.dim() != id.dim() {
        return Err(Error::Contract(format!(
            "OOD set has {} features, ID set {}",
            ood.dim(),
            id.dim()
        )));
    }
    let mut idx: Vec<usize> = (0..ood.len()).collect();
    RngStream::new(seed, 0x00d5).shuffle(&mut idx);
    let (a, b) = idx.split_at(ood.len() / 2);
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    let s = split(id, fractions, seed)?;
    let (train, rest) = standardize_with(&s.train, &[&s.val, &s.test, &ood.subset(&a), &ood.subset(&b)], scaling)?;
    let [val, test, ood_train, ood_test]: [Dataset; 4] = rest.try_into().expect("four sets");
    Ok(Prepared {
        train,
        val,
        test,
        ood_train,
        ood_test,
        warnings: s.warnings,
    })
}

/// Isotropic unit-variance Gaussian clusters. With `dim >= k` the means are
/// `separation * e_c`; otherwise they sit on a regular polygon of
/// circumradius `separation` in the first two coordinates. The OOD cluster
/// lies along `-(1, ..., 1)` from the centroid, at distance `ood_shift` from
/// the nearest class mean.
pub fn synth_blobs(
    k: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    ood_shift: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(separation > 0.0) || k < 2 || dim == 0 {
        return Err(Error::domain("synth_blobs", "need separation > 0, k >= 2, dim >= 1"));
    }
    if dim < 2 && k > 2 {
        return Err(Error::domain("synth_blobs", "more than two classes need dim >= 2"));
    }
    let mut means = vec![vec![0.0; dim]; k];
    for (c, m) in means.iter_mut().enumerate() {
        if dim >= k {
            m[c] = separation;
        } else if dim == 1 {
            m[0] = if c == 0 { -separation } else { separation };
        } else {
            let theta = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
            m[0] = separation * theta.cos();
            m[1] = separation * theta.sin();
        }
    }
    let centroid: Vec<f64> = (0..dim)
        .map(|j| means.iter().map(|m| m[j]).sum::<f64>() / k as f64)
        .collect();
    let u = vec![-1.0 / (dim as f64).sqrt(); dim];
    // |centroid + t u - m|^2 = s^2 has roots t = -b ± sqrt(b^2 - (|d|^2 - s^2))
    let mut t_max: Option<f64> = None;
    for m in &means {
        let diff: Vec<f64> = centroid.iter().zip(m).map(|(a, b)| a - b).collect();
        let b: f64 = diff.iter().zip(&u).map(|(d, u)| d * u).sum();
        let dd: f64 = diff.iter().map(|d| d * d).sum();
        let disc = b * b - (dd - ood_shift * ood_shift);
        if disc >= 0.0 {
            let root = -b + disc.sqrt();
            t_max = Some(t_max.map_or(root, |t: f64| t.max(root)));
        }
    }
    let t = t_max.ok_or_else(|| {
        Error::domain("synth_blobs", format!("ood_shift {ood_shift} is closer than any reachable point"))
    })?;
    let ood_mean: Vec<f64> = centroid.iter().zip(&u).map(|(c, u)| c + t * u).collect();

    let mut rng = RngStream::new(seed, 0xb10b);
    let mut draw = |mean: &[f64], n: usize, out: &mut Vec<f64>| {
        for _ in 0..n {
            out.extend(mean.iter().map(|m| m + rng.standard_normal()));
        }
    };
    let mut x = Vec::with_capacity(k * n_per_class * dim);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for (c, m) in means.iter().enumerate() {
        draw(m, n_per_class, &mut x);
        labels.extend(std::iter::repeat_n(c, n_per_class));
    }
    let mut ood_x = Vec::with_capacity(n_per_class * dim);
    draw(&ood_mean, n_per_class, &mut ood_x);
    let names = (0..k).map(|c| format!("blob{c}")).collect();
    let id = Dataset::new(Tensor::new(k * n_per_class, dim, x)?, labels, names)?;
    let ood = Dataset::new(
        Tensor::new(n_per_class, dim, ood_x)?,
        vec![0; n_per_class],
        vec!["ood".into()],
    )?;
    Ok((id, ood))
}
