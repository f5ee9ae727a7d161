//! Dataset model, file ingestion and the synthetic fixture generator.
//!
//! File formats:
//! - features CSV: `instance_id,label,f1,..,fd` (optional header row)
//! - attributes CSV: `label,a1,..,am`, one row per class (optional header row)
//! - splits JSON: class lists plus named instance-id arrays, see [`SplitsFile`]

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TggError};
use crate::tensor::Tensor;

/// Named instance index lists (row positions into the feature matrix).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test_seen: Vec<usize>,
    pub test_unseen: Vec<usize>,
}

/// On-disk form of the splits; instances are referenced by `instance_id`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitsFile {
    pub seen_classes: Vec<String>,
    pub unseen_classes: Vec<String>,
    /// Seen classes reserved for validation, when the source split names them.
    #[serde(default)]
    pub val_classes: Vec<String>,
    pub train: Vec<u64>,
    #[serde(default)]
    pub val: Vec<u64>,
    pub test_seen: Vec<u64>,
    pub test_unseen: Vec<u64>,
}

/// Validated dataset. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    class_names: Vec<String>,
    instance_ids: Vec<u64>,
    features: Tensor,
    labels: Vec<usize>,
    attributes: Tensor,
    seen: Vec<usize>,
    unseen: Vec<usize>,
    val_classes: Vec<usize>,
    splits: Splits,
}

/// Raw parts for [`Dataset::new`].
#[derive(Debug, Clone)]
pub struct DatasetParts {
    pub class_names: Vec<String>,
    pub instance_ids: Vec<u64>,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub attributes: Tensor,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub val_classes: Vec<usize>,
    pub splits: Splits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Seen,
    Unseen,
}

impl Dataset {
    pub fn new(p: DatasetParts) -> Result<Self> {
        let ds = Dataset {
            class_names: p.class_names,
            instance_ids: p.instance_ids,
            features: p.features,
            labels: p.labels,
            attributes: p.attributes,
            seen: p.seen,
            unseen: p.unseen,
            val_classes: p.val_classes,
            splits: p.splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_instances(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn attribute_dim(&self) -> usize {
        self.attributes.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn instance_ids(&self) -> &[u64] {
        &self.instance_ids
    }

    pub fn attributes(&self) -> &Tensor {
        &self.attributes
    }

    pub fn seen_classes(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen_classes(&self) -> &[usize] {
        &self.unseen
    }

    pub fn val_classes(&self) -> &[usize] {
        &self.val_classes
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn domain(&self, class: usize) -> Domain {
        if self.unseen.contains(&class) {
            Domain::Unseen
        } else {
            Domain::Seen
        }
    }

    /// Instances of `class` among the given split indices.
    pub fn instances_of(&self, split: &[usize], class: usize) -> Vec<usize> {
        split.iter().copied().filter(|&i| self.labels[i] == class).collect()
    }

    /// Number of real support instances per unseen class in the train split,
    /// or `None` for a zero-shot dataset.
    pub fn few_shot_k(&self) -> Option<usize> {
        let k = self
            .splits
            .train
            .iter()
            .filter(|&&i| self.labels[i] == self.unseen[0])
            .count();
        (k > 0).then_some(k)
    }

    /// Checks every dataset invariant; the first violation is returned.
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        let c = self.class_names.len();
        if self.features.rows() != n || self.instance_ids.len() != n {
            return Err(TggError::Dimension {
                op: "dataset",
                left: self.features.shape().to_vec(),
                right: vec![n, self.instance_ids.len()],
            });
        }
        if self.attributes.rows() != c {
            return Err(TggError::Schema(format!(
                "{} attribute rows for {c} classes",
                self.attributes.rows()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= c) {
            return Err(TggError::Schema(format!("label {bad} has no attribute row")));
        }
        let seen: HashSet<usize> = self.seen.iter().copied().collect();
        let unseen: HashSet<usize> = self.unseen.iter().copied().collect();
        if let Some(both) = seen.intersection(&unseen).next() {
            return Err(TggError::Invariant(format!(
                "class {} is both seen and unseen",
                self.class_names[*both]
            )));
        }
        for k in 0..c {
            if !seen.contains(&k) && !unseen.contains(&k) {
                return Err(TggError::Invariant(format!(
                    "class {} is neither seen nor unseen",
                    self.class_names[k]
                )));
            }
        }
        if self.seen.is_empty() || self.unseen.is_empty() {
            return Err(TggError::Invariant(
                "need at least one seen and one unseen class".into(),
            ));
        }
        if let Some(v) = self.val_classes.iter().find(|v| !seen.contains(v)) {
            return Err(TggError::Invariant(format!(
                "validation class {} is not a seen class",
                self.class_names[*v]
            )));
        }
        let s = &self.splits;
        for (name, split) in [
            ("train", &s.train),
            ("val", &s.val),
            ("test_seen", &s.test_seen),
            ("test_unseen", &s.test_unseen),
        ] {
            if let Some(&bad) = split.iter().find(|&&i| i >= n) {
                return Err(TggError::Schema(format!("{name} split references instance {bad}")));
            }
        }
        let check_domain = |name: &str, split: &[usize], want: &HashSet<usize>| -> Result<()> {
            match split.iter().find(|&&i| !want.contains(&self.labels[i])) {
                Some(&i) => Err(TggError::Invariant(format!(
                    "{name} split holds instance {} of class {}",
                    self.instance_ids[i], self.class_names[self.labels[i]]
                ))),
                None => Ok(()),
            }
        };
        check_domain("val", &s.val, &seen)?;
        check_domain("test_seen", &s.test_seen, &seen)?;
        check_domain("test_unseen", &s.test_unseen, &unseen)?;

        let mut shots: BTreeMap<usize, usize> = self.unseen.iter().map(|&u| (u, 0)).collect();
        for &i in &s.train {
            if let Some(cnt) = shots.get_mut(&self.labels[i]) {
                *cnt += 1;
            }
        }
        let counts: HashSet<usize> = shots.values().copied().collect();
        if counts.len() > 1 {
            return Err(TggError::Invariant(format!(
                "train split must hold the same number of support instances for every unseen class, got {:?}",
                shots.values().collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    /// Human-readable invariant report used by `dataset validate`.
    pub fn report(&self) -> DatasetReport {
        DatasetReport {
            instances: self.num_instances(),
            classes: self.num_classes(),
            seen: self.seen.len(),
            unseen: self.unseen.len(),
            val_classes: self.val_classes.len(),
            feature_dim: self.feature_dim(),
            attribute_dim: self.attribute_dim(),
            train: self.splits.train.len(),
            val: self.splits.val.len(),
            test_seen: self.splits.test_seen.len(),
            test_unseen: self.splits.test_unseen.len(),
            few_shot_k: self.few_shot_k(),
        }
    }

    pub fn load(features: &Path, attributes: &Path, splits: &Path) -> Result<Self> {
        let (class_names, attrs) = read_attributes(attributes)?;
        let (ids, label_names, feats) = read_features(features)?;
        let index: HashMap<&str, usize> = class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let labels = label_names
            .iter()
            .map(|l| {
                index
                    .get(l.as_str())
                    .copied()
                    .ok_or_else(|| TggError::Schema(format!("label {l} has no attribute row")))
            })
            .collect::<Result<Vec<_>>>()?;
        let sf: SplitsFile = serde_json::from_str(&std::fs::read_to_string(splits)?)?;
        let classes = |names: &[String]| -> Result<Vec<usize>> {
            names
                .iter()
                .map(|n| {
                    index
                        .get(n.as_str())
                        .copied()
                        .ok_or_else(|| TggError::Schema(format!("splits name unknown class {n}")))
                })
                .collect()
        };
        let row_of: HashMap<u64, usize> = ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        if row_of.len() != ids.len() {
            return Err(TggError::Schema("duplicate instance_id in features".into()));
        }
        let rows = |name: &str, list: &[u64]| -> Result<Vec<usize>> {
            list.iter()
                .map(|id| {
                    row_of
                        .get(id)
                        .copied()
                        .ok_or_else(|| TggError::Schema(format!("{name} split names nonexistent instance {id}")))
                })
                .collect()
        };
        Dataset::new(DatasetParts {
            seen: classes(&sf.seen_classes)?,
            unseen: classes(&sf.unseen_classes)?,
            val_classes: classes(&sf.val_classes)?,
            splits: Splits {
                train: rows("train", &sf.train)?,
                val: rows("val", &sf.val)?,
                test_seen: rows("test_seen", &sf.test_seen)?,
                test_unseen: rows("test_unseen", &sf.test_unseen)?,
            },
            class_names,
            instance_ids: ids,
            features: feats,
            labels,
            attributes: attrs,
        })
    }

    /// Writes `features.csv`, `attributes.csv` and `splits.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<DatasetPaths> {
        std::fs::create_dir_all(dir)?;
        let paths = DatasetPaths::in_dir(dir);
        self.write_features(&paths.features)?;
        self.write_attributes(&paths.attributes)?;
        std::fs::write(&paths.splits, serde_json::to_string_pretty(&self.splits_file())?)?;
        Ok(paths)
    }

    pub fn splits_file(&self) -> SplitsFile {
        let names = |cs: &[usize]| cs.iter().map(|&c| self.class_names[c].clone()).collect();
        let ids = |rs: &[usize]| rs.iter().map(|&r| self.instance_ids[r]).collect();
        SplitsFile {
            seen_classes: names(&self.seen),
            unseen_classes: names(&self.unseen),
            val_classes: names(&self.val_classes),
            train: ids(&self.splits.train),
            val: ids(&self.splits.val),
            test_seen: ids(&self.splits.test_seen),
            test_unseen: ids(&self.splits.test_unseen),
        }
    }

    pub fn write_features(&self, path: &Path) -> Result<()> {
        let rows: Vec<usize> = (0..self.num_instances()).collect();
        write_feature_rows(
            path,
            self.feature_dim(),
            rows.iter().map(|&r| {
                (
                    self.instance_ids[r],
                    self.class_names[self.labels[r]].as_str(),
                    self.features.row(r),
                )
            }),
        )
    }

    pub fn write_attributes(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["label".to_string()];
        header.extend((1..=self.attribute_dim()).map(|k| format!("a{k}")));
        w.write_record(&header)?;
        for (c, name) in self.class_names.iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend(self.attributes.row(c).iter().map(|v| format!("{v:.17e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Standardizes features with train-split statistics and L2-normalizes
    /// attribute rows.
    ///
    /// Feature dimensions with zero train variance are centered but left
    /// unscaled.
    pub fn standardize(&self) -> Result<Dataset> {
        let train = &self.splits.train;
        if train.is_empty() {
            return Err(TggError::Invariant("standardize needs a non-empty train split".into()));
        }
        let d = self.feature_dim();
        let nt = train.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in train {
            for (m, &v) in mean.iter_mut().zip(self.features.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nt);
        let mut var = vec![0.0; d];
        for &i in train {
            for ((s, &v), &m) in var.iter_mut().zip(self.features.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|&s| {
                let sd = (s / nt).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        let mut features = self.features.clone();
        for r in 0..features.rows() {
            for (j, v) in features.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[j]) / scale[j];
            }
        }
        let mut attributes = self.attributes.clone();
        for r in 0..attributes.rows() {
            let norm = attributes.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                attributes.row_mut(r).iter_mut().for_each(|v| *v /= norm);
            }
        }
        Ok(Dataset {
            features,
            attributes,
            ..self.clone()
        })
    }

    /// Moves `k` instances per unseen class from `test_unseen` into `train`,
    /// producing a few-shot dataset.
    pub fn with_few_shot_support(&self, k: usize, seed: u64) -> Result<Dataset> {
        if self.few_shot_k().is_some() {
            return Err(TggError::Invariant("dataset already carries unseen support".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut splits = self.splits.clone();
        for &u in &self.unseen {
            let pool = self.instances_of(&splits.test_unseen, u);
            if pool.len() <= k {
                return Err(TggError::Episode(format!(
                    "class {} has {} test instances, cannot move {k} into support",
                    self.class_names[u],
                    pool.len()
                )));
            }
            let picked: Vec<usize> = pool.choose_multiple(&mut rng, k).copied().collect();
            splits.test_unseen.retain(|i| !picked.contains(i));
            splits.train.extend(picked);
        }
        splits.train.sort_unstable();
        let ds = Dataset { splits, ..self.clone() };
        ds.validate()?;
        Ok(ds)
    }

    /// Copy with one instance's features replaced (perturbation tests).
    pub fn with_feature_row(&self, row: usize, values: &[f64]) -> Dataset {
        let mut ds = self.clone();
        ds.features.row_mut(row).copy_from_slice(values);
        ds
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetReport {
    pub instances: usize,
    pub classes: usize,
    pub seen: usize,
    pub unseen: usize,
    pub val_classes: usize,
    pub feature_dim: usize,
    pub attribute_dim: usize,
    pub train: usize,
    pub val: usize,
    pub test_seen: usize,
    pub test_unseen: usize,
    pub few_shot_k: Option<usize>,
}

impl fmt::Display for DatasetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "instances      {}", self.instances)?;
        writeln!(
            f,
            "classes        {} ({} seen, of which {} validation; {} unseen)",
            self.classes, self.seen, self.val_classes, self.unseen
        )?;
        writeln!(f, "feature dim    {}", self.feature_dim)?;
        writeln!(f, "attribute dim  {}", self.attribute_dim)?;
        writeln!(
            f,
            "splits         train {} / val {} / test_seen {} / test_unseen {}",
            self.train, self.val, self.test_seen, self.test_unseen
        )?;
        match self.few_shot_k {
            Some(k) => writeln!(f, "setting        few-shot, {k} support per unseen class")?,
            None => writeln!(f, "setting        zero-shot (no unseen instances in train)")?,
        }
        write!(f, "invariants     ok")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub features: PathBuf,
    pub attributes: PathBuf,
    pub splits: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths {
            features: dir.join("features.csv"),
            attributes: dir.join("attributes.csv"),
            splits: dir.join("splits.json"),
        }
    }
}

/// Writes rows in the features CSV layout.
pub fn write_feature_rows<'a>(
    path: &Path,
    dim: usize,
    rows: impl Iterator<Item = (u64, &'a str, &'a [f64])>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["instance_id".to_string(), "label".to_string()];
    header.extend((1..=dim).map(|k| format!("f{k}")));
    w.write_record(&header)?;
    for (id, label, vals) in rows {
        let mut rec = vec![id.to_string(), label.to_string()];
        rec.extend(vals.iter().map(|v| format!("{v:.17e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> TggError {
    TggError::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        msg: msg.into(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?)
}

fn parse_floats(path: &Path, line: u64, fields: impl Iterator<Item = String>) -> Result<Vec<f64>> {
    fields
        .map(|f| {
            f.parse::<f64>()
                .map_err(|e| parse_err(path, line, format!("bad number {f:?}: {e}")))
        })
        .collect()
}

/// Returns `(instance_ids, label names, features)`.
pub fn read_features(path: &Path) -> Result<(Vec<u64>, Vec<String>, Tensor)> {
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width: Option<usize> = None;
    for (k, rec) in reader(path)?.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(k as u64 + 1, |p| p.line());
        if k == 0 && rec.get(0).is_some_and(|f| f.parse::<u64>().is_err()) {
            continue;
        }
        if rec.len() < 3 {
            return Err(parse_err(path, line, "expected instance_id,label,f1..fd"));
        }
        let d = rec.len() - 2;
        match width {
            None => width = Some(d),
            Some(w) if w != d => return Err(parse_err(path, line, format!("ragged row: {d} features, expected {w}"))),
            _ => {}
        }
        let id = rec[0]
            .parse::<u64>()
            .map_err(|e| parse_err(path, line, format!("bad instance_id: {e}")))?;
        ids.push(id);
        labels.push(rec[1].to_string());
        values.extend(parse_floats(path, line, rec.iter().skip(2).map(str::to_string))?);
    }
    let d = width.ok_or_else(|| parse_err(path, 1, "no feature rows"))?;
    let n = ids.len();
    Ok((ids, labels, Tensor::matrix(n, d, values)))
}

/// Returns `(class names in file order, attributes [C x m])`.
pub fn read_attributes(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let mut names = Vec::new();
    let mut values = Vec::new();
    let mut width: Option<usize> = None;
    for (k, rec) in reader(path)?.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(k as u64 + 1, |p| p.line());
        if rec.len() < 2 {
            return Err(parse_err(path, line, "expected label,a1..am"));
        }
        if k == 0 && rec.get(1).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let m = rec.len() - 1;
        match width {
            None => width = Some(m),
            Some(w) if w != m => {
                return Err(parse_err(
                    path,
                    line,
                    format!("ragged row: {m} attributes, expected {w}"),
                ))
            }
            _ => {}
        }
        let name = rec[0].to_string();
        if names.contains(&name) {
            return Err(parse_err(path, line, format!("duplicate class {name}")));
        }
        names.push(name);
        values.extend(parse_floats(path, line, rec.iter().skip(1).map(str::to_string))?);
    }
    let m = width.ok_or_else(|| parse_err(path, 1, "no attribute rows"))?;
    Ok((names.clone(), Tensor::matrix(names.len(), m, values)))
}

/// Parameters of the separability-controlled synthetic fixture.
///
/// Class means are `scale · L · e_c + offset_c`, where `L` is a fixed random
/// mixing matrix, `e_c` the unit-norm non-negative attribute vector, and
/// `offset_c` a smooth nonlinear function of `e_c` of magnitude
/// `class_offset` that a linear attribute map cannot reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub feature_dim: usize,
    pub attribute_dim: usize,
    /// Per-dimension standard deviation of instances around their class mean.
    pub class_spread: f64,
    pub mean_scale: f64,
    pub class_offset: f64,
    /// Rank of a class-independent subspace of extra per-instance variation.
    pub nuisance_rank: usize,
    /// Standard deviation of each coordinate in that subspace.
    pub nuisance_scale: f64,
    pub instances_per_class: usize,
    /// Fractions of each seen class assigned to train and val; the rest is test_seen.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub mixing_seed: u64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seen_classes: 10,
            unseen_classes: 5,
            feature_dim: 32,
            attribute_dim: 8,
            class_spread: 0.3,
            mean_scale: 3.0,
            class_offset: 0.0,
            nuisance_rank: 0,
            nuisance_scale: 0.0,
            instances_per_class: 60,
            train_fraction: 0.6,
            val_fraction: 0.2,
            mixing_seed: 7,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.seen_classes,
            self.unseen_classes,
            self.feature_dim,
            self.attribute_dim,
            self.instances_per_class,
        ];
        if counts.contains(&0) {
            return Err(TggError::Config("synthetic counts must be positive".into()));
        }
        if !(self.class_spread > 0.0) {
            return Err(TggError::Config("class_spread must be > 0".into()));
        }
        if self.nuisance_rank > self.feature_dim || self.nuisance_scale < 0.0 {
            return Err(TggError::Config(
                "nuisance_rank must be <= feature_dim and nuisance_scale >= 0".into(),
            ));
        }
        if self.mean_scale <= 0.0 || self.class_offset < 0.0 {
            return Err(TggError::Config("mean_scale must be > 0 and class_offset >= 0".into()));
        }
        if !(0.0..=1.0).contains(&(self.train_fraction + self.val_fraction))
            || self.train_fraction <= 0.0
            || self.val_fraction < 0.0
        {
            return Err(TggError::Config("split fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Generator internals exposed for oracle tests.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    /// `scale · L`, `[d x m]`.
    pub mixing: Tensor,
    /// True class means `[C x d]`.
    pub class_means: Tensor,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    generate_synthetic_with_truth(spec).map(|(ds, _)| ds)
}

const OFFSET_HIDDEN: usize = 16;

/// Gram-Schmidt on the columns of a row-major `[rows x cols]` matrix.
fn orthonormal_columns(rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
    let mut t = Tensor::matrix(rows, cols, values);
    for c in 0..cols {
        for p in 0..c {
            let dot: f64 = (0..rows).map(|r| t.get(r, c) * t.get(r, p)).sum();
            for r in 0..rows {
                let v = t.get(r, c) - dot * t.get(r, p);
                t.set(r, c, v);
            }
        }
        let norm = (0..rows).map(|r| t.get(r, c).powi(2)).sum::<f64>().sqrt();
        for r in 0..rows {
            let v = t.get(r, c) / norm;
            t.set(r, c, v);
        }
    }
    t
}

pub fn generate_synthetic_with_truth(spec: &SyntheticSpec) -> Result<(Dataset, SyntheticTruth)> {
    spec.validate()?;
    let (s, u, d, m) = (
        spec.seen_classes,
        spec.unseen_classes,
        spec.feature_dim,
        spec.attribute_dim,
    );
    let c = s + u;
    let mut mix_rng = ChaCha8Rng::seed_from_u64(spec.mixing_seed);
    let normal = |r: &mut ChaCha8Rng| -> f64 { r.sample(StandardNormal) };
    let mixing = Tensor::matrix(
        d,
        m,
        (0..d * m).map(|_| spec.mean_scale * normal(&mut mix_rng)).collect(),
    );
    let hidden_in = Tensor::matrix(
        OFFSET_HIDDEN,
        m,
        (0..OFFSET_HIDDEN * m).map(|_| 3.0 * normal(&mut mix_rng)).collect(),
    );
    let hidden_out = Tensor::matrix(
        d,
        OFFSET_HIDDEN,
        (0..d * OFFSET_HIDDEN)
            .map(|_| normal(&mut mix_rng) / (OFFSET_HIDDEN as f64).sqrt())
            .collect(),
    );
    let nuisance = orthonormal_columns(
        d,
        spec.nuisance_rank,
        (0..d * spec.nuisance_rank).map(|_| normal(&mut mix_rng)).collect(),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut attributes = Tensor::zeros(c, m);
    for k in 0..c {
        let row = loop {
            let v: Vec<f64> = (0..m).map(|_| normal(&mut rng).max(0.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                break v.into_iter().map(|x| x / norm).collect::<Vec<_>>();
            }
        };
        attributes.row_mut(k).copy_from_slice(&row);
    }

    let linear = attributes.matmul(&mixing.transpose())?;
    let offsets = attributes
        .matmul(&hidden_in.transpose())?
        .map(f64::tanh)
        .matmul(&hidden_out.transpose())?;
    let mut class_means = Tensor::zeros(c, d);
    for k in 0..c {
        for j in 0..d {
            class_means.set(k, j, linear.get(k, j) + spec.class_offset * offsets.get(k, j));
        }
    }

    let per = spec.instances_per_class;
    let n = c * per;
    let mut features = Tensor::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for k in 0..c {
        for i in 0..per {
            let r = k * per + i;
            for j in 0..d {
                let noise: f64 = normal(&mut rng);
                features.set(r, j, class_means.get(k, j) + spec.class_spread * noise);
            }
            if spec.nuisance_rank > 0 {
                let z: Vec<f64> = (0..spec.nuisance_rank).map(|_| normal(&mut rng)).collect();
                for j in 0..d {
                    let shift: f64 = nuisance.row(j).iter().zip(&z).map(|(b, z)| b * z).sum();
                    let v = features.get(r, j) + spec.nuisance_scale * shift;
                    features.set(r, j, v);
                }
            }
            labels.push(k);
        }
    }

    let mut splits = Splits::default();
    let n_train = ((per as f64) * spec.train_fraction).round().max(1.0) as usize;
    let n_val = ((per as f64) * spec.val_fraction).round() as usize;
    for k in 0..c {
        let mut rows: Vec<usize> = (k * per..(k + 1) * per).collect();
        if k < s {
            rows.shuffle(&mut rng);
            let n_train = n_train.min(per);
            let n_val = n_val.min(per - n_train);
            splits.train.extend(&rows[..n_train]);
            splits.val.extend(&rows[n_train..n_train + n_val]);
            splits.test_seen.extend(&rows[n_train + n_val..]);
        } else {
            splits.test_unseen.extend(rows);
        }
    }
    for v in [
        &mut splits.train,
        &mut splits.val,
        &mut splits.test_seen,
        &mut splits.test_unseen,
    ] {
        v.sort_unstable();
    }

    let ds = Dataset::new(DatasetParts {
        class_names: (0..c).map(|k| format!("class_{k:03}")).collect(),
        instance_ids: (0..n as u64).collect(),
        features,
        labels,
        attributes,
        seen: (0..s).collect(),
        unseen: (s..c).collect(),
        val_classes: Vec::new(),
        splits,
    })?;
    Ok((ds, SyntheticTruth { mixing, class_means }))
}
