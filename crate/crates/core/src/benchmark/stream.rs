//! Task streams: disjoint class groups, each with a train and test split.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled examples. `ids` are unique across the whole stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, ids: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() || labels.len() != ids.len() {
            return Err(Error::Shape {
                op: "dataset",
                detail: format!(
                    "{} rows, {} labels, {} ids",
                    features.rows(),
                    labels.len(),
                    ids.len()
                ),
            });
        }
        Ok(Self { features, labels, ids })
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

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Concatenation of several datasets with equal width.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let feats: Vec<&Tensor> = parts.iter().map(|d| &d.features).collect();
        Ok(Dataset {
            features: Tensor::vstack(&feats)?,
            labels: parts.iter().flat_map(|d| d.labels.iter().copied()).collect(),
            ids: parts.iter().flat_map(|d| d.ids.iter().copied()).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: usize,
    pub classes: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub num_classes: usize,
    pub dim: usize,
    /// Original label of each class index (identity for synthetic streams).
    pub class_names: Vec<i64>,
}

impl TaskStream {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Checks class disjointness and label membership.
    pub fn validate(&self) -> Result<()> {
        let mut owner = vec![None; self.num_classes];
        for t in &self.tasks {
            for &c in &t.classes {
                if c >= self.num_classes {
                    return Err(Error::Config(format!("class {} outside {}", c, self.num_classes)));
                }
                if let Some(prev) = owner[c] {
                    return Err(Error::Config(format!(
                        "class {} shared by tasks {} and {}",
                        c, prev, t.id
                    )));
                }
                owner[c] = Some(t.id);
            }
            for y in t.train.labels.iter().chain(&t.test.labels) {
                if owner.get(*y).copied().flatten() != Some(t.id) {
                    return Err(Error::Config(format!(
                        "label {} not in the class set of task {}",
                        y, t.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn train_union(&self) -> Result<Dataset> {
        Dataset::concat(&self.tasks.iter().map(|t| &t.train).collect::<Vec<_>>())
    }

    pub fn test_union(&self, upto: usize) -> Result<Dataset> {
        Dataset::concat(&self.tasks[..=upto].iter().map(|t| &t.test).collect::<Vec<_>>())
    }

    /// Zero mean, unit variance per feature, with statistics from the union
    /// of all train splits.
    pub fn standardized(&self) -> Result<TaskStream> {
        let train = self.train_union()?;
        let (n, d) = (train.len() as f64, self.dim);
        let mut mean = vec![0.0; d];
        for r in 0..train.len() {
            for (m, x) in mean.iter_mut().zip(train.features.row(r)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; d];
        for r in 0..train.len() {
            for ((s, x), m) in std.iter_mut().zip(train.features.row(r)).zip(&mean) {
                *s += (x - m).powi(2);
            }
        }
        std.iter_mut().for_each(|s| {
            *s = (*s / n).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        });
        let apply = |ds: &Dataset| -> Dataset {
            let mut f = ds.features.clone();
            let cols = f.cols();
            for (i, v) in f.data_mut().iter_mut().enumerate() {
                let j = i % cols;
                *v = (*v - mean[j]) / std[j];
            }
            Dataset {
                features: f,
                labels: ds.labels.clone(),
                ids: ds.ids.clone(),
            }
        };
        let mut out = self.clone();
        for t in &mut out.tasks {
            t.train = apply(&t.train);
            t.test = apply(&t.test);
        }
        Ok(out)
    }

    /// All examples as `label,feature…` lines ordered by example id.
    pub fn to_csv_rows(&self) -> Vec<String> {
        let mut rows: Vec<(usize, String)> = Vec::new();
        for t in &self.tasks {
            for ds in [&t.train, &t.test] {
                for i in 0..ds.len() {
                    let mut line = self.class_names[ds.labels[i]].to_string();
                    for v in ds.features.row(i) {
                        line.push(',');
                        line.push_str(&v.to_string());
                    }
                    rows.push((ds.ids[i], line));
                }
            }
        }
        rows.sort_by_key(|(id, _)| *id);
        rows.into_iter().map(|(_, l)| l).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = self.to_csv_rows().join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Parameters of the Gaussian-blob stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Per-coordinate standard deviation of each blob.
    pub cluster_spread: f64,
    /// Norm of each class mean.
    pub separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_tasks: 5,
            classes_per_task: 2,
            dim: 16,
            train_per_class: 200,
            test_per_class: 100,
            cluster_spread: 1.0,
            separation: 3.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_tasks,
            self.classes_per_task,
            self.dim,
            self.train_per_class,
            self.test_per_class,
        ];
        if counts.contains(&0) {
            return Err(Error::Config(format!("synthetic stream counts must be >= 1: {:?}", self)));
        }
        if !(self.cluster_spread >= 0.0 && self.separation >= 0.0) {
            return Err(Error::Config("spread and separation must be non-negative".into()));
        }
        Ok(())
    }
}

/// Isotropic Gaussian blob per class around a random direction scaled by
/// `separation`; standardized on the train union. Deterministic per seed.
pub fn make_synthetic_stream(spec: &SyntheticSpec, seed: u64) -> Result<TaskStream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = spec.n_tasks * spec.classes_per_task;
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| spec.separation * x / n).collect()
        })
        .collect();

    let mut next_id = 0;
    let mut sample = |class: usize, count: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut data = Vec::with_capacity(count * spec.dim);
        for _ in 0..count {
            for m in &means[class] {
                let z: f64 = StandardNormal.sample(rng);
                data.push(m + spec.cluster_spread * z);
            }
        }
        let ids = (next_id..next_id + count).collect();
        next_id += count;
        Dataset::new(Tensor::matrix(count, spec.dim, data)?, vec![class; count], ids)
    };

    let mut tasks = Vec::with_capacity(spec.n_tasks);
    for t in 0..spec.n_tasks {
        let classes: Vec<usize> = (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect();
        let mut train_parts = Vec::new();
        let mut test_parts = Vec::new();
        for &c in &classes {
            train_parts.push(sample(c, spec.train_per_class, &mut rng)?);
            test_parts.push(sample(c, spec.test_per_class, &mut rng)?);
        }
        tasks.push(Task {
            id: t,
            classes,
            train: Dataset::concat(&train_parts.iter().collect::<Vec<_>>())?,
            test: Dataset::concat(&test_parts.iter().collect::<Vec<_>>())?,
        });
    }
    let stream = TaskStream {
        tasks,
        num_classes,
        dim: spec.dim,
        class_names: (0..num_classes as i64).collect(),
    };
    stream.validate()?;
    stream.standardized()
}

/// Reads `label,feature₁,…,feature_d` rows. Classes are sorted and split
/// contiguously into `n_tasks` groups; each class is split into train/test
/// with `split_fraction` going to train. Features are left as read.
pub fn load_csv_stream(path: &Path, n_tasks: usize, split_fraction: f64, seed: u64) -> Result<TaskStream> {
    let text = std::fs::read_to_string(path)?;
    parse_csv_stream(&text, n_tasks, split_fraction, seed)
}

pub fn parse_csv_stream(text: &str, n_tasks: usize, split_fraction: f64, seed: u64) -> Result<TaskStream> {
    if n_tasks == 0 {
        return Err(Error::Config("n_tasks must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&split_fraction) {
        return Err(Error::Config(format!("split_fraction {} outside [0, 1]", split_fraction)));
    }
    let mut width = None;
    let mut rows: Vec<(i64, Vec<f64>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let label_s = fields.next().unwrap_or("");
        let label: i64 = label_s.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("label {:?} is not an integer", label_s),
        })?;
        let feats = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("feature {:?} is not a number", f),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if feats.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "row has no features".into(),
            });
        }
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("row has {} features, expected {}", feats.len(), w),
                })
            }
            _ => {}
        }
        rows.push((label, feats));
    }
    let dim = width.ok_or_else(|| Error::Empty("CSV stream has no rows".into()))?;

    let mut by_class: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, (label, _)) in rows.iter().enumerate() {
        by_class.entry(*label).or_default().push(i);
    }
    let num_classes = by_class.len();
    if num_classes % n_tasks != 0 {
        return Err(Error::Config(format!(
            "{} classes cannot be split evenly into {} tasks",
            num_classes, n_tasks
        )));
    }
    let per_task = num_classes / n_tasks;
    let class_names: Vec<i64> = by_class.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let build = |idx: &[usize], class: usize| -> Result<Dataset> {
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            data.extend_from_slice(&rows[i].1);
        }
        Dataset::new(Tensor::matrix(idx.len(), dim, data)?, vec![class; idx.len()], idx.to_vec())
    };

    let mut tasks = Vec::with_capacity(n_tasks);
    let members: Vec<Vec<usize>> = by_class.into_values().collect();
    for t in 0..n_tasks {
        let classes: Vec<usize> = (t * per_task..(t + 1) * per_task).collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            let mut idx = members[c].clone();
            idx.shuffle(&mut rng);
            let n_train = (split_fraction * idx.len() as f64).round() as usize;
            let (tr, te) = idx.split_at(n_train);
            train.push(build(tr, c)?);
            test.push(build(te, c)?);
        }
        tasks.push(Task {
            id: t,
            classes,
            train: Dataset::concat(&train.iter().collect::<Vec<_>>())?,
            test: Dataset::concat(&test.iter().collect::<Vec<_>>())?,
        });
    }
    let stream = TaskStream {
        tasks,
        num_classes,
        dim,
        class_names,
    };
    stream.validate()?;
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_tasks: 5,
            classes_per_task: 2,
            dim: 4,
            train_per_class: 10,
            test_per_class: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic_stream(&small_spec(), 3).unwrap();
        let b = make_synthetic_stream(&small_spec(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv_rows(), b.to_csv_rows());
        assert_ne!(a, make_synthetic_stream(&small_spec(), 4).unwrap());
    }

    #[test]
    fn synthetic_class_layout() {
        let s = make_synthetic_stream(&small_spec(), 0).unwrap();
        assert_eq!(s.num_classes, 10);
        assert_eq!(s.n_tasks(), 5);
        s.validate().unwrap();
        assert_eq!(s.tasks[2].classes, vec![4, 5]);
        assert_eq!(s.tasks[0].train.len(), 20);
        assert_eq!(s.tasks[0].test.len(), 10);
    }

    #[test]
    fn synthetic_is_standardized() {
        let s = make_synthetic_stream(&small_spec(), 1).unwrap();
        let u = s.train_union().unwrap();
        for j in 0..s.dim {
            let col: Vec<f64> = (0..u.len()).map(|i| u.features.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_counts_rejected() {
        let spec = SyntheticSpec {
            dim: 0,
            ..small_spec()
        };
        assert!(make_synthetic_stream(&spec, 0).is_err());
    }

    #[test]
    fn csv_ten_classes_five_tasks() {
        let mut text = String::new();
        for i in 0..40 {
            text.push_str(&format!("{},{},{}\n", 10 + i % 10, i as f64 * 0.5, -(i as f64)));
        }
        let s = parse_csv_stream(&text, 5, 0.5, 0).unwrap();
        assert_eq!(s.num_classes, 10);
        assert!(s.tasks.iter().all(|t| t.classes.len() == 2));
        assert_eq!(s.class_names[0], 10);
        assert_eq!(s.tasks[0].train.len() + s.tasks[0].test.len(), 8);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let ragged = "0,1.0,2.0\n1,1.0\n";
        match parse_csv_stream(ragged, 1, 0.5, 0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {:?}", other),
        }
        let bad_label = "0,1.0\n1,2.0\nx,3.0\n";
        match parse_csv_stream(bad_label, 1, 0.5, 0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {:?}", other),
        }
        assert!(matches!(
            parse_csv_stream("0,1\n1,2\n2,3\n", 2, 0.5, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let rows: Vec<String> = (0..24)
            .map(|i| format!("{},{},{}", i % 4, (i as f64) * 0.25, 1.5 - i as f64))
            .collect();
        let text = rows.join("\n");
        let s = parse_csv_stream(&text, 2, 0.75, 9).unwrap();
        assert_eq!(s.to_csv_rows(), rows);
    }
}
