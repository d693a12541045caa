//! Accuracy bookkeeping and the final average accuracy / forgetting metrics.

use serde::{Deserialize, Serialize};

use crate::backbone::MlpBackbone;
use crate::benchmark::stream::Dataset;
use crate::error::{Error, Result};

/// `a[i][t]`: accuracy on task `i` after training through task `t` (`t ≥ i`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(n_tasks: usize) -> Self {
        Self {
            cells: vec![vec![None; n_tasks]; n_tasks],
        }
    }

    /// Builds a matrix from rows; row `i` lists `a[i][i..]`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut m = Self::new(n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n - i {
                return Err(Error::Config(format!(
                    "row {} has {} entries, expected {}",
                    i,
                    r.len(),
                    n - i
                )));
            }
            for (k, &v) in r.iter().enumerate() {
                m.set(i, i + k, v)?;
            }
        }
        Ok(m)
    }

    pub fn n_tasks(&self) -> usize {
        self.cells.len()
    }

    pub fn set(&mut self, task: usize, after: usize, acc: f64) -> Result<()> {
        if task > after || after >= self.n_tasks() {
            return Err(Error::Config(format!(
                "accuracy cell ({}, {}) outside the lower triangle of {} tasks",
                task,
                after,
                self.n_tasks()
            )));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Numeric(format!("accuracy {} outside [0, 1]", acc)));
        }
        self.cells[task][after] = Some(acc);
        Ok(())
    }

    pub fn get(&self, task: usize, after: usize) -> Option<f64> {
        self.cells.get(task)?.get(after).copied().flatten()
    }

    pub fn is_complete(&self) -> bool {
        let n = self.n_tasks();
        (0..n).all(|i| (i..n).all(|t| self.cells[i][t].is_some()))
    }

    /// Accuracy of each task after the final task.
    pub fn final_row(&self) -> Result<Vec<f64>> {
        let last = self
            .n_tasks()
            .checked_sub(1)
            .ok_or_else(|| Error::Empty("accuracy matrix has no tasks".into()))?;
        (0..=last)
            .map(|i| {
                self.get(i, last)
                    .ok_or_else(|| Error::Config(format!("missing final accuracy for task {}", i)))
            })
            .collect()
    }

    /// CSV: rows are tasks, columns are "after task t"; empty upper cells.
    pub fn to_csv(&self) -> String {
        let n = self.n_tasks();
        let mut out = String::from("task");
        for t in 0..n {
            out.push_str(&format!(",after_{}", t));
        }
        out.push('\n');
        for i in 0..n {
            out.push_str(&i.to_string());
            for t in 0..n {
                out.push(',');
                if let Some(v) = self.cells[i][t] {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Mean final accuracy over all tasks.
pub fn faa(m: &AccuracyMatrix) -> Result<f64> {
    let row = m.final_row()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Mean over non-final tasks of the drop from the best recorded accuracy to
/// the final one.
pub fn ff(m: &AccuracyMatrix) -> Result<f64> {
    let n = m.n_tasks();
    if n < 2 {
        return Err(Error::Config("forgetting needs at least two tasks".into()));
    }
    let last = n - 1;
    let mut total = 0.0;
    for i in 0..last {
        let fin = m
            .get(i, last)
            .ok_or_else(|| Error::Config(format!("missing final accuracy for task {}", i)))?;
        let mut best = f64::NEG_INFINITY;
        for t in i..=last {
            let a = m
                .get(i, t)
                .ok_or_else(|| Error::Config(format!("missing accuracy ({}, {})", i, t)))?;
            best = best.max(a - fin);
        }
        total += best;
    }
    Ok(total / last as f64)
}

fn argmax_over(row: &[f64], classes: impl Iterator<Item = usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for c in classes {
        match best {
            Some((_, v)) if row[c] <= v => {}
            _ => best = Some((c, row[c])),
        }
    }
    best.map(|(c, _)| c)
}

/// Fraction of examples whose arg-max over all classes is the label.
pub fn class_il_accuracy(model: &MlpBackbone, data: &Dataset) -> Result<f64> {
    accuracy(model, data, None)
}

/// Fraction of examples whose arg-max over `task_classes` is the label.
pub fn task_il_accuracy(model: &MlpBackbone, data: &Dataset, task_classes: &[usize]) -> Result<f64> {
    accuracy(model, data, Some(task_classes))
}

fn accuracy(model: &MlpBackbone, data: &Dataset, mask: Option<&[usize]>) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let logits = model.forward(&data.features)?;
    let c = logits.cols();
    let mut correct = 0usize;
    for (r, &y) in data.labels.iter().enumerate() {
        let row = logits.row(r);
        let pred = match mask {
            Some(m) => argmax_over(row, m.iter().copied()),
            None => argmax_over(row, 0..c),
        };
        if pred == Some(y) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
