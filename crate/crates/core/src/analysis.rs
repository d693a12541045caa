//! Diagnostics of decision boundaries around individual points.
//!
//! Everything here reads a model snapshot and never modifies it.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::MlpBackbone;
use crate::benchmark::metrics::class_il_accuracy;
use crate::benchmark::stream::Dataset;
use crate::error::{Error, Result};
use crate::rehearsal::buffer::BufferEntry;
use crate::seed;
use crate::tape::Tape;
use crate::tensor::Tensor;

fn logits_of(model: &MlpBackbone, x: &[f64]) -> Result<Vec<f64>> {
    Ok(model
        .forward(&Tensor::matrix(1, x.len(), x.to_vec())?)?
        .into_data())
}

fn check_member(true_class: usize, classes: &[usize]) -> Result<()> {
    if classes.contains(&true_class) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "class {} is not among {:?}",
            true_class, classes
        )))
    }
}

/// Margin of the true class over its strongest competitor.
fn margin(row: &[f64], true_class: usize, classes: &[usize]) -> f64 {
    let rival = classes
        .iter()
        .filter(|&&c| c != true_class)
        .map(|&c| row[c])
        .fold(f64::NEG_INFINITY, f64::max);
    row[true_class] - rival
}

/// `S(x) = f(x)_t − max_{i≠t} f(x)_i` on pre-softmax outputs, optionally
/// restricted to `class_mask`.
pub fn decision_value(model: &MlpBackbone, x: &[f64], true_class: usize, class_mask: Option<&[usize]>) -> Result<f64> {
    let row = logits_of(model, x)?;
    let all: Vec<usize>;
    let classes = match class_mask {
        Some(m) => m,
        None => {
            all = (0..row.len()).collect();
            &all
        }
    };
    check_member(true_class, classes)?;
    Ok(margin(&row, true_class, classes))
}

fn random_unit(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FgsmDirection {
    pub direction: Vec<f64>,
    /// The input gradient vanished and a random direction was used instead.
    pub fallback: bool,
}

/// L2-normalized sign of the input gradient of the cross-entropy at
/// `(x, true_class)`.
pub fn fgsm_direction(model: &MlpBackbone, x: &[f64], true_class: usize, seed: u64) -> Result<FgsmDirection> {
    masked_fgsm(model, x, true_class, seed, None)
}

/// As [`fgsm_direction`], with the cross-entropy restricted to `class_mask`.
fn masked_fgsm(
    model: &MlpBackbone,
    x: &[f64],
    true_class: usize,
    seed: u64,
    class_mask: Option<&[usize]>,
) -> Result<FgsmDirection> {
    if true_class >= model.num_classes() {
        return Err(Error::Config(format!("class {} outside the model outputs", true_class)));
    }
    let tape = Tape::new();
    let input = tape.param(Tensor::matrix(1, x.len(), x.to_vec())?);
    let trace = model.bind(&tape, false).forward_var(input)?;
    let loss = trace.logits().softmax_cross_entropy(&[true_class], class_mask)?;
    let grad = tape.backward(loss)?.wrt(input);
    let signs: Vec<f64> = grad
        .data()
        .iter()
        .map(|&g| if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 })
        .collect();
    let n = signs.iter().map(|s| s * s).sum::<f64>().sqrt();
    if n == 0.0 {
        return Ok(FgsmDirection {
            direction: random_unit(x.len(), seed),
            fallback: true,
        });
    }
    Ok(FgsmDirection {
        direction: signs.into_iter().map(|s| s / n).collect(),
        fallback: false,
    })
}

/// Margins on the plane `x + i·α + j·β`, `(i, j) ∈ [−ε, ε]²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    pub coords: Vec<f64>,
    /// `values[a][b]` is the margin at `(coords[a], coords[b])`.
    pub values: Vec<Vec<f64>>,
    /// Random unit direction.
    pub alpha: Vec<f64>,
    /// Normalized FGSM direction.
    pub beta: Vec<f64>,
    pub center: Vec<f64>,
    pub true_class: usize,
    pub fgsm_fallback: bool,
}

impl SurfaceGrid {
    pub fn size(&self) -> usize {
        self.coords.len()
    }

    pub fn center_value(&self) -> f64 {
        let c = self.size() / 2;
        self.values[c][c]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,S\n");
        for (a, &i) in self.coords.iter().enumerate() {
            for (b, &j) in self.coords.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", i, j, self.values[a][b]));
            }
        }
        out
    }
}

pub fn decision_surface(
    model: &MlpBackbone,
    x: &[f64],
    true_class: usize,
    eps: f64,
    grid_size: usize,
    seed: u64,
    class_mask: Option<&[usize]>,
) -> Result<SurfaceGrid> {
    if grid_size % 2 == 0 {
        return Err(Error::Config(format!("grid_size must be odd, got {}", grid_size)));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("surface radius must be >= 0, got {}", eps)));
    }
    let classes: Vec<usize> = match class_mask {
        Some(m) => m.to_vec(),
        None => (0..model.num_classes()).collect(),
    };
    check_member(true_class, &classes)?;
    let alpha = random_unit(x.len(), seed::derive(seed, 0));
    let fgsm = masked_fgsm(model, x, true_class, seed::derive(seed, 1), class_mask)?;
    let half = (grid_size / 2) as f64;
    let coords: Vec<f64> = (0..grid_size)
        .map(|k| if half == 0.0 { 0.0 } else { eps * ((k as f64 - half) / half) })
        .collect();

    let d = x.len();
    let mut points = Vec::with_capacity(grid_size * grid_size * d);
    for &i in &coords {
        for &j in &coords {
            for k in 0..d {
                points.push(x[k] + i * alpha[k] + j * fgsm.direction[k]);
            }
        }
    }
    let logits = model.forward(&Tensor::matrix(grid_size * grid_size, d, points)?)?;
    let values = (0..grid_size)
        .map(|a| {
            (0..grid_size)
                .map(|b| margin(logits.row(a * grid_size + b), true_class, &classes))
                .collect()
        })
        .collect();
    Ok(SurfaceGrid {
        coords,
        values,
        alpha,
        beta: fgsm.direction,
        center: x.to_vec(),
        true_class,
        fgsm_fallback: fgsm.fallback,
    })
}

/// Softmax over `classes` of one logit row, in the order of `classes`.
fn masked_softmax(row: &[f64], classes: &[usize]) -> Vec<f64> {
    let m = classes.iter().map(|&c| row[c]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = classes.iter().map(|&c| (row[c] - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Height of the task-restricted probability surface at `row`:
/// `p_true − max p`, never positive.
fn probability_height(row: &[f64], true_class: usize, classes: &[usize]) -> f64 {
    let p = masked_softmax(row, classes);
    let pos = classes.iter().position(|&c| c == true_class).unwrap();
    let top = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    p[pos] - top
}

/// Mean probability height over `n_perturb` uniform L∞ perturbations of `x`.
pub fn robustness_score(
    model: &MlpBackbone,
    x: &[f64],
    true_class: usize,
    task_classes: &[usize],
    n_perturb: usize,
    radius: f64,
    seed: u64,
) -> Result<f64> {
    check_member(true_class, task_classes)?;
    if n_perturb == 0 {
        return Err(Error::Config("n_perturb must be >= 1".into()));
    }
    let d = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(n_perturb * d);
    for _ in 0..n_perturb {
        for &xi in x {
            let u: f64 = rng.random();
            pts.push(xi + radius * (2.0 * u - 1.0));
        }
    }
    let logits = model.forward(&Tensor::matrix(n_perturb, d, pts)?)?;
    let total: f64 = (0..n_perturb)
        .map(|r| probability_height(logits.row(r), true_class, task_classes))
        .sum();
    Ok(total / n_perturb as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

fn class_counts(positive: &[bool]) -> Result<(usize, usize)> {
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Config(format!(
            "ROC needs both classes, got {} positives and {} negatives",
            p, n
        )));
    }
    Ok((p, n))
}

/// Area under the ROC curve via the Mann-Whitney rank statistic, with tied
/// scores sharing their average rank.
pub fn roc_auc_rank(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Config("scores and labels differ in length".into()));
    }
    let (p, n) = class_counts(positive)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p * n) as f64)
}

/// ROC points from the highest threshold down, one per distinct score.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<Vec<RocPoint>> {
    let (p, n) = class_counts(positive)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        while i < order.len() && scores[order[i]] == thr {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold: thr,
        });
    }
    Ok(pts)
}

pub fn roc_to_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    out
}

/// Neighborhood settings of the buffer-guessing probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub n_perturb: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_perturb: 32,
            radius: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GuessResult {
    pub auc: f64,
    pub roc: Vec<RocPoint>,
    pub scores: Vec<f64>,
    pub in_buffer: Vec<bool>,
}

/// Scores every first-task training example and measures how well the
/// scores separate buffer residents from the rest.
pub fn buffer_guessing_auc(
    model: &MlpBackbone,
    buffer: &[BufferEntry],
    task0_train: &Dataset,
    task0_classes: &[usize],
    probe: &ProbeConfig,
) -> Result<GuessResult> {
    let resident: HashSet<usize> = buffer.iter().map(|e| e.example_id).collect();
    let in_buffer: Vec<bool> = task0_train.ids.iter().map(|id| resident.contains(id)).collect();
    class_counts(&in_buffer)?;
    let scores = (0..task0_train.len())
        .map(|i| {
            robustness_score(
                model,
                task0_train.features.row(i),
                task0_train.labels[i],
                task0_classes,
                probe.n_perturb,
                probe.radius,
                seed::derive(probe.seed, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GuessResult {
        auc: roc_auc_rank(&scores, &in_buffer)?,
        roc: roc_curve(&scores, &in_buffer)?,
        scores,
        in_buffer,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub sigma: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
}

/// Class-IL accuracy under Gaussian weight noise scaled per layer by the
/// layer's weight standard deviation. Trial `t` reuses the same noise draw
/// for every `σ`.
pub fn weight_perturbation_robustness(
    model: &MlpBackbone,
    test: &Dataset,
    sigmas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<RobustnessPoint>> {
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Config(format!("sigma must be >= 0, got {}", s)));
    }
    let scales: Vec<f64> = model.weights().iter().map(Tensor::std).collect();
    sigmas
        .iter()
        .map(|&sigma| {
            let accs = (0..trials)
                .map(|t| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, t as u64));
                    let mut noisy = model.clone();
                    for (w, s) in noisy.weights_mut().iter_mut().zip(&scales) {
                        for v in w.data_mut() {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            *v += sigma * s * z;
                        }
                    }
                    class_il_accuracy(&noisy, test)
                })
                .collect::<Result<Vec<_>>>()?;
            // Centered on the first trial so identical accuracies average exactly.
            let mean = accs[0] + accs.iter().map(|a| a - accs[0]).sum::<f64>() / trials as f64;
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / trials as f64;
            Ok(RobustnessPoint {
                sigma,
                mean_acc: mean,
                std_acc: var.sqrt(),
            })
        })
        .collect()
}

pub fn robustness_to_csv(points: &[RobustnessPoint]) -> String {
    let mut out = String::from("sigma,mean_acc,std_acc\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.sigma, p.mean_acc, p.std_acc));
    }
    out
}
