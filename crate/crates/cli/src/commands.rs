//! Subcommand implementations. Every file is written below the output root.

use std::fs;
use std::path::{Path, PathBuf};

use lider_core::analysis::{
    buffer_guessing_auc, decision_surface, robustness_to_csv, roc_to_csv, weight_perturbation_robustness,
};
use lider_core::backbone::MlpBackbone;
use lider_core::benchmark::{faa, ff, run_experiment, AccuracyMatrix, RunResult, TaskStream};
use lider_core::lider::LiderConfig;
use lider_core::rehearsal::{BufferDump, MethodConfig, StepLog};
use lider_core::seed;
use lider_core::spectral::model_layer_estimates;
use lider_core::Error as CoreError;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// File names inside each per-task snapshot directory.
pub const MODEL_FILE: &str = "model.json";
pub const BUFFER_FILE: &str = "buffer.json";

/// Core failures after a run has started: configuration mistakes the
/// validator could not see keep exit code 2, everything else is a runtime
/// failure.
fn classify(e: CoreError) -> CliError {
    match e {
        CoreError::Config(_) | CoreError::Parse { .. } => CliError::config(e),
        _ => CliError::runtime(e),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {}", dir.display(), e)))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {}", path.display(), e)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    text.push('\n');
    write(path, text)
}

/// One (method, seed) run.
#[derive(Clone, Debug)]
pub struct Cell {
    pub label: String,
    pub method: MethodConfig,
    pub lider: Option<LiderConfig>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub label: String,
    pub method: String,
    pub lider: bool,
    pub seed: u64,
    pub faa_class_il: f64,
    /// Absent for single-task streams, where forgetting is undefined.
    pub ff_class_il: Option<f64>,
    pub faa_task_il: f64,
    pub ff_task_il: Option<f64>,
    pub lipschitz_products: Vec<f64>,
    pub layer_estimates: Vec<Vec<f64>>,
    pub lider_skipped_steps: usize,
    pub final_targets: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelMean {
    pub label: String,
    pub faa_class_il: f64,
    pub ff_class_il: Option<f64>,
    pub faa_task_il: f64,
    pub ff_task_il: Option<f64>,
    pub final_lipschitz_product: f64,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    config: &'a ExperimentConfig,
    cells: &'a [CellSummary],
    means: Vec<LabelMean>,
}

pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for entry in &cfg.methods {
        for &s in &cfg.seeds {
            out.push(Cell {
                label: entry.label(),
                method: cfg.method_config(entry),
                lider: cfg.lider_for(entry),
                seed: s,
            });
        }
    }
    out
}

fn steps_csv(steps: &[StepLog]) -> String {
    let mut out = String::from("task,epoch,step,stream_loss,replay_loss,lider_loss,lider_skipped,total_loss\n");
    for s in steps {
        let lider = s.lider_loss.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.task, s.epoch, s.step, s.stream_loss, s.replay_loss, lider, s.lider_skipped, s.total_loss
        ));
    }
    out
}

fn summarize(cell: &Cell, res: &RunResult) -> CliResult<CellSummary> {
    let metric = |m: &AccuracyMatrix| -> CliResult<(f64, Option<f64>)> {
        let forgetting = if m.n_tasks() >= 2 {
            Some(ff(m).map_err(classify)?)
        } else {
            None
        };
        Ok((faa(m).map_err(classify)?, forgetting))
    };
    let (faa_c, ff_c) = metric(&res.class_il)?;
    let (faa_t, ff_t) = metric(&res.task_il)?;
    Ok(CellSummary {
        label: cell.label.clone(),
        method: cell.method.kind.name().to_string(),
        lider: cell.lider.is_some(),
        seed: cell.seed,
        faa_class_il: faa_c,
        ff_class_il: ff_c,
        faa_task_il: faa_t,
        ff_task_il: ff_t,
        lipschitz_products: res.log.lipschitz_products.clone(),
        layer_estimates: res.log.layer_estimates.clone(),
        lider_skipped_steps: res.log.lider_skipped_steps,
        final_targets: res.targets.clone(),
    })
}

pub fn cell_dir(root: &Path, label: &str, seed: u64) -> PathBuf {
    root.join(label).join(format!("seed_{}", seed))
}

fn run_cell(cfg: &ExperimentConfig, cell: &Cell, root: &Path) -> CliResult<CellSummary> {
    let stream = cfg.build_stream(cell.seed)?;
    let res = run_experiment(&stream, &cell.method, cell.lider.as_ref(), &cfg.train, cell.seed).map_err(classify)?;
    let dir = cell_dir(root, &cell.label, cell.seed);
    write(&dir.join("class_il.csv"), res.class_il.to_csv())?;
    write(&dir.join("task_il.csv"), res.task_il.to_csv())?;
    write(&dir.join("steps.csv"), steps_csv(&res.log.steps))?;
    for snap in &res.snapshots {
        let task_dir = dir.join(format!("task_{}", snap.task));
        write(&task_dir.join(MODEL_FILE), snap.model.to_json().map_err(classify)?)?;
        write_json(&task_dir.join(BUFFER_FILE), &snap.buffer)?;
    }
    let summary = summarize(cell, &res)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    v.collect::<Option<Vec<f64>>>().map(|xs| mean(xs.into_iter()))
}

pub fn label_means(summaries: &[CellSummary]) -> Vec<LabelMean> {
    let mut labels: Vec<&str> = Vec::new();
    for s in summaries {
        if !labels.contains(&s.label.as_str()) {
            labels.push(&s.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let group = || summaries.iter().filter(move |s| s.label == label);
            LabelMean {
                label: label.to_string(),
                faa_class_il: mean(group().map(|s| s.faa_class_il)),
                ff_class_il: mean_opt(group().map(|s| s.ff_class_il)),
                faa_task_il: mean(group().map(|s| s.faa_task_il)),
                ff_task_il: mean_opt(group().map(|s| s.ff_task_il)),
                final_lipschitz_product: mean(group().map(|s| s.lipschitz_products.last().copied().unwrap_or(f64::NAN))),
            }
        })
        .collect()
}

fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(CliError::config("--jobs must be >= 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(CliError::runtime)
}

/// Runs every (method, seed) cell of `cfg` into `root` and writes the
/// aggregate `summary.json`. Cell order in the summary follows the config.
pub fn run_into(cfg: &ExperimentConfig, root: &Path, jobs: usize) -> CliResult<Vec<CellSummary>> {
    let cells = cells(cfg);
    let results: Vec<CliResult<CellSummary>> =
        pool(jobs)?.install(|| cells.par_iter().map(|c| run_cell(cfg, c, root)).collect());
    let summaries = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    write_json(
        &root.join("summary.json"),
        &RunSummary {
            config: cfg,
            cells: &summaries,
            means: label_means(&summaries),
        },
    )?;
    Ok(summaries)
}

pub fn run(mut cfg: ExperimentConfig, seeds: Option<Vec<u64>>, jobs: usize, out: Option<&Path>) -> CliResult<PathBuf> {
    if let Some(s) = seeds {
        if s.is_empty() {
            return Err(CliError::config("--seeds needs at least one value"));
        }
        cfg.seeds = s;
    }
    let root = cfg.output_root(out);
    run_into(&cfg, &root, jobs)?;
    Ok(root)
}

fn check_grid(name: &str, values: &[f64], upper: Option<f64>) -> CliResult<()> {
    if values.is_empty() {
        return Err(CliError::Config(format!("--{} needs at least one value", name)));
    }
    for &v in values {
        let ok = v >= 0.0 && v.is_finite() && upper.is_none_or(|u| v <= u);
        if !ok {
            return Err(CliError::Config(format!("--{}: value {} out of range", name, v)));
        }
    }
    Ok(())
}

/// Mean-centered grid: `faa[a][b] − mean(faa)`.
pub fn delta_matrix(faa: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = faa.iter().map(Vec::len).sum::<usize>() as f64;
    let m = faa.iter().flatten().sum::<f64>() / n;
    faa.iter().map(|row| row.iter().map(|v| v - m).collect()).collect()
}

pub fn grid_csv(alphas: &[f64], betas: &[f64], values: &[Vec<f64>]) -> String {
    let mut out = String::from("alpha\\beta");
    for b in betas {
        out.push_str(&format!(",{}", b));
    }
    out.push('\n');
    for (a, row) in alphas.iter().zip(values) {
        out.push_str(&a.to_string());
        for v in row {
            out.push_str(&format!(",{}", v));
        }
        out.push('\n');
    }
    out
}

pub fn sweep_cell_dir(root: &Path, alpha: f64, beta: f64) -> PathBuf {
    root.join(format!("alpha_{}_beta_{}", alpha, beta))
}

/// One full run per (α, β) pair, applied to every regularized method, and a
/// delta matrix of class-IL FAA per regularized label.
pub fn sweep(
    mut cfg: ExperimentConfig,
    alphas: &[f64],
    betas: &[f64],
    seeds: Option<Vec<u64>>,
    jobs: usize,
    out: Option<&Path>,
) -> CliResult<PathBuf> {
    check_grid("alpha", alphas, None)?;
    check_grid("beta", betas, None)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    let labels: Vec<String> = cfg.methods.iter().filter(|m| m.lider).map(|m| m.label()).collect();
    if labels.is_empty() {
        return Err(CliError::config("sweep needs at least one method with lider = true"));
    }
    let root = cfg.output_root(out);
    // faa[label][a][b]
    let mut grids = vec![vec![vec![0.0; betas.len()]; alphas.len()]; labels.len()];
    for (ai, &a) in alphas.iter().enumerate() {
        for (bi, &b) in betas.iter().enumerate() {
            let mut cell_cfg = cfg.clone();
            cell_cfg.lider.alpha = a;
            cell_cfg.lider.beta = b;
            for entry in &mut cell_cfg.methods {
                if let Some(l) = entry.lider_config.as_mut() {
                    l.alpha = a;
                    l.beta = b;
                }
            }
            let summaries = run_into(&cell_cfg, &sweep_cell_dir(&root, a, b), jobs)?;
            let means = label_means(&summaries);
            for (li, label) in labels.iter().enumerate() {
                grids[li][ai][bi] = means.iter().find(|m| &m.label == label).map(|m| m.faa_class_il).unwrap();
            }
        }
    }
    for (label, grid) in labels.iter().zip(&grids) {
        write(&root.join(format!("sweep_faa_{}.csv", label)), grid_csv(alphas, betas, grid))?;
        write(
            &root.join(format!("sweep_delta_{}.csv", label)),
            grid_csv(alphas, betas, &delta_matrix(grid)),
        )?;
    }
    Ok(root)
}

pub fn poison_cell_dir(root: &Path, p: f64) -> PathBuf {
    root.join(format!("p_{}", p))
}

/// One full run per poisoning probability; `poison.csv` holds the mean
/// class-IL FAA of every label per row.
pub fn poison(
    mut cfg: ExperimentConfig,
    ps: &[f64],
    seeds: Option<Vec<u64>>,
    jobs: usize,
    out: Option<&Path>,
) -> CliResult<PathBuf> {
    check_grid("p", ps, Some(1.0))?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    let root = cfg.output_root(out);
    let labels: Vec<String> = cfg.methods.iter().map(|m| m.label()).collect();
    let mut csv = String::from("p");
    for l in &labels {
        csv.push_str(&format!(",{}", l));
    }
    csv.push('\n');
    for &p in ps {
        let mut cell_cfg = cfg.clone();
        cell_cfg.buffer.poison_p = p;
        let means = label_means(&run_into(&cell_cfg, &poison_cell_dir(&root, p), jobs)?);
        csv.push_str(&p.to_string());
        for m in &means {
            csv.push_str(&format!(",{}", m.faa_class_il));
        }
        csv.push('\n');
    }
    write(&root.join("poison.csv"), csv)?;
    Ok(root)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalysisKind {
    Surface,
    Guess,
    Perturb,
    Lipschitz,
}

impl std::str::FromStr for AnalysisKind {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "surface" => Ok(Self::Surface),
            "guess" => Ok(Self::Guess),
            "perturb" => Ok(Self::Perturb),
            "lipschitz" => Ok(Self::Lipschitz),
            other => Err(CliError::Config(format!(
                "unknown analysis kind `{}` (expected surface, guess, perturb or lipschitz)",
                other
            ))),
        }
    }
}

fn load_model(path: &Path, stream: &TaskStream) -> CliResult<MlpBackbone> {
    let model = MlpBackbone::load_json(path)
        .map_err(|e| CliError::Config(format!("cannot load checkpoint {}: {}", path.display(), e)))?;
    if model.input_dim() != stream.dim || model.num_classes() != stream.num_classes {
        return Err(CliError::Config(format!(
            "checkpoint {} expects {} inputs and {} classes, the stream has {} and {}",
            path.display(),
            model.input_dim(),
            model.num_classes(),
            stream.dim,
            stream.num_classes
        )));
    }
    Ok(model)
}

/// Runs one analysis on a saved checkpoint. The stream is rebuilt from the
/// config with `seed`, which must match the seed of the run that produced the
/// checkpoint.
pub fn analyze(
    cfg: &ExperimentConfig,
    kind: AnalysisKind,
    checkpoint: &Path,
    seed_override: Option<u64>,
    out: Option<&Path>,
) -> CliResult<PathBuf> {
    let run_seed = seed_override.unwrap_or(cfg.seeds[0]);
    let stream = cfg.build_stream(run_seed)?;
    let model = load_model(checkpoint, &stream)?;
    let a = &cfg.analysis;
    let root = cfg.output_root(out);
    match kind {
        AnalysisKind::Surface => {
            let task = stream
                .tasks
                .get(a.point_task)
                .ok_or_else(|| CliError::Config(format!("analysis.point_task {} out of range", a.point_task)))?;
            if a.point_index >= task.test.len() {
                return Err(CliError::Config(format!(
                    "analysis.point_index {} out of range",
                    a.point_index
                )));
            }
            let mask = a.restrict_to_task.then_some(task.classes.as_slice());
            let grid = decision_surface(
                &model,
                task.test.features.row(a.point_index),
                task.test.labels[a.point_index],
                a.surface_radius,
                a.grid_size,
                a.seed,
                mask,
            )
            .map_err(classify)?;
            write(&root.join("surface.csv"), grid.to_csv())?;
        }
        AnalysisKind::Guess => {
            let buffer_path = checkpoint.with_file_name(BUFFER_FILE);
            let text = fs::read_to_string(&buffer_path).map_err(|e| {
                CliError::Config(format!("guess needs a buffer dump at {}: {}", buffer_path.display(), e))
            })?;
            let dump = BufferDump::from_json(&text)
                .map_err(|e| CliError::Config(format!("{}: {}", buffer_path.display(), e)))?;
            let first = &stream.tasks[0];
            let res = buffer_guessing_auc(&model, &dump.entries, &first.train, &first.classes, &a.probe)
                .map_err(classify)?;
            write(&root.join("roc.csv"), roc_to_csv(&res.roc))?;
            write_json(&root.join("guess.json"), &serde_json::json!({ "auc": res.auc }))?;
        }
        AnalysisKind::Perturb => {
            let test = stream.test_union(stream.n_tasks() - 1).map_err(classify)?;
            let pts = weight_perturbation_robustness(&model, &test, &a.sigmas, a.trials, a.seed).map_err(classify)?;
            write(&root.join("perturb.csv"), robustness_to_csv(&pts))?;
        }
        AnalysisKind::Lipschitz => {
            let test = stream.test_union(stream.n_tasks() - 1).map_err(classify)?;
            let est = model_layer_estimates(
                &model,
                &test.features,
                cfg.train.eval_power_iters,
                seed::derive(run_seed, seed::EVAL),
            )
            .map_err(classify)?;
            let mut csv = String::from("layer,lambda\n");
            for (k, l) in est.iter().enumerate() {
                csv.push_str(&format!("{},{}\n", k, l));
            }
            csv.push_str(&format!("product,{}\n", est.iter().product::<f64>()));
            write(&root.join("lipschitz.csv"), csv)?;
        }
    }
    Ok(root)
}
