//! Sequential training over a task stream with per-task evaluation.

use serde::{Deserialize, Serialize};

use crate::backbone::MlpBackbone;
use crate::benchmark::metrics::{class_il_accuracy, task_il_accuracy, AccuracyMatrix};
use crate::benchmark::stream::TaskStream;
use crate::error::{Error, Result};
use crate::lider::LiderConfig;
use crate::rehearsal::buffer::{BufferDump, BufferEntry};
use crate::rehearsal::methods::{
    gdumb_fit, merge_tasks, Learner, MethodConfig, MethodKind, StepLog, TaskContext, TrainConfig,
};
use crate::seed;
use crate::spectral::model_layer_estimates;

/// Model and buffer state at the end of one task.
#[derive(Clone, Debug)]
pub struct TaskSnapshot {
    pub task: usize,
    pub model: MlpBackbone,
    pub buffer: BufferDump,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepLog>,
    /// Per task: product of the layer estimates on the seen test sets.
    pub lipschitz_products: Vec<f64>,
    pub layer_estimates: Vec<Vec<f64>>,
    pub lider_skipped_steps: usize,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub class_il: AccuracyMatrix,
    pub task_il: AccuracyMatrix,
    pub log: RunLog,
    pub model: MlpBackbone,
    pub buffer: Vec<BufferEntry>,
    pub targets: Option<Vec<f64>>,
    pub snapshots: Vec<TaskSnapshot>,
}

impl RunResult {
    pub fn final_lipschitz_product(&self) -> f64 {
        self.log.lipschitz_products.last().copied().unwrap_or(f64::NAN)
    }
}

fn dump(learner: &Learner) -> BufferDump {
    BufferDump {
        capacity: learner.buffer.capacity(),
        seen: learner.buffer.seen(),
        entries: learner.buffer.entries().to_vec(),
    }
}

/// Trains `method` over the tasks of `stream` in order and evaluates every
/// seen task after each one, in class-IL and task-IL mode.
pub fn run_experiment(
    stream: &TaskStream,
    method: &MethodConfig,
    lider: Option<&LiderConfig>,
    train: &TrainConfig,
    run_seed: u64,
) -> Result<RunResult> {
    stream.validate()?;
    if stream.tasks.is_empty() {
        return Err(Error::Empty("stream has no tasks".into()));
    }
    let dims = train.layer_dims(stream.dim, stream.num_classes);
    let model = MlpBackbone::new(&dims, seed::derive(run_seed, seed::MODEL_INIT))?;
    let mut learner = Learner::new(model, method.clone(), lider.cloned(), train.clone(), run_seed)?;
    let n = stream.n_tasks();
    let mut class_il = AccuracyMatrix::new(n);
    let mut task_il = AccuracyMatrix::new(n);
    let mut log = RunLog::default();
    let mut snapshots = Vec::with_capacity(n);
    let eval_seed = seed::derive(run_seed, seed::EVAL);

    if method.kind == MethodKind::Joint {
        let merged = merge_tasks(&stream.tasks)?;
        let ctx = TaskContext {
            task_id: 0,
            classes: merged.classes.clone(),
            seen_classes: merged.classes.clone(),
        };
        log.steps = learner.train_on_task(&merged, &ctx)?;
        let est = model_layer_estimates(&learner.model, &stream.test_union(n - 1)?.features, train.eval_power_iters, eval_seed)?;
        for (i, task) in stream.tasks.iter().enumerate() {
            let cil = class_il_accuracy(&learner.model, &task.test)?;
            let til = task_il_accuracy(&learner.model, &task.test, &task.classes)?;
            for t in i..n {
                class_il.set(i, t, cil)?;
                task_il.set(i, t, til)?;
            }
        }
        for t in 0..n {
            log.lipschitz_products.push(est.iter().product());
            log.layer_estimates.push(est.clone());
            snapshots.push(TaskSnapshot {
                task: t,
                model: learner.model.clone(),
                buffer: dump(&learner),
            });
        }
    } else {
        let mut seen = Vec::new();
        for (t, task) in stream.tasks.iter().enumerate() {
            seen.extend_from_slice(&task.classes);
            let ctx = TaskContext {
                task_id: t,
                classes: task.classes.clone(),
                seen_classes: seen.clone(),
            };
            let mut steps = learner.train_on_task(task, &ctx)?;
            if method.kind == MethodKind::Gdumb && !learner.buffer.is_empty() {
                let (model, fit_logs) = gdumb_fit(
                    learner.buffer.entries(),
                    &dims,
                    train,
                    method.gdumb.fit_epochs,
                    lider,
                    seed::derive(run_seed, seed::GDUMB),
                )?;
                learner.model = model;
                steps.extend(fit_logs.into_iter().map(|mut l| {
                    l.task = t;
                    l
                }));
            }
            log.steps.extend(steps);

            for (i, past) in stream.tasks[..=t].iter().enumerate() {
                class_il.set(i, t, class_il_accuracy(&learner.model, &past.test)?)?;
                task_il.set(i, t, task_il_accuracy(&learner.model, &past.test, &past.classes)?)?;
            }
            let est = model_layer_estimates(
                &learner.model,
                &stream.test_union(t)?.features,
                train.eval_power_iters,
                eval_seed,
            )?;
            log.lipschitz_products.push(est.iter().product());
            log.layer_estimates.push(est);
            snapshots.push(TaskSnapshot {
                task: t,
                model: learner.model.clone(),
                buffer: dump(&learner),
            });
        }
    }
    log.lider_skipped_steps = log.steps.iter().filter(|s| s.lider_skipped).count();
    Ok(RunResult {
        class_il,
        task_il,
        log,
        buffer: learner.buffer.entries().to_vec(),
        targets: learner.lider.as_ref().map(|r| r.targets.values().to_vec()),
        model: learner.model,
        snapshots,
    })
}
