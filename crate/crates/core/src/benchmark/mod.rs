pub mod metrics;
pub mod runner;
pub mod stream;

pub use metrics::{class_il_accuracy, faa, ff, task_il_accuracy, AccuracyMatrix};
pub use runner::{run_experiment, RunLog, RunResult, TaskSnapshot};
pub use stream::{load_csv_stream, make_synthetic_stream, parse_csv_stream, Dataset, SyntheticSpec, Task, TaskStream};
