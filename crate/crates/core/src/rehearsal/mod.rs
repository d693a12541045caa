pub mod buffer;
pub mod methods;

pub use buffer::{reservoir_slot, BufferDump, BufferEntry, MemoryBuffer, PoisonConfig, ReplayBatch};
pub use methods::{
    finetune_run, gdumb_fit, joint_fit, Learner, MethodConfig, MethodKind, StepLog, StreamBatch, TaskContext,
    TrainConfig,
};
