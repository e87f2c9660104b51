//! Dataset generation, the offline trainer with kernel-selected negatives,
//! and its batched-online variant that regenerates data from the current
//! policy between segments.

mod dataset;
mod trainer;

pub use dataset::{
    generate_dataset, generate_dataset_with, judge_best, read_jsonl, write_jsonl, Judge, NoiseSpec,
    PreferenceRecord, RankedCandidate,
};
pub use trainer::{
    online_segment_seed, sgd_step, train_offline, train_online, write_trace_csv, EpochStats, KernelCadence,
    OnlineSettings, TraceRow, TrainConfig, TrainContext, TrainTrace, DIVERGENCE_GRAD_NORM, TRACE_HEADER,
};
