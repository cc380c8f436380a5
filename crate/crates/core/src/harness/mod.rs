//! Desk-scale training: byte tokenization, span-corruption pretraining,
//! synthetic-task finetuning and Adafactor.

pub mod adafactor;
pub mod corpus;
pub mod record;
pub mod span;
pub mod tasks;
pub mod tokenizer;
mod train;

pub use adafactor::{OptimState, Schedule};
pub use corpus::{markov_documents, Corpus};
pub use record::{parse_records, read_records, ResultsSink, RunRecord, RunStatus, SCHEMA_VERSION};
pub use span::{reconstruct, span_corrupt, Denoising};
pub use tasks::{sample_example, Example, Task};
pub use train::{
    eval_examples, finetune, greedy_decode, load_run, prepare_encoder_input, pretrain, run_ladder, save_run, task_accuracy,
    FinetuneOptions, PretrainOptions, RunOutputs, DIVERGENCE_LOSS, RECORD_KEY,
};
