//! Optimizer, checkpoints, the two training phases and evaluation.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod trainer;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, Progress, FORMAT_VERSION, MAGIC};
pub use data::{
    build_lexicon, build_train_vocab, prepare_data, prepare_examples, tokenize_records, train_counts, Example,
    TrainingData,
};
pub use eval::{decode_all, evaluate, mean_reward, EvalContext, Evaluation};
pub use trainer::{Event, Phase1Stats, Phase2Stats, Trainer};
