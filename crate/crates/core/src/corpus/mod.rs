//! Text processing, file formats and the synthetic corpus.

pub mod io;
pub mod synth;
pub mod text;

pub use io::{
    load_dataset, load_features, load_split, read_features_raw, read_jsonl, save_features, save_split, write_jsonl,
    DatasetRecord, FeatureRecord, SplitSpec,
};
pub use synth::{synthesize_dataset, SynthDataset, SynthSpec};
pub use text::{build_vocab, render, token_counts, tokenize, vocab_from_counts};
