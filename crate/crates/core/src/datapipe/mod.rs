//! Corpus ingestion, synthetic fixtures, and checkpoint persistence.

mod checkpoint;
mod corpus;
mod synth;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, write_atomic, CheckpointMeta, ModelCheckpoint, NamedTensor, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use corpus::{from_splits, load_dataset, load_split, parse_tsv, to_tsv, Dataset, Document, Split};
pub use synth::{synth_corpus, SynthSpec};
