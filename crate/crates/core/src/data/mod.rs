//! Ingestion: preprocessing, vocabularies, dialog flattening, IOB slot tags
//! and fixed-size ID encoding.

mod dataset;
mod dialog;
mod preprocess;
pub mod vocab;

pub use dataset::{
    encode_all, encode_example, encode_tokens, load_dataset, parse_dataset, prepare, prepare_all, split,
    vocab_corpus, ClassificationRecord, DatasetKind, DialogRecord, EncodedExample, GenerationRecord,
    LabelSet, LabelingRecord, Limits, Prepared, PreparedTarget, RawRecord, TaskKind, Target,
};
pub use dialog::{flatten_dialog, iob_encode, is_valid_iob, Speaker, Turn};
pub use preprocess::{preprocess_text, Preprocessor, MARKERS};
pub use vocab::Vocab;
