//! Document corpora: ingestion, synthetic generation, tokenization.

pub mod funsd;
pub mod io;
pub mod labels;
mod lexicon;
pub mod synthetic;
pub mod tokenize;
pub mod types;

pub use funsd::{ingest_funsd, Ingested};
pub use io::{
    filter_qa_by_keywords, is_partition, read_corpus, read_manifest, select_split, write_corpus, write_manifest,
    LAYOUT_KEYWORDS,
};
pub use labels::{LabelScheme, IGNORE_INDEX};
pub use synthetic::{generate_synthetic, ClassBalance, SyntheticDomainSpec};
pub use tokenize::{ModelInput, SpecialIds, TokenizedDoc, Tokenizer, Vocab, DEFAULT_MAX_LEN, DEFAULT_PATCH_GRID};
pub use types::{normalize_box, Document, InkImage, LayoutBox, NormalizeStats, QaPair, Word, GRID};
