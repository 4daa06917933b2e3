//! Synthetic four-scenario news-video corpus.

mod corpus;
mod jsonl;
pub mod prompt;
mod split;


pub use corpus::{apply_manipulation, generate_corpus, Corpus, CorpusSpec, Label, Manipulation, Sample};
pub use jsonl::{corpus_from_str, corpus_to_string, load_corpus, serialize_corpus};
pub use prompt::assemble_prompt;
pub use split::{chronological_split, default_split, Splits};
