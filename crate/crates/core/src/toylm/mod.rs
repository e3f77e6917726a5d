//! Desk-scale decoder-only transformer that exposes per-layer last-token
//! states, so the probing pipeline can run end to end without a large
//! pretrained model.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod export;
pub mod kernels;
pub mod model;
pub mod train;
pub mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{AnswerOrder, CorpusConfig, ToyLmConfig};
pub use export::export_activations;
pub use decode::{generate_answer, teacher_forced_correct, GeneratedAnswer};
pub use model::{Example, ForwardCache, LayerStates, ToyLm};
pub use train::{addition_corpus, exact_match_rate, train, train_with_progress, Corpus, TrainLogEntry, TrainOutcome};
pub use vocab::Vocab;
