//! Chain-of-evolution prompting for zero-shot hateful meme classification.
//!
//! The pipeline mines memes related to a target by fused text/image
//! embedding similarity, asks a large multimodal model (LMM) to summarize
//! their shared hateful trait, and then classifies the target with that
//! summary plus the dataset's hatefulness definition in the prompt.
//!
//! Modules follow the flow of a run:
//!
//! - [`corpus`]: meme records and dataset profiles
//! - [`index`]: embedding fusion, the fused index and exact top-K search
//! - [`cemb`]: the little-endian `CEMB`/`CIDX` embedding file formats
//! - [`prompt`]: template rendering for the extraction and final prompts
//! - [`lmm`]: chat-completion client, HTTP transport and scripted stub
//! - [`pipeline`]: neighbor selection, label parsing, batch runs with resume
//! - [`eval`]: accuracy, AUC, ablation and K-sweep reports

pub mod cemb;
pub mod corpus;
pub mod eval;
pub mod index;
pub mod lmm;
pub mod pipeline;
pub mod prompt;
mod template;

pub use corpus::{DatasetProfile, LabeledCorpus, MemeRecord, Split};
pub use index::{EmbeddingVector, FusedIndex, FusionConfig};
pub use pipeline::{AblationConfig, PipelineResult};
