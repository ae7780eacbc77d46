//! Category vocabularies, prompt templates, CLIP tokenization, and text
//! embedding with an on-disk cache.

pub mod bpe;
pub mod embed;
pub mod prompt;
pub mod vocab;

pub use bpe::{BpeTokenizer, TokenSequence};
pub use embed::{embed_vocabulary, TextEmbeddingMatrix};
pub use prompt::{build_prompts, PromptTemplate, OPEN_SET_PROMPT};
pub use vocab::{Category, Vocabulary, OPEN_SET_NAME};
