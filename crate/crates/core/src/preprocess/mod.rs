//! Pre-processing: vocabulary, tokenization, visual feature ingestion,
//! batching, and the synthetic shape-world generator.

mod batch;
pub(crate) mod synthetic;
mod visual;
mod vocab;

pub use batch::{collate, Batch, Example};
pub use synthetic::{
    make_synthetic_dataset, shape_world, ShapeWorldOptions, ShapeWorldScene, COLORS, SHAPES,
};
pub use visual::{load_visual_features, save_visual_features, Edge, VisualTokens};
pub use vocab::{
    build_vocabulary, detokenize, read_captions, tokenize, words, write_captions, TokenSequence,
    Vocabulary, BOS, EOS, PAD, RESERVED, UNK,
};

/// Settings of the `standard` pre-processing module.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessor {
    pub max_len: usize,
    pub min_freq: usize,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self {
            max_len: 16,
            min_freq: 1,
        }
    }
}
