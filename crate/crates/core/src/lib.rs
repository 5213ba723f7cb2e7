//! Retrieval-augmented personalization: a user-editable concept database,
//! exact nearest-neighbour retrieval over it, and prompt assembly that puts
//! the retrieved concepts in front of a multimodal generator.

pub mod datagen;
pub mod embedding;
pub mod error;
pub mod eval;
mod http;
pub mod names;
pub mod perception;
pub mod pipeline;
pub mod retriever;
pub mod store;

pub use embedding::{distance, normalize, DistanceMode, EmbeddingVector, DEFAULT_DIM};
pub use error::{RapError, Result, Stage};
pub use http::DEFAULT_TIMEOUT;
pub use names::Delimiters;
pub use perception::{
    BoundingBox, Detector, Embedder, FixtureSet, HashEmbedder, ImageInput, LookupEmbedder, QueryInput,
    RegionOfInterest, WholeImageDetector,
};
pub use pipeline::{AugmentedPrompt, GenerationOutcome, Generator, MockGenerator, Pipeline, PromptSegment, Provenance};
pub use retriever::{knn, retrieve_by_names, retrieve_for_regions, RetrievalConfig, RetrievalHit};
pub use store::{ConceptRecord, ConceptStore, ConceptUpdate, NewConcept, StoreSnapshot};
