use std::sync::Arc;
use std::time::Duration;

use rap_core::perception::{FixtureDetector, HttpDetector, HttpEmbedder};
use rap_core::pipeline::{ChatCompletionsGenerator, HttpGenerator, PipelineSettings};
use rap_core::{
    Detector, DistanceMode, Embedder, EmbeddingVector, FixtureSet, Generator, HashEmbedder, LookupEmbedder,
    MockGenerator, Pipeline, RapError, Result, RetrievalConfig, Stage, WholeImageDetector,
};

use crate::args::{DistanceArg, GlobalArgs};
use crate::engine::{BackendNames, Engine};

/// Stands in when no embedder was configured; fails on use with a hint.
struct MissingEmbedder(usize);

impl Embedder for MissingEmbedder {
    fn embed(&self, _image: &[u8]) -> Result<EmbeddingVector> {
        Err(RapError::BackendUnavailable {
            stage: Stage::Embed,
            message: "no embedder configured; pass --embedder-url, --fixtures or --test-embedder".into(),
        })
    }

    fn dim(&self) -> usize {
        self.0
    }

    fn name(&self) -> &str {
        "none"
    }
}

pub fn retrieval_config(g: &GlobalArgs) -> RetrievalConfig {
    RetrievalConfig {
        per_region_k: g.per_region_k,
        global_k: g.global_k,
        distance_mode: match g.distance {
            DistanceArg::Euclidean => DistanceMode::Euclidean,
            DistanceArg::Cosine => DistanceMode::Cosine,
        },
        max_distance: g.max_distance,
    }
}

/// Detector, embedder and generator chosen by the flags. `dim` is the store's
/// dimension, which may differ from `--dim` for an existing store.
pub fn pipeline(g: &GlobalArgs, dim: usize) -> Result<(Pipeline, BackendNames)> {
    let timeout = Duration::from_secs(g.timeout_secs.max(1));
    let fixtures = match &g.fixtures {
        Some(p) => Some(Arc::new(FixtureSet::load(p)?)),
        None => None,
    };

    let detector: Arc<dyn Detector> = match (&g.detector_url, &fixtures) {
        (Some(url), _) => Arc::new(HttpDetector::new(url, timeout)),
        (None, Some(fx)) => Arc::new(FixtureDetector::new(Arc::clone(fx))),
        (None, None) => Arc::new(WholeImageDetector),
    };

    let embedder: Arc<dyn Embedder> = match (&g.embedder_url, &fixtures, g.test_embedder) {
        (Some(url), _, _) => Arc::new(HttpEmbedder::new(url, dim, timeout)),
        (None, Some(fx), test) => {
            let lookup = LookupEmbedder::new(Arc::clone(fx), dim);
            Arc::new(if test {
                lookup.with_fallback(Box::new(HashEmbedder::new(dim)))
            } else {
                lookup
            })
        }
        (None, None, true) => Arc::new(HashEmbedder::new(dim)),
        (None, None, false) => Arc::new(MissingEmbedder(dim)),
    };

    let generator: Arc<dyn Generator> = match (&g.generator_url, &g.chat_model) {
        (Some(url), Some(model)) => Arc::new(ChatCompletionsGenerator::new(url, model.clone(), timeout)),
        (Some(url), None) => Arc::new(HttpGenerator::new(url, timeout)),
        (None, _) => Arc::new(MockGenerator),
    };

    let names = BackendNames {
        detector: detector.name().to_string(),
        embedder: embedder.name().to_string(),
        generator: generator.name().to_string(),
    };
    let settings = PipelineSettings {
        score_threshold: g.score_threshold,
        generator_retries: g.generator_retries,
        max_concepts: g.max_concepts,
        ..Default::default()
    };
    Ok((
        Pipeline::new(detector, embedder, generator).with_settings(settings),
        names,
    ))
}

/// Opens the store directory with the configured backends.
pub fn open_engine(g: &GlobalArgs) -> Result<Engine> {
    let store = Engine::load_or_create(&g.store, g.dim)?;
    let (pipeline, names) = pipeline(g, store.dim())?;
    Engine::new(&g.store, store, pipeline, retrieval_config(g), names)
}
