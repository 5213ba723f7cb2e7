//! Remember → Retrieve → Generate.
//!
//! [`Pipeline::answer_query`] detects regions of interest in the user image,
//! embeds each crop, pools per-region nearest neighbours, adds concepts named
//! in the instruction text, and hands the assembled prompt to a [`Generator`].

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{RapError, Result, Stage};
use crate::http::JsonClient;
use crate::perception::{self, crop, embed_image, Detector, Embedder, QueryInput, DEFAULT_SCORE_THRESHOLD};
use crate::retriever::{retrieve_by_names, retrieve_for_regions, RetrievalConfig};
use crate::store::{ConceptRecord, ConceptStore, NewConcept, StoreSnapshot};

const RECOGNITION_PREFIX: &str = "Is ";
const RECOGNITION_SUFFIX: &str = " in the image? Answer with a single word.";
const CONCEPT_TAG_OPEN: &str = "<concept name=";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    ImageRef,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSegment {
    pub kind: SegmentKind,
    pub payload: String,
}

impl PromptSegment {
    pub fn image(payload: impl Into<String>) -> Self {
        Self {
            kind: SegmentKind::ImageRef,
            payload: payload.into(),
        }
    }

    pub fn text(payload: impl Into<String>) -> Self {
        Self {
            kind: SegmentKind::Text,
            payload: payload.into(),
        }
    }
}

/// Generator input: one image + one text segment per concept, then the
/// user's image and instruction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedPrompt {
    pub segments: Vec<PromptSegment>,
    pub concept_order: Vec<String>,
}

impl AugmentedPrompt {
    /// The user's instruction, i.e. the last text segment that is not a concept tag.
    pub fn instruction(&self) -> Option<&str> {
        let skip = self.concept_order.len() * 2;
        self.segments
            .iter()
            .skip(skip)
            .rev()
            .find(|s| s.kind == SegmentKind::Text)
            .map(|s| s.payload.as_str())
    }

    /// `(name, description)` of each injected concept, in order.
    pub fn concepts(&self) -> Vec<(&str, &str)> {
        self.segments
            .iter()
            .take(self.concept_order.len() * 2)
            .filter(|s| s.kind == SegmentKind::Text)
            .filter_map(|s| parse_concept_text(&s.payload))
            .collect()
    }
}

pub fn concept_text(name: &str, description: &str) -> String {
    if description.is_empty() {
        format!("{CONCEPT_TAG_OPEN}{name}/>")
    } else {
        format!("{CONCEPT_TAG_OPEN}{name}>{description}</concept>")
    }
}

fn parse_concept_text(text: &str) -> Option<(&str, &str)> {
    let rest = text.strip_prefix(CONCEPT_TAG_OPEN)?;
    if let Some(name) = rest.strip_suffix("/>") {
        if !name.contains('>') {
            return Some((name, ""));
        }
    }
    let (name, tail) = rest.split_once('>')?;
    let desc = tail.strip_suffix("</concept>")?;
    Some((name, desc))
}

pub fn assemble_prompt(concepts: &[&ConceptRecord], query: &QueryInput) -> AugmentedPrompt {
    let mut segments = Vec::with_capacity(concepts.len() * 2 + 2);
    let mut concept_order = Vec::with_capacity(concepts.len());
    for c in concepts {
        segments.push(PromptSegment::image(c.image_ref.clone()));
        segments.push(PromptSegment::text(concept_text(&c.name, &c.description)));
        concept_order.push(c.id.clone());
    }
    if let Some(img) = &query.image {
        segments.push(PromptSegment::image(img.data_uri()));
    }
    if !query.text.is_empty() {
        segments.push(PromptSegment::text(query.text.clone()));
    }
    AugmentedPrompt {
        segments,
        concept_order,
    }
}

/// `Is NAME in the image? Answer with a single word.`
pub fn recognition_prompt(concept_name: &str) -> Result<String> {
    if concept_name.is_empty() {
        return Err(RapError::InvalidInput("recognition prompt needs a concept name".into()));
    }
    Ok(format!("{RECOGNITION_PREFIX}{concept_name}{RECOGNITION_SUFFIX}"))
}

/// Inverse of [`recognition_prompt`].
pub fn parse_recognition_prompt(text: &str) -> Option<&str> {
    text.strip_prefix(RECOGNITION_PREFIX)?
        .strip_suffix(RECOGNITION_SUFFIX)
        .filter(|n| !n.is_empty())
}

pub trait Generator: Send + Sync {
    fn generate(&self, prompt: &AugmentedPrompt) -> Result<String>;

    fn name(&self) -> &str;
}

/// Deterministic generator for tests and offline runs.
///
/// Replies `CAPTION: ` plus the injected concept names joined by `, `. A
/// recognition instruction adds `ANSWER: yes|no` depending on whether the
/// named concept was injected; concepts named in the instruction add an
/// `INFO: NAME: DESCRIPTION` line.
#[derive(Debug, Clone, Default)]
pub struct MockGenerator;

impl Generator for MockGenerator {
    fn generate(&self, prompt: &AugmentedPrompt) -> Result<String> {
        let concepts = prompt.concepts();
        let names: Vec<&str> = concepts.iter().map(|(n, _)| *n).collect();
        let mut reply = format!("CAPTION: {}", names.join(", "));
        let instruction = prompt.instruction().unwrap_or("");
        if let Some(target) = parse_recognition_prompt(instruction) {
            let answer = if names.contains(&target) { "yes" } else { "no" };
            reply.push_str("\nANSWER: ");
            reply.push_str(answer);
        }
        for (name, desc) in &concepts {
            if !desc.is_empty() && instruction.contains(name) {
                reply.push_str(&format!("\nINFO: {name}: {desc}"));
            }
        }
        Ok(reply)
    }

    fn name(&self) -> &str {
        "mock"
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    segments: &'a [PromptSegment],
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

/// `POST /generate` with the raw segment list.
#[derive(Debug, Clone)]
pub struct HttpGenerator {
    client: JsonClient,
}

impl HttpGenerator {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        Self {
            client: JsonClient::new(perception::endpoint(base_url, "generate"), Stage::Generate, timeout),
        }
    }
}

impl Generator for HttpGenerator {
    fn generate(&self, prompt: &AugmentedPrompt) -> Result<String> {
        let resp: GenerateResponse = self.client.post(&GenerateRequest {
            segments: &prompt.segments,
        })?;
        Ok(resp.text)
    }

    fn name(&self) -> &str {
        "http"
    }
}

/// OpenAI-style `chat/completions` adapter: the whole prompt becomes one user
/// message with `image_url` and `text` parts.
#[derive(Debug, Clone)]
pub struct ChatCompletionsGenerator {
    client: JsonClient,
    model: String,
    /// Concept `image_ref`s that are plain paths are inlined as data URIs
    /// relative to this directory.
    image_root: Option<PathBuf>,
}

impl ChatCompletionsGenerator {
    pub fn new(base_url: &str, model: impl Into<String>, timeout: Duration) -> Self {
        Self {
            client: JsonClient::new(
                perception::endpoint(base_url, "chat/completions"),
                Stage::Generate,
                timeout,
            ),
            model: model.into(),
            image_root: None,
        }
    }

    pub fn with_image_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.image_root = Some(root.into());
        self
    }

    fn image_url(&self, payload: &str) -> Result<String> {
        if payload.starts_with("data:") || payload.starts_with("http://") || payload.starts_with("https://") {
            return Ok(payload.to_string());
        }
        let Some(root) = &self.image_root else {
            return Ok(payload.to_string());
        };
        let bytes = std::fs::read(root.join(payload))?;
        Ok(format!(
            "data:{};base64,{}",
            perception::sniff_media_type(&bytes),
            base64::engine::general_purpose::STANDARD.encode(&bytes)
        ))
    }

    pub fn to_messages(&self, prompt: &AugmentedPrompt) -> Result<serde_json::Value> {
        let parts = prompt
            .segments
            .iter()
            .map(|s| {
                Ok(match s.kind {
                    SegmentKind::Text => serde_json::json!({"type": "text", "text": s.payload}),
                    SegmentKind::ImageRef => {
                        serde_json::json!({"type": "image_url", "image_url": {"url": self.image_url(&s.payload)?}})
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(serde_json::json!([{"role": "user", "content": parts}]))
    }
}

impl Generator for ChatCompletionsGenerator {
    fn generate(&self, prompt: &AugmentedPrompt) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": self.to_messages(prompt)?,
        });
        let resp: serde_json::Value = self.client.post(&body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| RapError::malformed(Stage::Generate, "missing choices[0].message.content"))
    }

    fn name(&self) -> &str {
        "chat_completions"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitSource {
    Visual,
    Name,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub concept_id: String,
    /// Pooled visual distance; `None` for concepts found only by name.
    pub distance: Option<f64>,
    pub source: HitSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_index: Option<usize>,
}

/// Milliseconds spent per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub detect_ms: f64,
    pub embed_ms: f64,
    pub retrieve_ms: f64,
    pub generate_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub text: String,
    pub provenance: Vec<Provenance>,
    pub prompt: AugmentedPrompt,
    pub timing: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSettings {
    pub score_threshold: f64,
    /// Generator retries after a backend failure; clamped to 2.
    pub generator_retries: u32,
    pub retry_backoff_ms: u64,
    /// Upper bound on injected concepts. Name hits are never dropped.
    pub max_concepts: Option<usize>,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            generator_retries: 0,
            retry_backoff_ms: 200,
            max_concepts: None,
        }
    }
}

/// Store-independent backends plus settings. Cheap to clone; share across threads.
#[derive(Clone)]
pub struct Pipeline {
    pub detector: Arc<dyn Detector>,
    pub embedder: Arc<dyn Embedder>,
    pub generator: Arc<dyn Generator>,
    pub settings: PipelineSettings,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

impl Pipeline {
    pub fn new(detector: Arc<dyn Detector>, embedder: Arc<dyn Embedder>, generator: Arc<dyn Generator>) -> Self {
        Self {
            detector,
            embedder,
            generator,
            settings: PipelineSettings::default(),
        }
    }

    pub fn with_settings(mut self, settings: PipelineSettings) -> Self {
        self.settings = settings;
        self
    }

    /// Embeds `image` and stores it as a new concept.
    pub fn remember(
        &self,
        store: &mut ConceptStore,
        image: &[u8],
        name: &str,
        category: &str,
        description: &str,
        image_ref: &str,
    ) -> Result<ConceptRecord> {
        let embedding = embed_image(self.embedder.as_ref(), image, store.dim())?;
        store.add_concept(NewConcept {
            name: name.to_string(),
            category: category.to_string(),
            description: description.to_string(),
            image_ref: image_ref.to_string(),
            embedding,
        })
    }

    fn embed_regions(
        &self,
        image: &[u8],
        regions: &[perception::RegionOfInterest],
        dim: usize,
    ) -> Result<Vec<EmbeddingVector>> {
        regions
            .par_iter()
            .map(|r| {
                let c = crop(image, &r.bbox)?;
                embed_image(self.embedder.as_ref(), &c, dim)
            })
            .collect()
    }

    fn generate_with_retry(&self, prompt: &AugmentedPrompt) -> Result<String> {
        let retries = self.settings.generator_retries.min(2);
        let mut attempt = 0;
        loop {
            match self.generator.generate(prompt) {
                Err(e @ RapError::BackendUnavailable { .. }) if attempt < retries => {
                    log::warn!("generator attempt {} failed: {e}", attempt + 1);
                    std::thread::sleep(Duration::from_millis(self.settings.retry_backoff_ms << attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    pub fn answer_query(
        &self,
        snapshot: &StoreSnapshot,
        query: &QueryInput,
        config: &RetrievalConfig,
    ) -> Result<GenerationOutcome> {
        query.validate()?;
        config.validate()?;
        let start = Instant::now();
        let mut timing = StageTimings::default();

        let mut visual = Vec::new();
        if let Some(img) = query.image.as_ref().filter(|_| !snapshot.is_empty()) {
            let t = Instant::now();
            let classes = snapshot.list_categories();
            let detection = perception::detect(
                self.detector.as_ref(),
                &img.bytes,
                &classes,
                self.settings.score_threshold,
            )?;
            timing.detect_ms = ms(t.elapsed());

            let t = Instant::now();
            let embeddings = self.embed_regions(&img.bytes, &detection.regions, snapshot.dim())?;
            timing.embed_ms = ms(t.elapsed());

            let t = Instant::now();
            visual = retrieve_for_regions(snapshot, &embeddings, config)?;
            timing.retrieve_ms = ms(t.elapsed());
        }

        let t = Instant::now();
        let by_name = retrieve_by_names(snapshot, &query.text, snapshot.delimiters());
        let named = |id: &str| by_name.iter().any(|r| r.id == id);

        let mut provenance: Vec<Provenance> = visual
            .iter()
            .map(|h| Provenance {
                concept_id: h.concept_id.clone(),
                distance: Some(h.distance),
                source: if named(&h.concept_id) {
                    HitSource::Name
                } else {
                    HitSource::Visual
                },
                region_index: h.source_region,
            })
            .collect();
        if let Some(cap) = self.settings.max_concepts {
            let name_only = by_name
                .iter()
                .filter(|r| !provenance.iter().any(|p| p.concept_id == r.id))
                .count();
            let mut budget = cap.saturating_sub(name_only);
            provenance.retain(|p| {
                if p.source == HitSource::Name {
                    return true;
                }
                if budget == 0 {
                    return false;
                }
                budget -= 1;
                true
            });
        }
        for rec in &by_name {
            if !provenance.iter().any(|p| p.concept_id == rec.id) {
                provenance.push(Provenance {
                    concept_id: rec.id.clone(),
                    distance: None,
                    source: HitSource::Name,
                    region_index: None,
                });
            }
        }
        let concepts: Vec<&ConceptRecord> = provenance
            .iter()
            .map(|p| snapshot.get(&p.concept_id).expect("hit comes from this snapshot"))
            .collect();
        timing.retrieve_ms += ms(t.elapsed());

        let t = Instant::now();
        let prompt = assemble_prompt(&concepts, query);
        let text = self.generate_with_retry(&prompt)?;
        timing.generate_ms = ms(t.elapsed());
        timing.total_ms = ms(start.elapsed());

        Ok(GenerationOutcome {
            text,
            provenance,
            prompt,
            timing,
        })
    }
}
