//! Recognition and encoding backends: the open-vocabulary detector that
//! proposes regions, and the image encoder that turns a crop into a key.
//!
//! Every backend's raw output passes through [`validate_regions`], so callers
//! only ever see boxes with `0 <= x1 < x2 <= 1`, `0 <= y1 < y2 <= 1` and a
//! score in `[0, 1]`.

use std::collections::HashMap;
use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use base64::Engine as _;
use image::{DynamicImage, GenericImageView, ImageFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::EmbeddingVector;
use crate::error::{RapError, Result, Stage};
use crate::http::JsonClient;

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.1;

/// Normalized `[x1, y1, x2, y2]` box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub const FULL: BoundingBox = BoundingBox {
        x1: 0.0,
        y1: 0.0,
        x2: 1.0,
        y2: 1.0,
    };

    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && 0.0 <= self.x1
            && self.x1 < self.x2
            && self.x2 <= 1.0
            && 0.0 <= self.y1
            && self.y1 < self.y2
            && self.y2 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(RapError::InvalidInput(format!("invalid bbox {:?}", self.to_array())))
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn is_full(&self) -> bool {
        *self == Self::FULL
    }

    /// Two-decimal rendering used in grounding targets: `[0.57, 0.67, 0.68, 0.84]`.
    pub fn format_2dp(&self) -> String {
        format!("[{:.2}, {:.2}, {:.2}, {:.2}]", self.x1, self.y1, self.x2, self.y2)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = RapError;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionOfInterest {
    pub bbox: BoundingBox,
    pub label: String,
    pub score: f64,
}

/// Region exactly as a backend reported it, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRegion {
    pub bbox: Vec<f64>,
    pub label: String,
    pub score: f64,
}

impl From<&RegionOfInterest> for RawRegion {
    fn from(r: &RegionOfInterest) -> Self {
        Self {
            bbox: r.bbox.to_array().to_vec(),
            label: r.label.clone(),
            score: r.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInput {
    pub bytes: Vec<u8>,
    pub media_type: String,
}

impl ImageInput {
    pub fn new(bytes: Vec<u8>) -> Self {
        let media_type = sniff_media_type(&bytes).to_string();
        Self { bytes, media_type }
    }

    pub fn data_uri(&self) -> String {
        format!(
            "data:{};base64,{}",
            self.media_type,
            base64::engine::general_purpose::STANDARD.encode(&self.bytes)
        )
    }
}

pub fn sniff_media_type(bytes: &[u8]) -> &'static str {
    match image::guess_format(bytes) {
        Ok(ImageFormat::Png) => "image/png",
        Ok(ImageFormat::Jpeg) => "image/jpeg",
        Ok(ImageFormat::Gif) => "image/gif",
        Ok(ImageFormat::WebP) => "image/webp",
        _ => "application/octet-stream",
    }
}

/// A user query: optional image plus instruction text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryInput {
    pub image: Option<ImageInput>,
    #[serde(default)]
    pub text: String,
}

impl QueryInput {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            image: None,
            text: text.into(),
        }
    }

    pub fn with_image(bytes: Vec<u8>, text: impl Into<String>) -> Self {
        Self {
            image: Some(ImageInput::new(bytes)),
            text: text.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.is_none() && self.text.trim().is_empty() {
            return Err(RapError::InvalidInput("query needs an image or text".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 of raw image bytes; the key used by fixture files.
pub fn image_key(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub trait Detector: Send + Sync {
    fn detect_raw(&self, image: &[u8], classes: &[String]) -> Result<Vec<RawRegion>>;

    fn name(&self) -> &str;
}

/// Validated detector output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Detection {
    pub regions: Vec<RegionOfInterest>,
    pub warnings: Vec<String>,
}

/// Drops regions that break the box or score invariants or fall under the
/// threshold, then sorts by descending score (stable).
pub fn validate_regions(raw: Vec<RawRegion>, score_threshold: f64) -> Detection {
    let mut out = Detection::default();
    for (i, r) in raw.into_iter().enumerate() {
        let bbox = match <[f64; 4]>::try_from(r.bbox.as_slice()) {
            Ok(arr) => BoundingBox::try_from(arr),
            Err(_) => Err(RapError::InvalidInput(format!("bbox has {} coordinates", r.bbox.len()))),
        };
        let bbox = match bbox {
            Ok(b) => b,
            Err(e) => {
                out.warnings.push(format!("region {i} rejected: {e}"));
                continue;
            }
        };
        if !(r.score.is_finite() && (0.0..=1.0).contains(&r.score)) {
            out.warnings
                .push(format!("region {i} rejected: score {} outside [0, 1]", r.score));
            continue;
        }
        if r.score < score_threshold {
            continue;
        }
        out.regions.push(RegionOfInterest {
            bbox,
            label: r.label,
            score: r.score,
        });
    }
    out.regions.sort_by(|a, b| b.score.total_cmp(&a.score));
    for w in &out.warnings {
        log::warn!("{w}");
    }
    out
}

pub fn detect(detector: &dyn Detector, image: &[u8], classes: &[String], score_threshold: f64) -> Result<Detection> {
    if classes.is_empty() {
        return Err(RapError::InvalidInput("detector class list is empty".into()));
    }
    let raw = detector.detect_raw(image, classes)?;
    Ok(validate_regions(raw, score_threshold))
}

/// One region covering the whole image.
#[derive(Debug, Clone, Default)]
pub struct WholeImageDetector;

impl Detector for WholeImageDetector {
    fn detect_raw(&self, _image: &[u8], _classes: &[String]) -> Result<Vec<RawRegion>> {
        Ok(vec![RawRegion {
            bbox: BoundingBox::FULL.to_array().to_vec(),
            label: "object".into(),
            score: 1.0,
        }])
    }

    fn name(&self) -> &str {
        "whole_image"
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<Vec<RawRegion>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

/// Precomputed detector/encoder outputs keyed by [`image_key`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixtureSet {
    pub entries: HashMap<String, FixtureEntry>,
}

impl FixtureSet {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| RapError::InvalidInput(format!("fixture file {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Sorted keys keep fixture files diffable.
        let sorted: std::collections::BTreeMap<_, _> = self.entries.iter().collect();
        let json = serde_json::to_vec_pretty(&sorted).expect("fixture set serializes");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn set_regions(&mut self, image: &[u8], regions: Vec<RawRegion>) {
        self.entries.entry(image_key(image)).or_default().regions = Some(regions);
    }

    pub fn set_embedding(&mut self, image: &[u8], embedding: Vec<f32>) {
        self.entries.entry(image_key(image)).or_default().embedding = Some(embedding);
    }

    pub fn get(&self, image: &[u8]) -> Option<&FixtureEntry> {
        self.entries.get(&image_key(image))
    }
}

/// Echoes regions planted in a fixture file. Images without an entry yield no regions.
#[derive(Debug, Clone)]
pub struct FixtureDetector {
    fixtures: Arc<FixtureSet>,
}

impl FixtureDetector {
    pub fn new(fixtures: Arc<FixtureSet>) -> Self {
        Self { fixtures }
    }
}

impl Detector for FixtureDetector {
    fn detect_raw(&self, image: &[u8], _classes: &[String]) -> Result<Vec<RawRegion>> {
        Ok(self
            .fixtures
            .get(image)
            .and_then(|e| e.regions.clone())
            .unwrap_or_default())
    }

    fn name(&self) -> &str {
        "fixture"
    }
}

#[derive(Serialize)]
struct DetectRequest<'a> {
    image_b64: String,
    classes: &'a [String],
}

#[derive(Deserialize)]
struct DetectResponse {
    regions: Vec<RawRegion>,
}

/// `POST /detect` client.
#[derive(Debug, Clone)]
pub struct HttpDetector {
    client: JsonClient,
}

impl HttpDetector {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        Self {
            client: JsonClient::new(endpoint(base_url, "detect"), Stage::Detect, timeout),
        }
    }
}

impl Detector for HttpDetector {
    fn detect_raw(&self, image: &[u8], classes: &[String]) -> Result<Vec<RawRegion>> {
        let req = DetectRequest {
            image_b64: base64::engine::general_purpose::STANDARD.encode(image),
            classes,
        };
        let resp: DetectResponse = self.client.post(&req)?;
        Ok(resp.regions)
    }

    fn name(&self) -> &str {
        "http"
    }
}

pub(crate) fn endpoint(base: &str, path: &str) -> String {
    let base = base.trim_end_matches('/');
    if base.ends_with(&format!("/{path}")) {
        base.to_string()
    } else {
        format!("{base}/{path}")
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, image: &[u8]) -> Result<EmbeddingVector>;

    fn dim(&self) -> usize;

    fn name(&self) -> &str;
}

/// Embeds and checks the width against the engine's configured dim.
pub fn embed_image(embedder: &dyn Embedder, image: &[u8], dim: usize) -> Result<EmbeddingVector> {
    let v = embedder.embed(image)?;
    v.check_dim(dim)?;
    Ok(v)
}

/// Deterministic stand-in for an image encoder: SHA-256 of the bytes seeds a
/// ChaCha stream that yields `dim` values in `[-1, 1)`.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, image: &[u8]) -> Result<EmbeddingVector> {
        let seed: [u8; 32] = Sha256::digest(image).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        EmbeddingVector::new((0..self.dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        "hash"
    }
}

/// Returns vectors planted in a fixture file; unknown images fall back to
/// the optional inner embedder, otherwise fail.
pub struct LookupEmbedder {
    fixtures: Arc<FixtureSet>,
    dim: usize,
    fallback: Option<Box<dyn Embedder>>,
}

impl LookupEmbedder {
    pub fn new(fixtures: Arc<FixtureSet>, dim: usize) -> Self {
        Self {
            fixtures,
            dim,
            fallback: None,
        }
    }

    pub fn with_fallback(mut self, fallback: Box<dyn Embedder>) -> Self {
        self.fallback = Some(fallback);
        self
    }
}

impl Embedder for LookupEmbedder {
    fn embed(&self, image: &[u8]) -> Result<EmbeddingVector> {
        match self.fixtures.get(image).and_then(|e| e.embedding.clone()) {
            Some(v) => EmbeddingVector::new(v),
            None => match &self.fallback {
                Some(inner) => inner.embed(image),
                None => Err(RapError::backend(
                    Stage::Embed,
                    format!("no fixture embedding for image {}", image_key(image)),
                )),
            },
        }
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        "lookup"
    }
}

#[derive(Serialize)]
struct EmbedRequest {
    image_b64: String,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f32>,
}

/// `POST /embed` client.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    client: JsonClient,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, dim: usize, timeout: Duration) -> Self {
        Self {
            client: JsonClient::new(endpoint(base_url, "embed"), Stage::Embed, timeout),
            dim,
        }
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, image: &[u8]) -> Result<EmbeddingVector> {
        let req = EmbedRequest {
            image_b64: base64::engine::general_purpose::STANDARD.encode(image),
        };
        let resp: EmbedResponse = self.client.post(&req)?;
        EmbeddingVector::new(resp.embedding).map_err(|e| RapError::malformed(Stage::Embed, e))
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        "http"
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<DynamicImage> {
    image::load_from_memory(bytes).map_err(|e| RapError::DecodeError(e.to_string()))
}

pub fn encode_png(img: &DynamicImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| RapError::DecodeError(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

/// Pixel rectangle `(x, y, w, h)` for `bbox` on a `width × height` image.
/// Width/height are `round(extent · fraction)`, at least one pixel, and the
/// rectangle is shifted to stay inside the image.
pub fn pixel_rect(width: u32, height: u32, bbox: &BoundingBox) -> (u32, u32, u32, u32) {
    let axis = |size: u32, lo: f64, hi: f64| {
        let len = ((size as f64) * (hi - lo)).round().clamp(1.0, size as f64) as u32;
        let start = ((size as f64) * lo).round() as u32;
        (start.min(size - len), len)
    };
    let (x, w) = axis(width, bbox.x1, bbox.x2);
    let (y, h) = axis(height, bbox.y1, bbox.y2);
    (x, y, w, h)
}

pub fn crop_image(img: &DynamicImage, bbox: &BoundingBox) -> DynamicImage {
    let (w, h) = img.dimensions();
    let (x, y, cw, ch) = pixel_rect(w, h, bbox);
    img.crop_imm(x, y, cw, ch)
}

/// Crops encoded image bytes. The full-frame box returns the input unchanged;
/// other boxes are re-encoded as PNG.
pub fn crop(image: &[u8], bbox: &BoundingBox) -> Result<Vec<u8>> {
    bbox.validate()?;
    let img = decode_image(image)?;
    if bbox.is_full() {
        return Ok(image.to_vec());
    }
    encode_png(&crop_image(&img, bbox))
}
