#![allow(dead_code)]

use std::collections::HashMap;
use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use image::{DynamicImage, ImageFormat, Rgb, RgbImage};
use rap_cli::engine::BackendNames;
use rap_cli::Engine;
use rap_core::{
    Embedder, EmbeddingVector, MockGenerator, Pipeline, RapError, Result, RetrievalConfig, WholeImageDetector,
};
use serde_json::Value;
use tower::ServiceExt;

/// Returns planted vectors for known image bytes.
pub struct MapEmbedder {
    pub dim: usize,
    pub vectors: HashMap<Vec<u8>, Vec<f32>>,
}

impl Embedder for MapEmbedder {
    fn embed(&self, image: &[u8]) -> Result<EmbeddingVector> {
        let v = self
            .vectors
            .get(image)
            .ok_or_else(|| RapError::InvalidInput("image has no planted vector".into()))?;
        EmbeddingVector::new(v.clone())
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        "map"
    }
}

pub fn png(rgb: [u8; 3]) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(RgbImage::from_pixel(8, 8, Rgb(rgb)))
        .write_to(&mut buf, ImageFormat::Png)
        .unwrap();
    buf.into_inner()
}

/// Engine over a fresh store in `dir` with whole-image detection, the mock
/// generator and planted embeddings.
pub fn engine(dir: &Path, dim: usize, planted: &[(Vec<u8>, Vec<f32>)]) -> Arc<Engine> {
    let store = Engine::load_or_create(dir, dim).unwrap();
    let embedder = MapEmbedder {
        dim,
        vectors: planted.iter().cloned().collect(),
    };
    let pipeline = Pipeline::new(
        Arc::new(WholeImageDetector),
        Arc::new(embedder),
        Arc::new(MockGenerator),
    );
    let names = BackendNames {
        detector: "whole-image".into(),
        embedder: "map".into(),
        generator: "mock".into(),
    };
    let retrieval = RetrievalConfig {
        per_region_k: 2,
        global_k: 2,
        ..Default::default()
    };
    Arc::new(Engine::new(dir, store, pipeline, retrieval, names).unwrap())
}

pub const BOUNDARY: &str = "rap-test-boundary";

pub enum Part<'a> {
    Text(&'a str, &'a str),
    File(&'a str, &'a [u8]),
}

pub fn multipart(parts: &[Part]) -> Vec<u8> {
    let mut body = Vec::new();
    for p in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        match p {
            Part::Text(name, value) => {
                body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
                body.extend_from_slice(value.as_bytes());
            }
            Part::File(name, bytes) => {
                body.extend_from_slice(
                    format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"x.png\"\r\nContent-Type: image/png\r\n\r\n")
                        .as_bytes(),
                );
                body.extend_from_slice(bytes);
            }
        }
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: Option<String>,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes)
            .unwrap_or_else(|e| panic!("non-JSON body ({e}): {}", String::from_utf8_lossy(&self.bytes)))
    }
}

pub async fn send(app: &Router, method: Method, uri: &str, content_type: Option<&str>, body: Vec<u8>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(ct) = content_type {
        req = req.header("content-type", ct);
    }
    let resp = app.clone().oneshot(req.body(Body::from(body)).unwrap()).await.unwrap();
    let status = resp.status();
    let content_type = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply {
        status,
        content_type,
        bytes,
    }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    send(app, Method::GET, uri, None, Vec::new()).await
}

pub async fn json(app: &Router, method: Method, uri: &str, body: &Value) -> Reply {
    send(
        app,
        method,
        uri,
        Some("application/json"),
        serde_json::to_vec(body).unwrap(),
    )
    .await
}

pub async fn create(app: &Router, meta: &Value, image: &[u8]) -> Reply {
    let meta = meta.to_string();
    let body = multipart(&[Part::Text("meta", &meta), Part::File("image", image)]);
    send(
        app,
        Method::POST,
        "/concepts",
        Some(&format!("multipart/form-data; boundary={BOUNDARY}")),
        body,
    )
    .await
}

/// Store files as bytes, for before/after comparisons.
pub fn store_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// The published schemas, with relative `$ref`s resolved from the schemas directory.
pub struct Schemas {
    validators: HashMap<&'static str, jsonschema::Validator>,
}

struct DirRetriever;

impl jsonschema::Retrieve for DirRetriever {
    fn retrieve(
        &self,
        uri: &jsonschema::Uri<String>,
    ) -> std::result::Result<Value, Box<dyn std::error::Error + Send + Sync>> {
        let file = uri.as_str().rsplit('/').next().unwrap_or_default().to_string();
        let text = std::fs::read_to_string(schema_dir().join(&file))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn schema_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

pub const SCHEMA_NAMES: [&str; 7] = [
    "concept_record",
    "concept_list",
    "api_error",
    "retrieve_response",
    "chat_response",
    "health",
    "categories",
];

impl Schemas {
    pub fn load() -> Self {
        let validators = SCHEMA_NAMES
            .iter()
            .map(|name| {
                let text = std::fs::read_to_string(schema_dir().join(format!("{name}.json"))).unwrap();
                let schema: Value = serde_json::from_str(&text).unwrap();
                let v = jsonschema::options()
                    .with_base_uri("file:///schemas/")
                    .with_retriever(DirRetriever)
                    .build(&schema)
                    .unwrap_or_else(|e| panic!("schema {name}: {e}"));
                (*name, v)
            })
            .collect();
        Self { validators }
    }

    pub fn is_valid(&self, name: &str, value: &Value) -> bool {
        self.validators[name].is_valid(value)
    }

    pub fn check(&self, name: &str, value: &Value) {
        let v = &self.validators[name];
        let errors: Vec<String> = v.iter_errors(value).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{name} schema violations {errors:?} in {value}");
    }
}
