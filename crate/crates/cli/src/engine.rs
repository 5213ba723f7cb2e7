//! The store directory plus the pipeline, shared by the CLI and the server.
//!
//! Mutations run against a copy of the store, which is persisted before it
//! replaces the live one; a failure at any step leaves the live store and the
//! files on disk as they were.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rap_core::perception::{embed_image, image_key, sniff_media_type};
use rap_core::pipeline::GenerationOutcome;
use rap_core::retriever::knn_with_mode;
use rap_core::store::MANIFEST_FILE;
use rap_core::{
    ConceptRecord, ConceptStore, ConceptUpdate, EmbeddingVector, NewConcept, Pipeline, QueryInput, RapError, Result,
    RetrievalConfig, StoreSnapshot,
};
use serde::{Deserialize, Serialize};

pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendNames {
    pub detector: String,
    pub embedder: String,
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptMeta {
    pub name: String,
    pub category: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConceptEdit {
    pub name: Option<String>,
    pub description: Option<String>,
    pub category: Option<String>,
    pub image: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitView {
    pub concept_id: String,
    pub name: String,
    pub distance: f64,
}

pub enum RetrieveQuery {
    Image(Vec<u8>),
    Embedding(Vec<f32>),
}

pub struct Engine {
    dir: PathBuf,
    store: RwLock<Arc<ConceptStore>>,
    writes: Mutex<()>,
    pub pipeline: Pipeline,
    pub retrieval: RetrievalConfig,
    pub backends: BackendNames,
}

impl Engine {
    /// Loads the store in `dir`, or creates and persists an empty one of dimension `dim`.
    pub fn load_or_create(dir: &Path, dim: usize) -> Result<ConceptStore> {
        if dir.join(MANIFEST_FILE).exists() {
            ConceptStore::load(dir)
        } else {
            let store = ConceptStore::new(dim)?;
            store.persist(dir)?;
            Ok(store)
        }
    }

    pub fn new(
        dir: &Path,
        store: ConceptStore,
        pipeline: Pipeline,
        retrieval: RetrievalConfig,
        backends: BackendNames,
    ) -> Result<Self> {
        retrieval.validate()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            store: RwLock::new(Arc::new(store)),
            writes: Mutex::new(()),
            pipeline,
            retrieval,
            backends,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn store(&self) -> Arc<ConceptStore> {
        Arc::clone(&self.store.read())
    }

    pub fn snapshot(&self) -> Arc<StoreSnapshot> {
        self.store.read().snapshot()
    }

    /// Applies `f` to a copy of the store, persists it, then publishes it.
    /// Callers hold `writes`, which also covers image files.
    fn commit<T>(&self, f: impl FnOnce(&mut ConceptStore) -> Result<T>) -> Result<T> {
        let mut next = (*self.store()).clone();
        let out = f(&mut next)?;
        next.persist(&self.dir)?;
        *self.store.write() = Arc::new(next);
        Ok(out)
    }

    /// Writes `image` under the images directory, named by content. Returns
    /// the store-relative reference and whether the file is new.
    fn save_image(&self, image: &[u8]) -> Result<(String, bool)> {
        let ext = match sniff_media_type(image) {
            "image/png" => "png",
            "image/jpeg" => "jpg",
            "image/gif" => "gif",
            "image/webp" => "webp",
            _ => "bin",
        };
        let rel = format!("{IMAGES_DIR}/{}.{ext}", &image_key(image)[..32]);
        let path = self.dir.join(&rel);
        if path.exists() {
            return Ok((rel, false));
        }
        fs::create_dir_all(self.dir.join(IMAGES_DIR))?;
        fs::write(&path, image)?;
        Ok((rel, true))
    }

    fn drop_image(&self, rel: &str) {
        if let Err(e) = fs::remove_file(self.dir.join(rel)) {
            log::warn!("could not remove {rel}: {e}");
        }
    }

    fn embed(&self, image: &[u8]) -> Result<EmbeddingVector> {
        embed_image(self.pipeline.embedder.as_ref(), image, self.store().dim())
    }

    pub fn add(&self, meta: ConceptMeta, image: &[u8]) -> Result<ConceptRecord> {
        if image.is_empty() {
            return Err(RapError::InvalidInput("concept image is empty".into()));
        }
        let embedding = self.embed(image)?;
        let _serial = self.writes.lock();
        let (image_ref, fresh) = self.save_image(image)?;
        let res = self.commit(|s| {
            s.add_concept(NewConcept {
                name: meta.name,
                category: meta.category,
                description: meta.description,
                image_ref: image_ref.clone(),
                embedding,
            })
        });
        if res.is_err() && fresh {
            self.drop_image(&image_ref);
        }
        res
    }

    pub fn edit(&self, id: &str, edit: ConceptEdit) -> Result<ConceptRecord> {
        let mut update = ConceptUpdate {
            name: edit.name,
            description: edit.description,
            category: edit.category,
            ..Default::default()
        };
        if let Some(image) = &edit.image {
            self.store().get(id)?;
            update.embedding = Some(self.embed(image)?);
        }
        let _serial = self.writes.lock();
        let old_ref = self.store().get(id)?.image_ref.clone();
        let mut saved = None;
        if let Some(image) = &edit.image {
            let (rel, fresh) = self.save_image(image)?;
            update.image_ref = Some(rel.clone());
            saved = Some((rel, fresh));
        }
        let res = self.commit(|s| s.update_info(id, update));
        match (&res, saved) {
            (Err(_), Some((rel, true))) => self.drop_image(&rel),
            (Ok(rec), Some(_)) if rec.image_ref != old_ref => self.forget_image(&old_ref),
            _ => {}
        }
        res
    }

    pub fn remove(&self, id: &str) -> Result<ConceptRecord> {
        let _serial = self.writes.lock();
        let removed = self.commit(|s| s.remove_concept(id))?;
        self.forget_image(&removed.image_ref);
        Ok(removed)
    }

    /// Deletes a managed image once no record points at it.
    fn forget_image(&self, rel: &str) {
        if rel.starts_with(&format!("{IMAGES_DIR}/")) && !self.store().records().any(|r| r.image_ref == rel) {
            self.drop_image(rel);
        }
    }

    pub fn retrieve(&self, query: RetrieveQuery, k: Option<usize>) -> Result<Vec<HitView>> {
        let snap = self.snapshot();
        let embedding = match query {
            RetrieveQuery::Image(bytes) => embed_image(self.pipeline.embedder.as_ref(), &bytes, snap.dim())?,
            RetrieveQuery::Embedding(v) => EmbeddingVector::new(v)?,
        };
        embedding.check_dim(snap.dim())?;
        if snap.is_empty() {
            return Ok(Vec::new());
        }
        let k = k.unwrap_or(self.retrieval.global_k);
        Ok(knn_with_mode(&snap, &embedding, k, self.retrieval.distance_mode)?
            .into_iter()
            .map(|h| HitView {
                name: snap.get(&h.concept_id).map(|r| r.name.clone()).unwrap_or_default(),
                concept_id: h.concept_id,
                distance: h.distance,
            })
            .collect())
    }

    pub fn chat(&self, image: Option<Vec<u8>>, text: String) -> Result<GenerationOutcome> {
        let query = QueryInput {
            image: image.map(rap_core::ImageInput::new),
            text,
        };
        self.pipeline.answer_query(&self.snapshot(), &query, &self.retrieval)
    }

    /// Writes the current store to disk again.
    pub fn flush(&self) -> Result<()> {
        let _serial = self.writes.lock();
        self.store().persist(&self.dir)?;
        Ok(())
    }

    /// Resolves a file name under the images directory; rejects anything else.
    pub fn image_path(&self, name: &str) -> Option<PathBuf> {
        let ok = !name.is_empty()
            && !name.starts_with('.')
            && name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-');
        ok.then(|| self.dir.join(IMAGES_DIR).join(name)).filter(|p| p.is_file())
    }
}
