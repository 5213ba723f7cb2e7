//! The personal concept database.
//!
//! A [`ConceptStore`] is single-writer: every mutation takes `&mut self`, so
//! callers that share a store wrap it in a lock. Readers take a
//! [`StoreSnapshot`], an immutable `Arc`'d view with a contiguous embedding
//! matrix, and keep using it while edits continue.
//!
//! Removal tombstones the slot in memory; `persist` writes only live rows, so
//! files on disk are always compact.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{self, EmbeddingVector, DEFAULT_DIM};
use crate::error::{RapError, Result};
use crate::names::Delimiters;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VECTORS_FILE: &str = "vectors.bin";
pub const MANIFEST_VERSION: u32 = 1;

/// One stored concept: the image/description pair plus its retrieval key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub id: String,
    pub name: String,
    pub category: String,
    pub description: String,
    pub image_ref: String,
    pub embedding: EmbeddingVector,
    pub created_at: i64,
    pub updated_at: i64,
}

/// Fields for [`ConceptStore::add_concept`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NewConcept {
    pub name: String,
    pub category: String,
    #[serde(default)]
    pub description: String,
    pub image_ref: String,
    pub embedding: EmbeddingVector,
}

/// Partial edit; `None` leaves the field untouched.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConceptUpdate {
    pub name: Option<String>,
    pub description: Option<String>,
    pub category: Option<String>,
    pub image_ref: Option<String>,
    pub embedding: Option<EmbeddingVector>,
}

/// Row metadata as it appears in `manifest.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub name: String,
    pub category: String,
    pub description: String,
    pub image_ref: String,
    pub created_at: i64,
    pub updated_at: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub version: u32,
    pub dim: usize,
    #[serde(default)]
    pub delimiters: Delimiters,
    /// Hex SHA-256 of `vectors.bin`; absent in hand-written manifests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vectors_sha256: Option<String>,
    pub records: Vec<ManifestRecord>,
}

pub fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

fn fresh_id() -> String {
    format!("{:032x}", rand::rng().random::<u128>())
}

pub struct ConceptStore {
    dim: usize,
    delimiters: Delimiters,
    slots: Vec<Option<Arc<ConceptRecord>>>,
    by_id: HashMap<String, usize>,
    by_name: HashMap<String, usize>,
    live: usize,
    cache: Mutex<Option<Arc<StoreSnapshot>>>,
}

impl Clone for ConceptStore {
    fn clone(&self) -> Self {
        Self {
            dim: self.dim,
            delimiters: self.delimiters.clone(),
            slots: self.slots.clone(),
            by_id: self.by_id.clone(),
            by_name: self.by_name.clone(),
            live: self.live,
            cache: Mutex::new(self.cache.lock().clone()),
        }
    }
}

impl std::fmt::Debug for ConceptStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConceptStore")
            .field("dim", &self.dim)
            .field("len", &self.live)
            .finish()
    }
}

impl Default for ConceptStore {
    fn default() -> Self {
        Self::new(DEFAULT_DIM).expect("default dim is positive")
    }
}

impl ConceptStore {
    pub fn new(dim: usize) -> Result<Self> {
        Self::with_delimiters(dim, Delimiters::default())
    }

    pub fn with_delimiters(dim: usize, delimiters: Delimiters) -> Result<Self> {
        if dim == 0 {
            return Err(RapError::InvalidInput("store dim must be positive".into()));
        }
        delimiters.validate()?;
        Ok(Self {
            dim,
            delimiters,
            slots: Vec::new(),
            by_id: HashMap::new(),
            by_name: HashMap::new(),
            live: 0,
            cache: Mutex::new(None),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delimiters(&self) -> &Delimiters {
        &self.delimiters
    }

    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    /// Live records in insertion order.
    pub fn records(&self) -> impl Iterator<Item = &ConceptRecord> {
        self.slots.iter().filter_map(|s| s.as_deref())
    }

    fn invalidate(&self) {
        *self.cache.lock() = None;
    }

    pub fn add_concept(&mut self, new: NewConcept) -> Result<ConceptRecord> {
        self.delimiters.check_name(&new.name)?;
        if self.by_name.contains_key(&new.name) {
            return Err(RapError::DuplicateName(new.name));
        }
        new.embedding.check_dim(self.dim)?;

        let mut id = fresh_id();
        while self.by_id.contains_key(&id) {
            id = fresh_id();
        }
        let now = now_ms();
        let record = ConceptRecord {
            id: id.clone(),
            name: new.name,
            category: new.category,
            description: new.description,
            image_ref: new.image_ref,
            embedding: new.embedding,
            created_at: now,
            updated_at: now,
        };
        self.insert_slot(Arc::new(record.clone()));
        Ok(record)
    }

    fn insert_slot(&mut self, record: Arc<ConceptRecord>) {
        let slot = self.slots.len();
        self.by_id.insert(record.id.clone(), slot);
        self.by_name.insert(record.name.clone(), slot);
        self.slots.push(Some(record));
        self.live += 1;
        self.invalidate();
    }

    pub fn update_info(&mut self, id: &str, update: ConceptUpdate) -> Result<ConceptRecord> {
        let slot = *self
            .by_id
            .get(id)
            .ok_or_else(|| RapError::NotFound(format!("concept id {id}")))?;
        let current = self.slots[slot].as_deref().expect("indexed slot is live");

        if let Some(name) = &update.name {
            self.delimiters.check_name(name)?;
            if let Some(&other) = self.by_name.get(name) {
                if other != slot {
                    return Err(RapError::DuplicateName(name.clone()));
                }
            }
        }
        if let Some(e) = &update.embedding {
            e.check_dim(self.dim)?;
        }

        let mut next = current.clone();
        let old_name = current.name.clone();
        if let Some(name) = update.name {
            next.name = name;
        }
        if let Some(description) = update.description {
            next.description = description;
        }
        if let Some(category) = update.category {
            next.category = category;
        }
        if let Some(image_ref) = update.image_ref {
            next.image_ref = image_ref;
        }
        if let Some(embedding) = update.embedding {
            next.embedding = embedding;
        }
        next.updated_at = now_ms().max(next.created_at).max(current.updated_at);

        if next.name != old_name {
            self.by_name.remove(&old_name);
            self.by_name.insert(next.name.clone(), slot);
        }
        self.slots[slot] = Some(Arc::new(next.clone()));
        self.invalidate();
        Ok(next)
    }

    pub fn remove_concept(&mut self, id: &str) -> Result<ConceptRecord> {
        let slot = self
            .by_id
            .remove(id)
            .ok_or_else(|| RapError::NotFound(format!("concept id {id}")))?;
        let record = self.slots[slot].take().expect("indexed slot is live");
        self.by_name.remove(&record.name);
        self.live -= 1;
        self.invalidate();
        let tombstones = self.slots.len() - self.live;
        if tombstones > 64 && tombstones > self.live {
            self.compact();
        }
        Ok(Arc::try_unwrap(record).unwrap_or_else(|arc| (*arc).clone()))
    }

    fn compact(&mut self) {
        let live: Vec<_> = self.slots.drain(..).flatten().collect();
        self.by_id.clear();
        self.by_name.clear();
        self.live = 0;
        for r in live {
            self.insert_slot(r);
        }
    }

    pub fn get(&self, id: &str) -> Result<&ConceptRecord> {
        self.by_id
            .get(id)
            .and_then(|&s| self.slots[s].as_deref())
            .ok_or_else(|| RapError::NotFound(format!("concept id {id}")))
    }

    /// Exact, case-sensitive lookup.
    pub fn get_by_name(&self, name: &str) -> Result<&ConceptRecord> {
        self.by_name
            .get(name)
            .and_then(|&s| self.slots[s].as_deref())
            .ok_or_else(|| RapError::NotFound(format!("concept name {name:?}")))
    }

    /// Sorted, deduplicated category labels; this is the detector class list.
    pub fn list_categories(&self) -> Vec<String> {
        self.records()
            .map(|r| r.category.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn snapshot(&self) -> Arc<StoreSnapshot> {
        let mut cache = self.cache.lock();
        if let Some(s) = cache.as_ref() {
            return Arc::clone(s);
        }
        let records: Vec<Arc<ConceptRecord>> = self.slots.iter().flatten().cloned().collect();
        let mut matrix = Vec::with_capacity(records.len() * self.dim);
        let mut by_name = HashMap::with_capacity(records.len());
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            matrix.extend_from_slice(r.embedding.as_slice());
            by_name.insert(r.name.clone(), i);
            by_id.insert(r.id.clone(), i);
        }
        let snap = Arc::new(StoreSnapshot {
            dim: self.dim,
            delimiters: self.delimiters.clone(),
            records,
            matrix,
            by_name,
            by_id,
        });
        *cache = Some(Arc::clone(&snap));
        snap
    }

    pub fn manifest(&self) -> StoreManifest {
        StoreManifest {
            version: MANIFEST_VERSION,
            dim: self.dim,
            delimiters: self.delimiters.clone(),
            vectors_sha256: None,
            records: self.records().map(ManifestRecord::from).collect(),
        }
    }

    /// Writes `manifest.json` and `vectors.bin` into `dir`, replacing any
    /// previous pair via rename.
    pub fn persist(&self, dir: &Path) -> Result<StoreManifest> {
        fs::create_dir_all(dir)?;
        let rows: Vec<&[f32]> = self.records().map(|r| r.embedding.as_slice()).collect();
        let mut vectors = Vec::with_capacity(embedding::VECTOR_FILE_HEADER_LEN + rows.len() * self.dim * 4);
        embedding::write_vector_file(&mut vectors, self.dim, &rows)?;

        let mut manifest = self.manifest();
        manifest.vectors_sha256 = Some(hex::encode(Sha256::digest(&vectors)));
        let json = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| RapError::InvalidInput(format!("manifest serialization: {e}")))?;

        write_atomic(&dir.join(VECTORS_FILE), &vectors)?;
        write_atomic(&dir.join(MANIFEST_FILE), &json)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_bytes = fs::read(dir.join(MANIFEST_FILE))?;
        let manifest: StoreManifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| RapError::CorruptManifest(format!("manifest.json: {e}")))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(RapError::CorruptManifest(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        let vector_bytes = fs::read(dir.join(VECTORS_FILE))?;
        if let Some(expected) = &manifest.vectors_sha256 {
            let actual = hex::encode(Sha256::digest(&vector_bytes));
            if !actual.eq_ignore_ascii_case(expected) {
                return Err(RapError::CorruptManifest("vectors.bin checksum mismatch".into()));
            }
        }
        let vectors = embedding::parse_vector_file(&vector_bytes)?;
        if vectors.dim != manifest.dim {
            return Err(RapError::CorruptManifest(format!(
                "manifest dim {} but vectors.bin dim {}",
                manifest.dim, vectors.dim
            )));
        }
        if vectors.count != manifest.records.len() {
            return Err(RapError::CorruptManifest(format!(
                "manifest lists {} records but vectors.bin holds {}",
                manifest.records.len(),
                vectors.count
            )));
        }

        let mut store = Self::with_delimiters(manifest.dim, manifest.delimiters.clone())
            .map_err(|e| RapError::CorruptManifest(e.to_string()))?;
        for (i, row) in manifest.records.into_iter().enumerate() {
            if store.by_id.contains_key(&row.id) {
                return Err(RapError::CorruptManifest(format!("duplicate id {}", row.id)));
            }
            if store.by_name.contains_key(&row.name) {
                return Err(RapError::CorruptManifest(format!("duplicate name {}", row.name)));
            }
            if row.updated_at < row.created_at {
                return Err(RapError::CorruptManifest(format!(
                    "record {} updated before created",
                    row.id
                )));
            }
            let embedding =
                EmbeddingVector::new(vectors.row(i).to_vec()).map_err(|e| RapError::CorruptManifest(e.to_string()))?;
            store.insert_slot(Arc::new(ConceptRecord {
                id: row.id,
                name: row.name,
                category: row.category,
                description: row.description,
                image_ref: row.image_ref,
                embedding,
                created_at: row.created_at,
                updated_at: row.updated_at,
            }));
        }
        Ok(store)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl From<&ConceptRecord> for ManifestRecord {
    fn from(r: &ConceptRecord) -> Self {
        Self {
            id: r.id.clone(),
            name: r.name.clone(),
            category: r.category.clone(),
            description: r.description.clone(),
            image_ref: r.image_ref.clone(),
            created_at: r.created_at,
            updated_at: r.updated_at,
        }
    }
}

/// Immutable view of the store. Row `i` of the matrix is `records[i].embedding`.
#[derive(Debug)]
pub struct StoreSnapshot {
    dim: usize,
    delimiters: Delimiters,
    records: Vec<Arc<ConceptRecord>>,
    matrix: Vec<f32>,
    by_name: HashMap<String, usize>,
    by_id: HashMap<String, usize>,
}

impl StoreSnapshot {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delimiters(&self) -> &Delimiters {
        &self.delimiters
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Arc<ConceptRecord>] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &ConceptRecord {
        &self.records[i]
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get_by_name(&self, name: &str) -> Option<&ConceptRecord> {
        self.by_name.get(name).map(|&i| &*self.records[i])
    }

    pub fn get(&self, id: &str) -> Option<&ConceptRecord> {
        self.by_id.get(id).map(|&i| &*self.records[i])
    }

    pub fn list_categories(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.category.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}
