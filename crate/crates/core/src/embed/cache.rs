use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbedError, Embedder};
use crate::geometry::Rect;

type Slot = Arc<Mutex<Option<Arc<Vec<f32>>>>>;

/// Crop boxes are cached at this resolution (frame fraction).
const CROP_QUANTUM: f64 = 1e-3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub text_hits: u64,
    pub text_misses: u64,
    pub crop_hits: u64,
    pub crop_misses: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
struct CropKey {
    model: String,
    image_id: String,
    bbox: [i64; 4],
}

impl CropKey {
    fn new(model: &str, image_id: &str, bbox: &Rect) -> Self {
        Self {
            model: model.to_string(),
            image_id: image_id.to_string(),
            bbox: bbox.as_array().map(|x| (x / CROP_QUANTUM).round() as i64),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CropRecord {
    #[serde(flatten)]
    key: CropKey,
    vector: Vec<f32>,
}

/// Caches text embeddings by `(model_id, text)` and crop embeddings by
/// `(model_id, image_id, box quantized to 1e-3)`.
///
/// Concurrent requests for the same key wait on one another, so each distinct key
/// reaches the inner embedder at most once while it succeeds. Crop embeddings can
/// be persisted to an append-only JSON-lines file.
pub struct CachedEmbedder<E> {
    inner: E,
    texts: Mutex<HashMap<[u8; 32], Slot>>,
    crops: Mutex<HashMap<CropKey, Slot>>,
    crop_file: Option<(PathBuf, Mutex<File>)>,
    text_hits: AtomicU64,
    text_misses: AtomicU64,
    crop_hits: AtomicU64,
    crop_misses: AtomicU64,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            texts: Mutex::default(),
            crops: Mutex::default(),
            crop_file: None,
            text_hits: AtomicU64::new(0),
            text_misses: AtomicU64::new(0),
            crop_hits: AtomicU64::new(0),
            crop_misses: AtomicU64::new(0),
        }
    }

    /// Loads previously persisted crops from `path` and appends new ones to it.
    pub fn with_crop_cache_file(mut self, path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        let path = path.as_ref().to_path_buf();
        let cache_err = |e: std::io::Error| EmbedError::Cache(format!("{}: {e}", path.display()));
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(cache_err)?);
            let mut crops = self.crops.lock().unwrap();
            for line in reader.lines() {
                let line = line.map_err(cache_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CropRecord = serde_json::from_str(&line)
                    .map_err(|e| EmbedError::Cache(format!("{}: {e}", path.display())))?;
                if rec.key.model == self.inner.model_id() && rec.vector.len() == self.inner.dim() {
                    crops.insert(rec.key, Arc::new(Mutex::new(Some(Arc::new(rec.vector)))));
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(cache_err)?;
        self.crop_file = Some((path, Mutex::new(file)));
        Ok(self)
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            text_hits: self.text_hits.load(Ordering::Relaxed),
            text_misses: self.text_misses.load(Ordering::Relaxed),
            crop_hits: self.crop_hits.load(Ordering::Relaxed),
            crop_misses: self.crop_misses.load(Ordering::Relaxed),
        }
    }

    fn text_key(&self, text: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.inner.model_id().as_bytes());
        h.update([0]);
        h.update(text.as_bytes());
        h.finalize().into()
    }

    fn text_slot(&self, text: &str) -> Slot {
        let key = self.text_key(text);
        self.texts.lock().unwrap().entry(key).or_default().clone()
    }

    fn persist_crop(&self, key: &CropKey, vector: &[f32]) -> Result<(), EmbedError> {
        let Some((path, file)) = &self.crop_file else {
            return Ok(());
        };
        let line = serde_json::to_string(&CropRecord {
            key: key.clone(),
            vector: vector.to_vec(),
        })
        .map_err(|e| EmbedError::Cache(e.to_string()))?;
        writeln!(file.lock().unwrap(), "{line}")
            .map_err(|e| EmbedError::Cache(format!("{}: {e}", path.display())))
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let slots: Vec<Slot> = texts.iter().map(|t| self.text_slot(t)).collect();
        let mut out: Vec<Option<Arc<Vec<f32>>>> =
            slots.iter().map(|s| s.lock().unwrap().clone()).collect();
        let mut missing: Vec<usize> = Vec::new();
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, v) in out.iter().enumerate() {
            if v.is_some() {
                continue;
            }
            if let std::collections::hash_map::Entry::Vacant(e) = seen.entry(texts[i].as_str()) {
                e.insert(i);
                missing.push(i);
            }
        }
        self.text_hits
            .fetch_add((texts.len() - missing.len()) as u64, Ordering::Relaxed);
        if !missing.is_empty() {
            self.text_misses
                .fetch_add(missing.len() as u64, Ordering::Relaxed);
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let vectors = self.inner.embed_texts(&batch)?;
            if vectors.len() != batch.len() {
                return Err(EmbedError::BadResponse(format!(
                    "{} vectors for {} texts",
                    vectors.len(),
                    batch.len()
                )));
            }
            for (&i, v) in missing.iter().zip(vectors) {
                let mut slot = slots[i].lock().unwrap();
                let v = slot.get_or_insert_with(|| Arc::new(v)).clone();
                out[i] = Some(v);
            }
        }
        Ok(texts
            .iter()
            .enumerate()
            .map(|(i, t)| match &out[i] {
                Some(v) => v.as_ref().clone(),
                None => out[seen[t.as_str()]].as_ref().expect("filled above").as_ref().clone(),
            })
            .collect())
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let slot = self.text_slot(text);
        let mut guard = slot.lock().unwrap();
        if let Some(v) = guard.as_ref() {
            self.text_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(v.as_ref().clone());
        }
        self.text_misses.fetch_add(1, Ordering::Relaxed);
        let v = self.inner.embed_text(text)?;
        *guard = Some(Arc::new(v.clone()));
        Ok(v)
    }

    fn embed_crop(&self, image_id: &str, image_uri: &str, bbox: &Rect) -> Result<Vec<f32>, EmbedError> {
        let key = CropKey::new(self.inner.model_id(), image_id, bbox);
        let slot = self.crops.lock().unwrap().entry(key.clone()).or_default().clone();
        let mut guard = slot.lock().unwrap();
        if let Some(v) = guard.as_ref() {
            self.crop_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(v.as_ref().clone());
        }
        self.crop_misses.fetch_add(1, Ordering::Relaxed);
        let v = self.inner.embed_crop(image_id, image_uri, bbox)?;
        self.persist_crop(&key, &v)?;
        *guard = Some(Arc::new(v.clone()));
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashEmbedder;
    use std::sync::atomic::AtomicUsize;

    struct Counting {
        inner: HashEmbedder,
        calls: AtomicUsize,
    }

    impl Embedder for Counting {
        fn model_id(&self) -> &str {
            self.inner.model_id()
        }
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.embed_texts(texts)
        }
        fn embed_crop(&self, id: &str, uri: &str, b: &Rect) -> Result<Vec<f32>, EmbedError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.embed_crop(id, uri, b)
        }
    }

    fn counting() -> CachedEmbedder<Counting> {
        CachedEmbedder::new(Counting {
            inner: HashEmbedder::new(16),
            calls: AtomicUsize::new(0),
        })
    }

    #[test]
    fn repeated_text_hits_cache() {
        let c = counting();
        let a = c.embed_text("a red fish").unwrap();
        let b = c.embed_text("a red fish").unwrap();
        assert_eq!(a, b);
        assert_eq!(c.inner().calls.load(Ordering::SeqCst), 1);
        assert_eq!(c.stats().text_hits, 1);
    }

    #[test]
    fn batch_only_sends_misses_once() {
        let c = counting();
        c.embed_text("x").unwrap();
        let texts: Vec<String> = ["x", "y", "y", "z"].iter().map(|s| s.to_string()).collect();
        let out = c.embed_texts(&texts).unwrap();
        assert_eq!(out[1], out[2]);
        assert_eq!(out[0], c.inner().inner.embed_text("x").unwrap());
        assert_eq!(c.inner().calls.load(Ordering::SeqCst), 2);
        c.embed_texts(&texts).unwrap();
        assert_eq!(c.inner().calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn concurrent_requests_dedupe() {
        let c = Arc::new(counting());
        std::thread::scope(|s| {
            for _ in 0..8 {
                let c = c.clone();
                s.spawn(move || c.embed_text("same").unwrap());
            }
        });
        assert_eq!(c.inner().calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn crop_cache_quantizes_and_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("crops.jsonl");
        let b = Rect::new(0.1, 0.2, 0.3, 0.4).unwrap();
        let near = Rect::new(0.1000001, 0.2, 0.3, 0.4).unwrap();
        let v = {
            let c = counting().with_crop_cache_file(&path).unwrap();
            let v = c.embed_crop("img", "img.jpg", &b).unwrap();
            assert_eq!(c.embed_crop("img", "img.jpg", &near).unwrap(), v);
            assert_eq!(c.inner().calls.load(Ordering::SeqCst), 1);
            v
        };
        let c = counting().with_crop_cache_file(&path).unwrap();
        assert_eq!(c.embed_crop("img", "img.jpg", &b).unwrap(), v);
        assert_eq!(c.inner().calls.load(Ordering::SeqCst), 0);
        assert_eq!(c.stats().crop_hits, 1);
    }
}
