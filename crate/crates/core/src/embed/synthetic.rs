use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbedError, Embedder};
use crate::geometry::Rect;
use crate::vector;

fn seed_of(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// Gaussian vector of length `len` seeded by `seed`.
fn gaussian(seed: [u8; 32], len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn quantized(bbox: &Rect) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (i, x) in bbox.as_array().iter().enumerate() {
        out[i * 8..(i + 1) * 8].copy_from_slice(&((x * 1e3).round() as i64).to_le_bytes());
    }
    out
}

/// Deterministic embedder with no semantics: every text and every
/// `(image_id, box)` maps to its own hash-seeded unit vector.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    model_id: String,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            model_id: "synthetic-hash".to_string(),
        }
    }

    pub fn with_model_id(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    fn unit(&self, seed: [u8; 32]) -> Vec<f32> {
        vector::unit_f64(gaussian(seed, self.dim)).expect("gaussian draw is non-zero")
    }
}

impl Embedder for HashEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        texts
            .iter()
            .map(|t| {
                if t.trim().is_empty() {
                    return Err(EmbedError::EmptyText);
                }
                Ok(self.unit(seed_of(&[b"text", self.model_id.as_bytes(), t.as_bytes()])))
            })
            .collect()
    }

    fn embed_crop(&self, image_id: &str, _uri: &str, bbox: &Rect) -> Result<Vec<f32>, EmbedError> {
        Ok(self.unit(seed_of(&[
            b"crop",
            self.model_id.as_bytes(),
            image_id.as_bytes(),
            &quantized(bbox),
        ])))
    }
}

/// Embedder backed by explicit lookup tables, for fixtures that need exact vectors.
/// Texts and crops missing from the tables fall back to a [`HashEmbedder`].
#[derive(Debug, Clone)]
pub struct TableEmbedder {
    fallback: HashEmbedder,
    texts: HashMap<String, Vec<f32>>,
    crops: HashMap<(String, [u8; 32]), Vec<f32>>,
}

impl TableEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            fallback: HashEmbedder::new(dim).with_model_id("synthetic-table"),
            texts: HashMap::new(),
            crops: HashMap::new(),
        }
    }

    pub fn insert_text(&mut self, text: impl Into<String>, v: Vec<f32>) {
        assert_eq!(v.len(), self.fallback.dim, "dimension");
        self.texts.insert(text.into(), v);
    }

    pub fn insert_crop(&mut self, image_id: impl Into<String>, bbox: &Rect, v: Vec<f32>) {
        assert_eq!(v.len(), self.fallback.dim, "dimension");
        self.crops.insert((image_id.into(), quantized(bbox)), v);
    }
}

impl Embedder for TableEmbedder {
    fn model_id(&self) -> &str {
        self.fallback.model_id()
    }

    fn dim(&self) -> usize {
        self.fallback.dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        texts
            .iter()
            .map(|t| match self.texts.get(t) {
                Some(v) => vector::unit(v).ok_or(EmbedError::NonFinite),
                None => self.fallback.embed_text(t),
            })
            .collect()
    }

    fn embed_crop(&self, image_id: &str, uri: &str, bbox: &Rect) -> Result<Vec<f32>, EmbedError> {
        match self.crops.get(&(image_id.to_string(), quantized(bbox))) {
            Some(v) => vector::unit(v).ok_or(EmbedError::NonFinite),
            None => self.fallback.embed_crop(image_id, uri, bbox),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub concept: String,
    #[serde(rename = "box")]
    pub rect: Rect,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

/// Synthetic embedder over a registry of scenes with known object placement.
///
/// The first `content_dims` coordinates carry visual content and the remaining ones
/// carry text-only tokens. Every concept name has a fixed direction in the content
/// subspace. A crop embeds as the area-weighted sum of the concepts it contains,
/// plus a per-image background direction and a small per-crop noise term. Text
/// embeds as the sum of its tokens: concept names map to their concept direction,
/// every other token to a direction in the text-only subspace that no image shares.
#[derive(Debug, Clone)]
pub struct SceneEmbedder {
    dim: usize,
    content_dims: usize,
    model_id: String,
    scenes: HashMap<String, Scene>,
    concepts: HashSet<String>,
    background_weight: f64,
    noise_weight: f64,
}

impl SceneEmbedder {
    pub fn new(dim: usize, content_dims: usize) -> Self {
        assert!(content_dims > 0 && content_dims < dim, "need both subspaces");
        Self {
            dim,
            content_dims,
            model_id: "synthetic-scene".to_string(),
            scenes: HashMap::new(),
            concepts: HashSet::new(),
            background_weight: 0.3,
            noise_weight: 0.05,
        }
    }

    pub fn with_weights(mut self, background: f64, noise: f64) -> Self {
        self.background_weight = background;
        self.noise_weight = noise;
        self
    }

    pub fn add_scene(&mut self, image_id: impl Into<String>, scene: Scene) {
        for o in &scene.objects {
            self.concepts.insert(o.concept.to_lowercase());
        }
        self.scenes.insert(image_id.into(), scene);
    }

    fn content(&self, seed: [u8; 32]) -> Vec<f64> {
        let mut v = gaussian(seed, self.content_dims);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        v.resize(self.dim, 0.0);
        v
    }

    pub fn concept_vector(&self, concept: &str) -> Vec<f64> {
        self.content(seed_of(&[b"concept", concept.to_lowercase().as_bytes()]))
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        if self.concepts.contains(token) {
            return self.concept_vector(token);
        }
        let mut v = vec![0.0; self.content_dims];
        v.extend(gaussian(seed_of(&[b"token", token.as_bytes()]), self.dim - self.content_dims));
        v
    }
}

fn add_scaled(acc: &mut [f64], v: &[f64], w: f64) {
    acc.iter_mut().zip(v).for_each(|(a, x)| *a += w * x);
}

impl Embedder for SceneEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        texts
            .iter()
            .map(|t| {
                let lower = t.to_lowercase();
                let tokens: Vec<&str> = lower
                    .split(|c: char| !c.is_alphanumeric())
                    .filter(|s| !s.is_empty())
                    .collect();
                if tokens.is_empty() {
                    return Err(EmbedError::EmptyText);
                }
                let mut acc = vec![0.0; self.dim];
                for tok in tokens {
                    add_scaled(&mut acc, &self.token_vector(tok), 1.0);
                }
                vector::unit_f64(acc).ok_or(EmbedError::NonFinite)
            })
            .collect()
    }

    fn embed_crop(&self, image_id: &str, uri: &str, bbox: &Rect) -> Result<Vec<f32>, EmbedError> {
        let scene = self.scenes.get(image_id).ok_or_else(|| EmbedError::ImageFetch {
            uri: uri.to_string(),
            message: format!("no synthetic scene for {image_id}"),
        })?;
        let mut acc = vec![0.0; self.dim];
        for o in &scene.objects {
            let share = o.rect.intersection_area(bbox) / bbox.area();
            if share > 0.0 {
                add_scaled(&mut acc, &self.concept_vector(&o.concept), share);
            }
        }
        let bg = self.content(seed_of(&[b"background", image_id.as_bytes()]));
        add_scaled(&mut acc, &bg, self.background_weight);
        let noise = self.content(seed_of(&[b"noise", image_id.as_bytes(), &quantized(bbox)]));
        add_scaled(&mut acc, &noise, self.noise_weight);
        vector::unit_f64(acc).ok_or(EmbedError::NonFinite)
    }
}
