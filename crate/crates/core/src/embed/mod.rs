//! Text and image-crop embedders.
//!
//! [`HttpEmbedder`] talks to an external embedding service, [`HashEmbedder`] and
//! [`SceneEmbedder`] are deterministic offline stand-ins, and [`CachedEmbedder`]
//! wraps any of them with content-addressed caching.

mod cache;
mod config;
mod http;
mod synthetic;

pub use cache::{CacheStats, CachedEmbedder};
pub use config::EmbedderConfig;
pub use http::{EmbedderEndpoint, HttpEmbedder, RetryPolicy, ENV_EMBEDDER_TOKEN, ENV_EMBEDDER_URL};
pub use synthetic::{HashEmbedder, Scene, SceneEmbedder, SceneObject, TableEmbedder};

use thiserror::Error;

use crate::geometry::Rect;
use crate::vector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("empty query text")]
    EmptyText,
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("embedder returned HTTP {status}: {message}")]
    Status { status: u16, message: String },
    #[error("cannot fetch image {uri}: {message}")]
    ImageFetch { uri: String, message: String },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dim { expected: usize, actual: usize },
    #[error("embedder returned a non-finite or zero vector")]
    NonFinite,
    #[error("malformed embedder response: {0}")]
    BadResponse(String),
    #[error("crop cache: {0}")]
    Cache(String),
}

/// Source of unit-norm text and crop embeddings.
pub trait Embedder: Send + Sync {
    fn model_id(&self) -> &str;

    fn dim(&self) -> usize;

    /// Embeds a batch of texts, one vector per input in order.
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let mut v = self.embed_texts(&[text.to_string()])?;
        v.pop()
            .ok_or_else(|| EmbedError::BadResponse("empty batch response".into()))
    }

    /// Embeds the region `bbox` of the image at `image_uri`.
    fn embed_crop(&self, image_id: &str, image_uri: &str, bbox: &Rect)
        -> Result<Vec<f32>, EmbedError>;
}

impl<E: Embedder + ?Sized> Embedder for std::sync::Arc<E> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        (**self).embed_texts(texts)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        (**self).embed_text(text)
    }

    fn embed_crop(&self, image_id: &str, image_uri: &str, bbox: &Rect) -> Result<Vec<f32>, EmbedError> {
        (**self).embed_crop(image_id, image_uri, bbox)
    }
}

/// Checks the dimension and re-normalizes.
pub(crate) fn checked_unit(v: &[f32], dim: usize) -> Result<Vec<f32>, EmbedError> {
    if v.len() != dim {
        return Err(EmbedError::Dim {
            expected: dim,
            actual: v.len(),
        });
    }
    vector::unit(v).ok_or(EmbedError::NonFinite)
}
