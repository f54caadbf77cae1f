use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gridsearch_core::api::DEFAULT_THUMBNAIL_PREFIX;
use gridsearch_core::dataset::KeyframeManifest;
use gridsearch_core::embed::EmbedderConfig;
use gridsearch_core::retrieval::SearchEngine;
use gridsearch_core::store::load_store_dir;

use crate::ServiceError;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

/// Settings shared by the service and the command line. Relative paths in a file
/// are resolved against the file's directory.
///
/// ```toml
/// listen = "127.0.0.1:8080"
/// manifest = "data/keyframes.jsonl"
/// store_dir = "data/stores"
/// reports_dir = "reports"
/// thumbnail_root = "data/keyframes"
///
/// [embedder]
/// kind = "synthetic"
/// dim = 64
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub store_dir: Option<PathBuf>,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub reports_dir: Option<PathBuf>,
    /// Directory the manifest URIs are relative to; served under `thumbnail_prefix`.
    #[serde(default)]
    pub thumbnail_root: Option<PathBuf>,
    #[serde(default = "default_prefix")]
    pub thumbnail_prefix: String,
    /// JSON-lines file persisting crop embeddings between runs.
    #[serde(default)]
    pub crop_cache: Option<PathBuf>,
}

fn default_listen() -> String {
    DEFAULT_LISTEN.to_string()
}

fn default_prefix() -> String {
    DEFAULT_THUMBNAIL_PREFIX.to_string()
}

impl Default for Config {
    fn default() -> Self {
        Self {
            listen: default_listen(),
            manifest: None,
            store_dir: None,
            embedder: EmbedderConfig::default(),
            reports_dir: None,
            thumbnail_root: None,
            thumbnail_prefix: default_prefix(),
            crop_cache: None,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_relative(base);
        }
        Ok(config)
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_relative(&mut self, base: &Path) {
        for p in [
            &mut self.manifest,
            &mut self.store_dir,
            &mut self.reports_dir,
            &mut self.thumbnail_root,
            &mut self.crop_cache,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, ServiceError> {
        value
            .as_deref()
            .ok_or_else(|| ServiceError::Config(format!("missing setting `{key}`")))
    }

    /// Loads manifest, stores and embedder.
    pub fn load_engine(&self) -> Result<SearchEngine, ServiceError> {
        let manifest = KeyframeManifest::load(Self::required(&self.manifest, "manifest")?)?;
        let stores = load_store_dir(Self::required(&self.store_dir, "store_dir")?)?;
        let embedder = self.embedder.build(self.crop_cache.as_deref())?;
        Ok(SearchEngine::new(manifest, stores, embedder)?)
    }
}
