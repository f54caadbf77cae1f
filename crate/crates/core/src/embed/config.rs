use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{CachedEmbedder, EmbedError, Embedder, EmbedderEndpoint, HashEmbedder, HttpEmbedder};
use super::{ENV_EMBEDDER_TOKEN, ENV_EMBEDDER_URL};

/// Embedder selection as it appears in configuration files.
///
/// ```toml
/// [embedder]
/// kind = "http"
/// base_uri = "http://localhost:9000"
/// model_id = "clip-vit-b32"
/// dim = 512
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbedderConfig {
    /// Offline hash embedder.
    Synthetic {
        dim: usize,
        #[serde(default)]
        model_id: Option<String>,
    },
    Http(EmbedderEndpoint),
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Synthetic {
            dim: 64,
            model_id: None,
        }
    }
}

impl EmbedderConfig {
    pub fn dim(&self) -> usize {
        match self {
            EmbedderConfig::Synthetic { dim, .. } => *dim,
            EmbedderConfig::Http(ep) => ep.dim,
        }
    }

    /// Builds the embedder wrapped in a cache. An HTTP endpoint without a base URI
    /// or token takes them from the environment.
    pub fn build(&self, crop_cache: Option<&Path>) -> Result<Arc<dyn Embedder>, EmbedError> {
        match self {
            EmbedderConfig::Synthetic { dim, model_id } => {
                let mut e = HashEmbedder::new(*dim);
                if let Some(id) = model_id {
                    e = e.with_model_id(id.clone());
                }
                wrap(e, crop_cache)
            }
            EmbedderConfig::Http(ep) => {
                let mut ep = ep.clone();
                if ep.base_uri.is_empty() {
                    ep.base_uri = std::env::var(ENV_EMBEDDER_URL).map_err(|_| EmbedError::Transport {
                        attempts: 0,
                        message: format!("no base_uri configured and {ENV_EMBEDDER_URL} unset"),
                    })?;
                }
                if ep.token.is_none() {
                    ep.token = std::env::var(ENV_EMBEDDER_TOKEN).ok();
                }
                wrap(HttpEmbedder::new(ep), crop_cache)
            }
        }
    }
}

fn wrap<E: Embedder + 'static>(e: E, crop_cache: Option<&Path>) -> Result<Arc<dyn Embedder>, EmbedError> {
    let cached = CachedEmbedder::new(e);
    Ok(match crop_cache {
        Some(p) => Arc::new(cached.with_crop_cache_file(p)?),
        None => Arc::new(cached),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_kinds() {
        let s: EmbedderConfig = toml::from_str("kind = \"synthetic\"\ndim = 8").unwrap();
        assert_eq!(s.dim(), 8);
        assert_eq!(s.build(None).unwrap().model_id(), "synthetic-hash");
        let h: EmbedderConfig =
            toml::from_str("kind = \"http\"\nbase_uri = \"http://x\"\nmodel_id = \"m\"\ndim = 4\nmax_batch = 16").unwrap();
        match h {
            EmbedderConfig::Http(ep) => {
                assert_eq!((ep.base_uri.as_str(), ep.dim, ep.max_batch, ep.max_concurrency), ("http://x", 4, 16, 8));
            }
            other => panic!("{other:?}"),
        }
    }
}
