use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::Deserialize;

use gridsearch_core::embed::{EmbedderConfig, EmbedderEndpoint};
use gridsearch_core::eval::SweepConfig;
use gridsearch_service::Config;

use crate::{EmbedderKind, GlobalArgs};

/// Config file layout: the service keys plus command-line-only ones.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    #[serde(flatten)]
    service: Option<Config>,
    #[serde(default)]
    annotations: Option<PathBuf>,
    #[serde(default)]
    sweep: Option<SweepConfig>,
    #[serde(default)]
    jobs: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

/// Config file merged with command-line flags; flags win.
#[derive(Debug, Clone)]
pub struct Settings {
    pub service: Config,
    pub annotations: Option<PathBuf>,
    pub sweep: Option<SweepConfig>,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
}

impl Settings {
    pub fn resolve(args: &GlobalArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let mut f: FileConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                if let Some(base) = path.parent() {
                    if let Some(s) = f.service.as_mut() {
                        s.resolve_relative(base);
                    }
                    if let Some(a) = f.annotations.as_mut().filter(|a| a.is_relative()) {
                        *a = base.join(&*a);
                    }
                }
                f
            }
            None => FileConfig::default(),
        };
        let mut service = file.service.unwrap_or_default();
        if let Some(m) = &args.manifest {
            service.manifest = Some(m.clone());
        }
        if let Some(d) = &args.store_dir {
            service.store_dir = Some(d.clone());
        }
        if let Some(d) = &args.report_dir {
            service.reports_dir = Some(d.clone());
        }
        service.embedder = merge_embedder(service.embedder, args)?;
        Ok(Self {
            service,
            annotations: args.annotations.clone().or(file.annotations),
            sweep: file.sweep,
            jobs: args.jobs.or(file.jobs),
            seed: args.seed.or(file.seed),
        })
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| anyhow!("missing setting `{key}` (config key or --{})", key.replace('_', "-")))
    }
}

fn merge_embedder(current: EmbedderConfig, args: &GlobalArgs) -> Result<EmbedderConfig> {
    let kind = args.embedder.unwrap_or(match current {
        EmbedderConfig::Synthetic { .. } => EmbedderKind::Synthetic,
        EmbedderConfig::Http(_) => EmbedderKind::Http,
    });
    Ok(match (kind, current) {
        (EmbedderKind::Synthetic, current) => {
            let (dim, model_id) = match current {
                EmbedderConfig::Synthetic { dim, model_id } => (dim, model_id),
                EmbedderConfig::Http(ep) => (ep.dim, None),
            };
            EmbedderConfig::Synthetic {
                dim: args.embedder_dim.unwrap_or(dim),
                model_id: args.embedder_model.clone().or(model_id),
            }
        }
        (EmbedderKind::Http, EmbedderConfig::Http(mut ep)) => {
            if let Some(u) = &args.embedder_url {
                ep.base_uri = u.clone();
            }
            if let Some(m) = &args.embedder_model {
                ep.model_id = m.clone();
            }
            if let Some(d) = args.embedder_dim {
                ep.dim = d;
            }
            EmbedderConfig::Http(ep)
        }
        (EmbedderKind::Http, EmbedderConfig::Synthetic { .. }) => {
            let model = args
                .embedder_model
                .clone()
                .ok_or_else(|| anyhow!("--embedder http needs --embedder-model"))?;
            let dim = args
                .embedder_dim
                .ok_or_else(|| anyhow!("--embedder http needs --embedder-dim"))?;
            EmbedderConfig::Http(EmbedderEndpoint::new(
                args.embedder_url.clone().unwrap_or_default(),
                model,
                dim,
            ))
        }
    })
}
