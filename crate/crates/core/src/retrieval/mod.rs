//! Scoring and ranking for the six search models.
//!
//! Every model reduces to one cosine score per keyframe followed by a descending
//! sort. Equal scores are ordered by ascending `image_id`, so the rank of an image
//! is `1 + #(strictly higher) + #(equal score, smaller id)`.

mod engine;
mod suffix;

pub use engine::{QuerySpec, SearchEngine, SearchResult};
pub use suffix::{append_suffix, SuffixLength, SuffixPhrases};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::KeyframeManifest;
use crate::embed::{EmbedError, Embedder};
use crate::geometry::{select_cell_indices, GeometryError, GridLayout, LayoutKind, Rect, SelectionMode};
use crate::store::{EmbeddingStore, StoreError};
use crate::vector;

/// Images per rayon task when scoring a store.
const SCORE_CHUNK: usize = 512;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: store has {expected}, query has {actual}")]
    Dim { expected: usize, actual: usize },
    #[error("query embedding is zero or non-finite")]
    BadQuery,
    #[error("store {store} does not match layout {layout}")]
    StoreMismatch { store: String, layout: String },
    #[error("no store loaded for region set {0}")]
    MissingStore(String),
    #[error("model {0} requires a query box")]
    MissingBox(SearchModel),
    #[error("target image {0} is not in the store")]
    MissingTarget(String),
    #[error("store {store} covers {found} images, manifest has {expected}")]
    Coverage {
        store: String,
        expected: usize,
        found: usize,
    },
    #[error("embedding crop of {image_id}: {source}")]
    Crop {
        image_id: String,
        #[source]
        source: EmbedError,
    },
    #[error("embedding query text: {0}")]
    Text(#[source] EmbedError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SearchModel {
    #[serde(rename = "whole-image")]
    WholeImage,
    #[serde(rename = "append-short")]
    AppendShort,
    #[serde(rename = "append-long")]
    AppendLong,
    #[serde(rename = "static5")]
    Static5,
    #[serde(rename = "static9")]
    Static9,
    #[serde(rename = "theoretical")]
    Theoretical,
}

impl SearchModel {
    pub const ALL: [SearchModel; 6] = [
        SearchModel::WholeImage,
        SearchModel::AppendLong,
        SearchModel::AppendShort,
        SearchModel::Static5,
        SearchModel::Static9,
        SearchModel::Theoretical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SearchModel::WholeImage => "whole-image",
            SearchModel::AppendShort => "append-short",
            SearchModel::AppendLong => "append-long",
            SearchModel::Static5 => "static5",
            SearchModel::Static9 => "static9",
            SearchModel::Theoretical => "theoretical",
        }
    }

    pub fn layout(self) -> Option<LayoutKind> {
        match self {
            SearchModel::Static5 => Some(LayoutKind::Static5),
            SearchModel::Static9 => Some(LayoutKind::Static9),
            _ => None,
        }
    }

    pub fn requires_box(self) -> bool {
        self != SearchModel::WholeImage
    }

    pub fn suffix(self) -> Option<SuffixLength> {
        match self {
            SearchModel::AppendShort => Some(SuffixLength::Short),
            SearchModel::AppendLong => Some(SuffixLength::Long),
            _ => None,
        }
    }
}

impl fmt::Display for SearchModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SearchModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace(['_', ' '], "-");
        match norm.as_str() {
            "whole-image" | "whole" => Ok(SearchModel::WholeImage),
            "append-short" => Ok(SearchModel::AppendShort),
            "append-long" => Ok(SearchModel::AppendLong),
            "static5" | "static-5" => Ok(SearchModel::Static5),
            "static9" | "static-9" => Ok(SearchModel::Static9),
            "theoretical" => Ok(SearchModel::Theoretical),
            _ => Err(format!("unknown model {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedImage {
    pub image_id: String,
    pub score: f32,
    /// For grid models, the selected cell that produced the image's score.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched_cell: Option<String>,
}

/// Images in descending score order.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    entries: Vec<RankedImage>,
    positions: HashMap<String, usize>,
}

impl Ranking {
    pub fn from_scores(mut entries: Vec<RankedImage>) -> Self {
        entries.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("scores are finite")
                .then_with(|| a.image_id.cmp(&b.image_id))
        });
        let positions = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.image_id.clone(), i))
            .collect();
        Self { entries, positions }
    }

    /// 1-based rank.
    pub fn rank_of(&self, image_id: &str) -> Option<usize> {
        self.positions.get(image_id).map(|p| p + 1)
    }

    pub fn entries(&self) -> &[RankedImage] {
        &self.entries
    }

    pub fn top(&self, k: usize) -> &[RankedImage] {
        &self.entries[..k.min(self.entries.len())]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn score_of(&self, image_id: &str) -> Option<f32> {
        self.positions.get(image_id).map(|&p| self.entries[p].score)
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.image_id.as_str())
    }
}

fn unit_query(f_t: &[f32], dim: usize) -> Result<Vec<f32>, RetrievalError> {
    if f_t.len() != dim {
        return Err(RetrievalError::Dim {
            expected: dim,
            actual: f_t.len(),
        });
    }
    vector::unit(f_t).ok_or(RetrievalError::BadQuery)
}

fn check_grid_store(store: &EmbeddingStore, grid: &GridLayout) -> Result<(), RetrievalError> {
    if store.region_set_id() != grid.region_set_id() {
        return Err(RetrievalError::StoreMismatch {
            store: store.region_set_id().to_string(),
            layout: grid.region_set_id(),
        });
    }
    Ok(())
}

/// Cosine of the query against each image's single whole-frame vector.
pub fn score_whole(store: &EmbeddingStore, f_t: &[f32]) -> Result<Ranking, RetrievalError> {
    let q = unit_query(f_t, store.dim())?;
    if store.cells_per_image() != 1 {
        return Err(RetrievalError::StoreMismatch {
            store: store.region_set_id().to_string(),
            layout: "whole".into(),
        });
    }
    let entries = (0..store.n_images())
        .into_par_iter()
        .with_min_len(SCORE_CHUNK)
        .map(|i| RankedImage {
            image_id: store.image_ids()[i].clone(),
            score: vector::dot(store.image_block(i), &q),
            matched_cell: None,
        })
        .collect();
    Ok(Ranking::from_scores(entries))
}

/// Image score is the maximum cosine over the cells selected by `bbox`. The same
/// cell subset, derived once from the query box, applies to every image.
pub fn score_grid(
    store: &EmbeddingStore,
    grid: &GridLayout,
    bbox: &Rect,
    mode: SelectionMode,
    f_t: &[f32],
) -> Result<Ranking, RetrievalError> {
    let selected = select_cell_indices(grid, bbox, mode);
    score_grid_cells(store, grid, &selected, f_t)
}

/// Grid scoring with an explicit cell subset (indices into `grid.cells`).
pub fn score_grid_cells(
    store: &EmbeddingStore,
    grid: &GridLayout,
    selected: &[usize],
    f_t: &[f32],
) -> Result<Ranking, RetrievalError> {
    check_grid_store(store, grid)?;
    let q = unit_query(f_t, store.dim())?;
    let dim = store.dim();
    let entries = (0..store.n_images())
        .into_par_iter()
        .with_min_len(SCORE_CHUNK / selected.len().max(1))
        .map(|i| {
            let block = store.image_block(i);
            let mut best = f32::NEG_INFINITY;
            let mut best_cell = selected[0];
            for &c in selected {
                let s = vector::dot(&block[c * dim..(c + 1) * dim], &q);
                if s > best {
                    best = s;
                    best_cell = c;
                }
            }
            RankedImage {
                image_id: store.image_ids()[i].clone(),
                score: best,
                matched_cell: Some(grid.cells[best_cell].id.clone()),
            }
        })
        .collect();
    Ok(Ranking::from_scores(entries))
}

/// Crops every keyframe at `bbox` and scores the crop embeddings.
pub fn score_theoretical(
    manifest: &KeyframeManifest,
    bbox: &Rect,
    f_t: &[f32],
    embedder: &dyn Embedder,
) -> Result<Ranking, RetrievalError> {
    let q = unit_query(f_t, embedder.dim())?;
    let entries = manifest
        .entries()
        .par_iter()
        .map(|e| {
            let crop = embedder
                .embed_crop(&e.image_id, &e.uri, bbox)
                .map_err(|source| RetrievalError::Crop {
                    image_id: e.image_id.clone(),
                    source,
                })?;
            let crop = unit_query(&crop, embedder.dim())?;
            Ok(RankedImage {
                image_id: e.image_id.clone(),
                score: vector::dot(&crop, &q),
                matched_cell: None,
            })
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    Ok(Ranking::from_scores(entries))
}

/// Where the target's finer-grained embedding comes from in
/// [`score_target_substitution`].
pub enum TargetEmbedding<'a> {
    /// The target's best-IoU cell from the grid store.
    GridCell,
    /// A crop of the target at the query box.
    Crop {
        embedder: &'a dyn Embedder,
        image_uri: &'a str,
    },
}

/// Whole-image scores for every candidate, except the target which is scored from
/// a finer-grained embedding.
#[allow(clippy::too_many_arguments)]
pub fn score_target_substitution(
    store_whole: &EmbeddingStore,
    store_grid: &EmbeddingStore,
    grid: &GridLayout,
    bbox: &Rect,
    target_image: &str,
    f_t: &[f32],
    target: TargetEmbedding<'_>,
) -> Result<Ranking, RetrievalError> {
    check_grid_store(store_grid, grid)?;
    if !store_whole.contains_image(target_image) || !store_grid.contains_image(target_image) {
        return Err(RetrievalError::MissingTarget(target_image.to_string()));
    }
    let q = unit_query(f_t, store_whole.dim())?;
    let (target_score, matched_cell) = match target {
        TargetEmbedding::GridCell => {
            let cell = &grid.cells[select_cell_indices(grid, bbox, SelectionMode::ArgmaxIou)[0]];
            let row = store_grid
                .row(target_image, &cell.id)
                .ok_or_else(|| RetrievalError::MissingTarget(target_image.to_string()))?;
            (vector::dot(row, &q), Some(cell.id.clone()))
        }
        TargetEmbedding::Crop {
            embedder,
            image_uri,
        } => {
            let crop = embedder
                .embed_crop(target_image, image_uri, bbox)
                .map_err(|source| RetrievalError::Crop {
                    image_id: target_image.to_string(),
                    source,
                })?;
            (vector::dot(&unit_query(&crop, store_whole.dim())?, &q), None)
        }
    };
    let entries = (0..store_whole.n_images())
        .map(|i| {
            let image_id = &store_whole.image_ids()[i];
            if image_id == target_image {
                RankedImage {
                    image_id: image_id.clone(),
                    score: target_score,
                    matched_cell: matched_cell.clone(),
                }
            } else {
                RankedImage {
                    image_id: image_id.clone(),
                    score: vector::dot(store_whole.image_block(i), &q),
                    matched_cell: None,
                }
            }
        })
        .collect();
    Ok(Ranking::from_scores(entries))
}

#[cfg(test)]
mod tests;
