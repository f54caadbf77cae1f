use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    append_suffix, score_grid_cells, score_theoretical, score_whole, Ranking, RetrievalError, SearchModel,
    SuffixPhrases,
};
use crate::dataset::KeyframeManifest;
use crate::embed::Embedder;
use crate::geometry::{select_cell_indices, GridLayout, Rect, RegionSet, SelectionMode};
use crate::store::EmbeddingStore;

/// One retrieval request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub text: String,
    #[serde(rename = "box", default)]
    pub bbox: Option<Rect>,
    pub model: SearchModel,
    #[serde(default)]
    pub selection: SelectionMode,
    /// Grid models only.
    #[serde(default)]
    pub enlargement: f64,
    /// Select cells on the unenlarged layout while still scoring enlarged embeddings.
    #[serde(default)]
    pub select_on_base: bool,
}

impl QuerySpec {
    pub fn new(text: impl Into<String>, bbox: Option<Rect>, model: SearchModel) -> Self {
        Self {
            text: text.into(),
            bbox,
            model,
            selection: SelectionMode::default(),
            enlargement: 0.0,
            select_on_base: false,
        }
    }

    pub fn with_selection(mut self, selection: SelectionMode) -> Self {
        self.selection = selection;
        self
    }

    pub fn with_enlargement(mut self, enlargement: f64) -> Self {
        self.enlargement = enlargement;
        self
    }

    fn required_box(&self) -> Result<Option<&Rect>, RetrievalError> {
        match (&self.bbox, self.model.requires_box()) {
            (None, true) => Err(RetrievalError::MissingBox(self.model)),
            (b, _) => Ok(b.as_ref()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub ranking: Ranking,
    /// Text actually embedded.
    pub text: String,
    /// Grid cells the box activated; empty for non-grid models.
    pub selected_cells: Vec<String>,
    /// Store the scores came from, if any.
    pub region_set_id: Option<String>,
}

/// Stores for one keyframe collection plus the embedder used for query text and
/// on-demand crops.
pub struct SearchEngine {
    manifest: KeyframeManifest,
    stores: BTreeMap<String, Arc<EmbeddingStore>>,
    embedder: Arc<dyn Embedder>,
    phrases: SuffixPhrases,
}

impl SearchEngine {
    /// Every store must match the embedder's dimension and cover exactly the
    /// manifest's images.
    pub fn new(
        manifest: KeyframeManifest,
        stores: impl IntoIterator<Item = EmbeddingStore>,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Self, RetrievalError> {
        let mut map = BTreeMap::new();
        for store in stores {
            if store.dim() != embedder.dim() {
                return Err(RetrievalError::Dim {
                    expected: store.dim(),
                    actual: embedder.dim(),
                });
            }
            let covered = manifest.entries().iter().filter(|e| store.contains_image(&e.image_id)).count();
            if covered != manifest.len() || store.n_images() != manifest.len() {
                return Err(RetrievalError::Coverage {
                    store: store.region_set_id().to_string(),
                    expected: manifest.len(),
                    found: covered,
                });
            }
            map.insert(store.region_set_id().to_string(), Arc::new(store));
        }
        Ok(Self {
            manifest,
            stores: map,
            embedder,
            phrases: SuffixPhrases::default(),
        })
    }

    pub fn with_phrases(mut self, phrases: SuffixPhrases) -> Self {
        self.phrases = phrases;
        self
    }

    pub fn manifest(&self) -> &KeyframeManifest {
        &self.manifest
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn phrases(&self) -> &SuffixPhrases {
        &self.phrases
    }

    pub fn store(&self, region_set_id: &str) -> Option<&EmbeddingStore> {
        self.stores.get(region_set_id).map(Arc::as_ref)
    }

    pub fn stores(&self) -> impl Iterator<Item = &EmbeddingStore> {
        self.stores.values().map(Arc::as_ref)
    }

    fn require_store(&self, region_set_id: &str) -> Result<&EmbeddingStore, RetrievalError> {
        self.store(region_set_id)
            .ok_or_else(|| RetrievalError::MissingStore(region_set_id.to_string()))
    }

    /// The text that gets embedded for `spec`, including any location suffix.
    pub fn query_text(&self, spec: &QuerySpec) -> Result<String, RetrievalError> {
        let bbox = spec.required_box()?;
        Ok(match (spec.model.suffix(), bbox) {
            (Some(len), Some(b)) => append_suffix(&spec.text, b, len, &self.phrases),
            _ => spec.text.clone(),
        })
    }

    /// Grid layout and selected cell indices for a grid query.
    pub fn grid_selection(&self, spec: &QuerySpec) -> Result<Option<(GridLayout, Vec<usize>)>, RetrievalError> {
        let Some(kind) = spec.model.layout() else {
            return Ok(None);
        };
        let bbox = spec.required_box()?.expect("grid models require a box");
        let grid = GridLayout::build_enlarged(kind, spec.enlargement)?;
        let selected = if spec.select_on_base {
            select_cell_indices(&GridLayout::build(kind), bbox, spec.selection)
        } else {
            select_cell_indices(&grid, bbox, spec.selection)
        };
        Ok(Some((grid, selected)))
    }

    pub fn search(&self, spec: &QuerySpec) -> Result<SearchResult, RetrievalError> {
        let text = self.query_text(spec)?;
        let f_t = self.embedder.embed_text(&text).map_err(RetrievalError::Text)?;
        self.search_embedded(spec, text, &f_t)
    }

    /// Like [`search`](Self::search) with the query text already embedded.
    pub fn search_embedded(&self, spec: &QuerySpec, text: String, f_t: &[f32]) -> Result<SearchResult, RetrievalError> {
        let bbox = spec.required_box()?;
        match spec.model {
            SearchModel::WholeImage | SearchModel::AppendShort | SearchModel::AppendLong => {
                let id = RegionSet::Whole.id();
                let ranking = score_whole(self.require_store(&id)?, f_t)?;
                Ok(SearchResult {
                    ranking,
                    text,
                    selected_cells: Vec::new(),
                    region_set_id: Some(id),
                })
            }
            SearchModel::Static5 | SearchModel::Static9 => {
                let (grid, selected) = self.grid_selection(spec)?.expect("grid model");
                let id = grid.region_set_id();
                let ranking = score_grid_cells(self.require_store(&id)?, &grid, &selected, f_t)?;
                Ok(SearchResult {
                    ranking,
                    text,
                    selected_cells: selected.iter().map(|&i| grid.cells[i].id.clone()).collect(),
                    region_set_id: Some(id),
                })
            }
            SearchModel::Theoretical => {
                let bbox = bbox.expect("theoretical requires a box");
                let ranking = score_theoretical(&self.manifest, bbox, f_t, self.embedder.as_ref())?;
                Ok(SearchResult {
                    ranking,
                    text,
                    selected_cells: Vec::new(),
                    region_set_id: None,
                })
            }
        }
    }
}
