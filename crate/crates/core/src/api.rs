//! Request/response types shared by the HTTP service and the command line.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embed::EmbedError;
use crate::geometry::{GridLayout, LayoutKind, Rect, SelectionMode};
use crate::retrieval::{QuerySpec, RetrievalError, SearchEngine, SearchModel};

pub const DEFAULT_TOP_K: usize = 10;
pub const MAX_TOP_K: usize = 1000;
pub const DEFAULT_THUMBNAIL_PREFIX: &str = "/thumbnails";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub text: String,
    /// Normalized `[x1, y1, x2, y2]`.
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_mode: Option<String>,
    #[serde(default)]
    pub enlargement: f64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiErrorKind {
    BadRequest,
    TopKOutOfRange,
    NotFound,
    Embedder,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    pub kind: ApiErrorKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
}

impl ApiError {
    pub fn new(kind: ApiErrorKind, field: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            kind,
            field: field.map(String::from),
            message: message.into(),
        }
    }

    pub fn bad_request(field: &str, message: impl Into<String>) -> Self {
        Self::new(ApiErrorKind::BadRequest, Some(field), message)
    }

    pub fn status(&self) -> u16 {
        match self.kind {
            ApiErrorKind::BadRequest => 400,
            ApiErrorKind::TopKOutOfRange => 413,
            ApiErrorKind::NotFound => 404,
            ApiErrorKind::Embedder => 502,
            ApiErrorKind::Internal => 500,
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.field {
            Some(field) => write!(f, "{field}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ApiError {}

impl From<RetrievalError> for ApiError {
    fn from(e: RetrievalError) -> Self {
        match &e {
            RetrievalError::MissingBox(_) => ApiError::bad_request("box", e.to_string()),
            RetrievalError::MissingStore(_) => ApiError::bad_request("enlargement", e.to_string()),
            RetrievalError::Geometry(_) => ApiError::bad_request("enlargement", e.to_string()),
            RetrievalError::Text(EmbedError::EmptyText) => ApiError::bad_request("text", e.to_string()),
            RetrievalError::Text(_) | RetrievalError::Crop { .. } | RetrievalError::Dim { .. } => {
                ApiError::new(ApiErrorKind::Embedder, None, e.to_string())
            }
            _ => ApiError::new(ApiErrorKind::Internal, None, e.to_string()),
        }
    }
}

impl QueryRequest {
    /// Checks every field and converts to a [`QuerySpec`].
    pub fn to_spec(&self) -> Result<QuerySpec, ApiError> {
        if self.text.trim().is_empty() {
            return Err(ApiError::bad_request("text", "must not be empty"));
        }
        if !(1..=MAX_TOP_K).contains(&self.top_k) {
            return Err(ApiError::new(
                ApiErrorKind::TopKOutOfRange,
                Some("top_k"),
                format!("must be in [1, {MAX_TOP_K}], got {}", self.top_k),
            ));
        }
        let model: SearchModel = self.model.parse().map_err(|e: String| ApiError::bad_request("model", e))?;
        let selection = match &self.selection_mode {
            None => SelectionMode::default(),
            Some(s) => s.parse().map_err(|e: crate::geometry::GeometryError| {
                ApiError::bad_request("selection_mode", e.to_string())
            })?,
        };
        let bbox = match self.bbox {
            None => None,
            Some([x1, y1, x2, y2]) => {
                Some(Rect::new(x1, y1, x2, y2).map_err(|e| ApiError::bad_request("box", e.to_string()))?)
            }
        };
        if model.requires_box() && bbox.is_none() {
            return Err(ApiError::bad_request("box", format!("model {model} requires a box")));
        }
        if let Some(kind) = model.layout() {
            GridLayout::build_enlarged(kind, self.enlargement)
                .map_err(|e| ApiError::bad_request("enlargement", e.to_string()))?;
        }
        Ok(QuerySpec {
            text: self.text.clone(),
            bbox,
            model,
            selection,
            enlargement: if model.layout().is_some() { self.enlargement } else { 0.0 },
            select_on_base: false,
        })
    }
}

/// The request as understood by the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEcho {
    pub text: String,
    /// Text that was embedded, including any location suffix.
    pub embedded_text: String,
    #[serde(rename = "box")]
    pub bbox: Option<[f64; 4]>,
    pub model: SearchModel,
    pub selection_mode: SelectionMode,
    pub enlargement: f64,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub rank: usize,
    pub image_id: String,
    pub score: f32,
    /// Selected cells that produced the score; empty for non-grid models.
    pub matched_cell_ids: Vec<String>,
    pub thumbnail_uri: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub query: QueryEcho,
    pub region_set_id: Option<String>,
    /// Cells the query box activates; empty for non-grid models.
    pub selected_cell_ids: Vec<String>,
    pub hits: Vec<QueryHit>,
    pub timing_ms: f64,
}

/// URI under which a keyframe's thumbnail is served. Absolute URIs pass through.
pub fn thumbnail_uri(prefix: &str, uri: &str) -> String {
    if uri.contains("://") || uri.starts_with('/') {
        uri.to_string()
    } else {
        format!("{}/{}", prefix.trim_end_matches('/'), uri)
    }
}

/// Runs one query end to end.
pub fn execute_query(engine: &SearchEngine, req: &QueryRequest, thumbnail_prefix: &str) -> Result<QueryResponse, ApiError> {
    let start = Instant::now();
    let spec = req.to_spec()?;
    let result = engine.search(&spec)?;
    let hits = result
        .ranking
        .top(req.top_k)
        .iter()
        .enumerate()
        .map(|(i, h)| QueryHit {
            rank: i + 1,
            image_id: h.image_id.clone(),
            score: h.score,
            matched_cell_ids: h.matched_cell.iter().cloned().collect(),
            thumbnail_uri: engine
                .manifest()
                .get(&h.image_id)
                .map(|e| thumbnail_uri(thumbnail_prefix, &e.uri))
                .unwrap_or_default(),
        })
        .collect();
    Ok(QueryResponse {
        query: QueryEcho {
            text: spec.text.clone(),
            embedded_text: result.text,
            bbox: spec.bbox.map(|b| b.as_array()),
            model: spec.model,
            selection_mode: spec.selection,
            enlargement: spec.enlargement,
            top_k: req.top_k,
        },
        region_set_id: result.region_set_id,
        selected_cell_ids: result.selected_cells,
        hits,
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub layout: LayoutKind,
    pub enlargement: f64,
    pub region_set_id: String,
    /// Whether embeddings for this layout are loaded.
    pub available: bool,
    pub cells: Vec<CellInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellInfo {
    pub id: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

fn grid_info(grid: &GridLayout, available: bool) -> GridInfo {
    GridInfo {
        layout: grid.kind,
        enlargement: grid.enlargement,
        region_set_id: grid.region_set_id(),
        available,
        cells: grid
            .cells
            .iter()
            .map(|c| CellInfo {
                id: c.id.clone(),
                bbox: c.rect.as_array(),
            })
            .collect(),
    }
}

/// Both base layouts, then every enlarged layout with a loaded store.
pub fn list_grids(engine: &SearchEngine) -> Vec<GridInfo> {
    let mut out: Vec<GridInfo> = LayoutKind::ALL
        .iter()
        .map(|&k| {
            let g = GridLayout::build(k);
            grid_info(&g, engine.store(&g.region_set_id()).is_some())
        })
        .collect();
    for store in engine.stores() {
        if let Some(Ok(grid)) = store.region_set().grid() {
            if grid.enlargement > 0.0 {
                out.push(grid_info(&grid, true));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: SearchModel,
    pub requires_box: bool,
    pub layout: Option<LayoutKind>,
    /// Whether the stores this model needs are loaded.
    pub available: bool,
}

pub fn list_models(engine: &SearchEngine) -> Vec<ModelInfo> {
    SearchModel::ALL
        .iter()
        .map(|&m| {
            let available = match m.layout() {
                Some(k) => engine.store(k.name()).is_some(),
                None if m == SearchModel::Theoretical => true,
                None => engine.store("whole").is_some(),
            };
            ModelInfo {
                name: m,
                requires_box: m.requires_box(),
                layout: m.layout(),
                available,
            }
        })
        .collect()
}
