//! Recall/mean-rank evaluation, perturbation sweeps and paired statistics.

mod analysis;
pub mod stats;
mod sweep;

pub use analysis::{mean_iou_report, similarity_delta_analysis, MeanIouReport, SimilarityDeltaReport};
pub use sweep::{sweep, write_sweep_csv, SweepConfig, SWEEP_CSV_HEADER};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Annotation, Subset};
use crate::embed::EmbedError;
use crate::geometry::{draw_index_for, normalize_sigma_area, perturb_box, PerturbationSpec, Rect, SelectionMode};
use crate::retrieval::{QuerySpec, RetrievalError, SearchEngine, SearchModel};

/// Cut-offs reported for recall.
pub const RECALL_KS: [usize; 4] = [1, 10, 100, 1000];

/// Texts per embedder request during evaluation.
const TEXT_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no annotations in subset {0}")]
    Empty(Subset),
    #[error("annotation {annotation} references unknown image {image_id}")]
    UnknownImage { annotation: String, image_id: String },
    #[error("invalid evaluation cell: {0}")]
    InvalidCell(String),
    #[error("embedding query texts: {0}")]
    Embed(#[source] EmbedError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Stats(#[from] stats::StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryLength {
    Short,
    Long,
}

impl QueryLength {
    pub fn name(self) -> &'static str {
        match self {
            QueryLength::Short => "short",
            QueryLength::Long => "long",
        }
    }

    pub fn text(self, a: &Annotation) -> &str {
        match self {
            QueryLength::Short => &a.short_desc,
            QueryLength::Long => &a.long_desc,
        }
    }
}

impl fmt::Display for QueryLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QueryLength {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "short" => Ok(QueryLength::Short),
            "long" => Ok(QueryLength::Long),
            _ => Err(format!("unknown query length {s:?}")),
        }
    }
}

/// How repeated seeds of one annotation enter the metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Every (annotation, seed) pair is one sample.
    #[default]
    PerSample,
    /// Seeds are first averaged into one mean rank per annotation.
    PerAnnotation,
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "per_sample" | "sample" => Ok(Aggregation::PerSample),
            "per_annotation" | "annotation" => Ok(Aggregation::PerAnnotation),
            _ => Err(format!("unknown aggregation {s:?}")),
        }
    }
}

/// One evaluation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub model: SearchModel,
    pub query_length: QueryLength,
    pub subset: Subset,
    #[serde(default)]
    pub selection: SelectionMode,
    #[serde(default)]
    pub enlargement: f64,
    #[serde(default)]
    pub sigma_shift: f64,
    /// Fraction; values above 1 are read as percentages.
    #[serde(default)]
    pub sigma_area: f64,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub select_on_base: bool,
}

impl EvalCell {
    pub fn new(model: SearchModel, query_length: QueryLength, subset: Subset) -> Self {
        Self {
            model,
            query_length,
            subset,
            selection: SelectionMode::default(),
            enlargement: 0.0,
            sigma_shift: 0.0,
            sigma_area: 0.0,
            seeds: Vec::new(),
            aggregation: Aggregation::default(),
            select_on_base: false,
        }
    }

    pub fn with_perturbation(mut self, sigma_shift: f64, sigma_area: f64, seeds: Vec<u64>) -> Self {
        self.sigma_shift = sigma_shift;
        self.sigma_area = sigma_area;
        self.seeds = seeds;
        self
    }

    pub fn with_enlargement(mut self, enlargement: f64) -> Self {
        self.enlargement = enlargement;
        self
    }

    pub fn with_selection(mut self, selection: SelectionMode) -> Self {
        self.selection = selection;
        self
    }

    /// Area std-dev as a fraction.
    pub fn sigma_area_fraction(&self) -> f64 {
        normalize_sigma_area(self.sigma_area)
    }

    pub fn is_perturbed(&self) -> bool {
        self.sigma_shift != 0.0 || self.sigma_area != 0.0
    }

    fn validate(&self) -> Result<(), EvalError> {
        if self.is_perturbed() && self.seeds.is_empty() {
            return Err(EvalError::InvalidCell("perturbed cells need at least one seed".into()));
        }
        if self.model.layout().is_none() && self.enlargement != 0.0 {
            return Err(EvalError::InvalidCell(format!(
                "enlargement applies to grid models only, not {}",
                self.model
            )));
        }
        PerturbationSpec::new(self.sigma_shift, normalize_sigma_area(self.sigma_area), 0)
            .map_err(|e| EvalError::InvalidCell(e.to_string()))?;
        Ok(())
    }

    /// Seeds that produce samples: `[None]` for an unperturbed cell without seeds.
    fn sample_seeds(&self) -> Vec<Option<u64>> {
        if self.seeds.is_empty() {
            vec![None]
        } else {
            self.seeds.iter().copied().map(Some).collect()
        }
    }

    fn query(&self, text: &str, bbox: Rect) -> QuerySpec {
        QuerySpec {
            text: text.to_string(),
            bbox: self.model.requires_box().then_some(bbox),
            model: self.model,
            selection: self.selection,
            enlargement: self.enlargement,
            select_on_base: self.select_on_base,
        }
    }
}

/// Box an annotation is queried with under `seed`. The draw depends only on the
/// annotation id and the seed, so every model sees the same perturbed boxes.
pub fn perturbed_box(a: &Annotation, sigma_shift: f64, sigma_area: f64, seed: Option<u64>) -> Rect {
    let spec = PerturbationSpec {
        sigma_shift,
        sigma_area: normalize_sigma_area(sigma_area),
        seed: seed.unwrap_or(0),
    };
    perturb_box(&a.bbox, &spec, draw_index_for(&a.id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub annotation_id: String,
    pub image_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(rename = "box")]
    pub bbox: Rect,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r1: f64,
    pub r10: f64,
    pub r100: f64,
    pub r1000: f64,
    pub mnr: f64,
    pub n: usize,
}

impl Metrics {
    /// Recall percentages and mean of `ranks`. `None` when empty.
    pub fn from_ranks(ranks: &[f64]) -> Option<Self> {
        if ranks.is_empty() {
            return None;
        }
        let n = ranks.len();
        let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k as f64).count() as f64 / n as f64;
        Some(Self {
            r1: recall(1),
            r10: recall(10),
            r100: recall(100),
            r1000: recall(1000),
            mnr: ranks.iter().sum::<f64>() / n as f64,
            n,
        })
    }

    pub fn recall(&self) -> [f64; 4] {
        [self.r1, self.r10, self.r100, self.r1000]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub model_id: String,
    pub store_ids: Vec<String>,
    pub n_images: usize,
    pub n_annotations: usize,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cell: EvalCell,
    pub metrics: Metrics,
    pub meta: RunMeta,
    pub ranks: Vec<RankRecord>,
}

impl EvalReport {
    /// Stable identifier, used as the report file stem.
    pub fn id(&self) -> &str {
        &self.meta.config_hash
    }
}

fn config_hash(cell: &EvalCell, engine: &SearchEngine, store_ids: &[String], annotations: &[&Annotation]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cell).expect("cell serializes"));
    h.update(engine.embedder().model_id().as_bytes());
    for id in store_ids {
        h.update(b"\0");
        h.update(id.as_bytes());
    }
    for a in annotations {
        h.update(b"\0");
        h.update(serde_json::to_vec(a).expect("annotation serializes"));
    }
    hex::encode(&h.finalize()[..8])
}

fn store_ids_for(cell: &EvalCell, engine: &SearchEngine, sample: &QuerySpec) -> Result<Vec<String>, EvalError> {
    Ok(match cell.model {
        SearchModel::Theoretical => Vec::new(),
        SearchModel::Static5 | SearchModel::Static9 => {
            let (grid, _) = engine.grid_selection(sample)?.expect("grid model");
            vec![grid.region_set_id()]
        }
        _ => vec!["whole".to_string()],
    })
}

/// Ranks every annotation of `cell.subset` (once per seed) under `cell`'s model.
pub fn run_eval(annotations: &[Annotation], cell: &EvalCell, engine: &SearchEngine) -> Result<EvalReport, EvalError> {
    cell.validate()?;
    let selected = cell.subset.filter(annotations);
    if selected.is_empty() {
        return Err(EvalError::Empty(cell.subset));
    }
    for a in &selected {
        if !engine.manifest().contains(&a.image_id) {
            return Err(EvalError::UnknownImage {
                annotation: a.id.clone(),
                image_id: a.image_id.clone(),
            });
        }
    }

    let seeds = cell.sample_seeds();
    // An unperturbed box is the same for every seed, so rank it once.
    let distinct_seeds: Vec<Option<u64>> = if cell.is_perturbed() { seeds.clone() } else { vec![seeds[0]] };

    let mut samples: Vec<(usize, Option<u64>, Rect, QuerySpec)> = Vec::new();
    for (ai, a) in selected.iter().enumerate() {
        for &seed in &distinct_seeds {
            let bbox = perturbed_box(a, cell.sigma_shift, cell.sigma_area, seed);
            samples.push((ai, seed, bbox, cell.query(cell.query_length.text(a), bbox)));
        }
    }
    let store_ids = store_ids_for(cell, engine, &samples[0].3)?;

    let texts: Vec<String> = samples
        .iter()
        .map(|(_, _, _, q)| engine.query_text(q))
        .collect::<Result<_, _>>()?;
    let mut unique: Vec<String> = texts.clone();
    unique.sort();
    unique.dedup();
    let mut embedded: HashMap<&str, Vec<f32>> = HashMap::with_capacity(unique.len());
    for chunk in unique.chunks(TEXT_BATCH) {
        let vectors = engine.embedder().embed_texts(chunk).map_err(EvalError::Embed)?;
        embedded.extend(chunk.iter().map(String::as_str).zip(vectors));
    }

    let ranked: Vec<RankRecord> = samples
        .par_iter()
        .zip(texts.par_iter())
        .map(|((ai, seed, bbox, spec), text)| {
            let a = selected[*ai];
            let result = engine.search_embedded(spec, text.clone(), &embedded[text.as_str()])?;
            let rank = result
                .ranking
                .rank_of(&a.image_id)
                .ok_or_else(|| RetrievalError::MissingTarget(a.image_id.clone()))?;
            Ok(RankRecord {
                annotation_id: a.id.clone(),
                image_id: a.image_id.clone(),
                seed: *seed,
                bbox: *bbox,
                rank,
            })
        })
        .collect::<Result<_, EvalError>>()?;

    let ranks: Vec<RankRecord> = if cell.is_perturbed() {
        ranked
    } else {
        ranked
            .into_iter()
            .flat_map(|r| {
                seeds.iter().map(move |&seed| RankRecord { seed, ..r.clone() })
            })
            .collect()
    };

    let values: Vec<f64> = match cell.aggregation {
        Aggregation::PerSample => ranks.iter().map(|r| r.rank as f64).collect(),
        Aggregation::PerAnnotation => ranks
            .chunks(seeds.len())
            .map(|c| c.iter().map(|r| r.rank as f64).sum::<f64>() / c.len() as f64)
            .collect(),
    };
    let metrics = Metrics::from_ranks(&values).expect("non-empty subset");
    let meta = RunMeta {
        model_id: engine.embedder().model_id().to_string(),
        config_hash: config_hash(cell, engine, &store_ids, &selected),
        store_ids,
        n_images: engine.manifest().len(),
        n_annotations: selected.len(),
    };
    Ok(EvalReport {
        cell: cell.clone(),
        metrics,
        meta,
        ranks,
    })
}

#[cfg(test)]
mod tests;
