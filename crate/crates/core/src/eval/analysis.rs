use serde::{Deserialize, Serialize};

use super::stats::{pearson, wilcoxon_signed_rank, WilcoxonResult};
use super::{EvalError, QueryLength};
use crate::dataset::Annotation;
use crate::embed::Embedder;
use crate::geometry::{iou, select_cell_indices, GridLayout, SelectionMode};
use crate::retrieval::{score_target_substitution, score_whole, RetrievalError, TargetEmbedding};
use crate::store::EmbeddingStore;
use crate::vector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDeltaReport {
    pub n: usize,
    pub region_set_id: String,
    /// Mean cosine between query and the target's whole-frame vector.
    pub mean_s_whole: f64,
    /// Mean cosine between query and the target's best-IoU cell vector.
    pub mean_s_part: f64,
    /// Correlation of `s_part - s_whole` with `rank_part - rank_whole`.
    pub pearson_ds_dr: Option<f64>,
    pub pearson_error: Option<String>,
    /// Paired test of `s_part` against `s_whole`.
    pub wilcoxon: Option<WilcoxonResult>,
    pub wilcoxon_error: Option<String>,
    pub s_whole: Vec<f64>,
    pub s_part: Vec<f64>,
    pub rank_whole: Vec<usize>,
    /// Target rank when only the target is scored from its cell.
    pub rank_part: Vec<usize>,
}

/// Compares whole-frame and best-cell similarity of each annotation's target, and
/// how the difference moves the target's rank when only the target is scored from
/// its cell.
pub fn similarity_delta_analysis(
    annotations: &[Annotation],
    length: QueryLength,
    store_whole: &EmbeddingStore,
    store_grid: &EmbeddingStore,
    grid: &GridLayout,
    embedder: &dyn Embedder,
) -> Result<SimilarityDeltaReport, EvalError> {
    let n = annotations.len();
    let texts: Vec<String> = annotations.iter().map(|a| length.text(a).to_string()).collect();
    let queries = embedder.embed_texts(&texts).map_err(EvalError::Embed)?;
    let mut out = SimilarityDeltaReport {
        n,
        region_set_id: grid.region_set_id(),
        mean_s_whole: 0.0,
        mean_s_part: 0.0,
        pearson_ds_dr: None,
        pearson_error: None,
        wilcoxon: None,
        wilcoxon_error: None,
        s_whole: Vec::with_capacity(n),
        s_part: Vec::with_capacity(n),
        rank_whole: Vec::with_capacity(n),
        rank_part: Vec::with_capacity(n),
    };
    for (a, f_t) in annotations.iter().zip(&queries) {
        let missing = || RetrievalError::MissingTarget(a.image_id.clone());
        let q = vector::unit(f_t).ok_or(RetrievalError::BadQuery)?;
        let whole = store_whole.image_position(&a.image_id).ok_or_else(missing)?;
        let cell = &grid.cells[select_cell_indices(grid, &a.bbox, SelectionMode::ArgmaxIou)[0]];
        let part = store_grid.row(&a.image_id, &cell.id).ok_or_else(missing)?;
        out.s_whole.push(f64::from(vector::dot(store_whole.image_block(whole), &q)));
        out.s_part.push(f64::from(vector::dot(part, &q)));
        out.rank_whole
            .push(score_whole(store_whole, &q)?.rank_of(&a.image_id).ok_or_else(missing)?);
        let sub = score_target_substitution(
            store_whole,
            store_grid,
            grid,
            &a.bbox,
            &a.image_id,
            &q,
            TargetEmbedding::GridCell,
        )?;
        out.rank_part.push(sub.rank_of(&a.image_id).ok_or_else(missing)?);
    }
    if n > 0 {
        out.mean_s_whole = out.s_whole.iter().sum::<f64>() / n as f64;
        out.mean_s_part = out.s_part.iter().sum::<f64>() / n as f64;
    }
    let ds: Vec<f64> = out.s_part.iter().zip(&out.s_whole).map(|(p, w)| p - w).collect();
    let dr: Vec<f64> = out
        .rank_part
        .iter()
        .zip(&out.rank_whole)
        .map(|(p, w)| *p as f64 - *w as f64)
        .collect();
    match pearson(&ds, &dr) {
        Ok(r) => out.pearson_ds_dr = Some(r),
        Err(e) => out.pearson_error = Some(e.to_string()),
    }
    match wilcoxon_signed_rank(&out.s_part, &out.s_whole) {
        Ok(w) => out.wilcoxon = Some(w),
        Err(e) => out.wilcoxon_error = Some(e.to_string()),
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanIouReport {
    pub n: usize,
    /// Mean IoU of the annotation box with the full frame (its area).
    pub whole_frame: f64,
    /// `(region set id, mean best-cell IoU)` per grid.
    pub grids: Vec<(String, f64)>,
}

/// Mean IoU between each annotation box and its best-matching cell, per grid.
pub fn mean_iou_report(annotations: &[Annotation], grids: &[GridLayout]) -> Option<MeanIouReport> {
    if annotations.is_empty() {
        return None;
    }
    let n = annotations.len() as f64;
    let whole_frame = annotations.iter().map(|a| a.bbox.area()).sum::<f64>() / n;
    let grids = grids
        .iter()
        .map(|g| {
            let total: f64 = annotations
                .iter()
                .map(|a| {
                    let best = select_cell_indices(g, &a.bbox, SelectionMode::ArgmaxIou)[0];
                    iou(&g.cells[best].rect, &a.bbox)
                })
                .sum();
            (g.region_set_id(), total / n)
        })
        .collect();
    Some(MeanIouReport {
        n: annotations.len(),
        whole_frame,
        grids,
    })
}
