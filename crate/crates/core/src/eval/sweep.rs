use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_eval, Aggregation, EvalCell, EvalError, EvalReport, QueryLength};
use crate::dataset::{Annotation, Subset};
use crate::geometry::SelectionMode;
use crate::retrieval::{SearchEngine, SearchModel};

pub const SWEEP_CSV_HEADER: &str =
    "model,length,subset,selection,enlargement,sigma_s,sigma_a,seed_count,R1,R10,R100,R1000,MNR,N";

/// Cartesian product of evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub models: Vec<SearchModel>,
    #[serde(default = "default_lengths")]
    pub lengths: Vec<QueryLength>,
    #[serde(default = "default_subsets")]
    pub subsets: Vec<Subset>,
    #[serde(default = "default_selections")]
    pub selections: Vec<SelectionMode>,
    #[serde(default = "default_enlargements")]
    pub enlargements: Vec<f64>,
    /// `(sigma_shift, sigma_area)`; area values above 1 are percentages.
    #[serde(default = "default_sigma_pairs")]
    pub sigma_pairs: Vec<(f64, f64)>,
    /// Number of seeds per perturbed cell.
    #[serde(default = "default_seed_count")]
    pub seed_count: u64,
    /// First seed; cells use `seed .. seed + seed_count`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub select_on_base: bool,
}

fn default_lengths() -> Vec<QueryLength> {
    vec![QueryLength::Long]
}

fn default_subsets() -> Vec<Subset> {
    vec![Subset::All]
}

fn default_selections() -> Vec<SelectionMode> {
    vec![SelectionMode::AnyOverlap]
}

fn default_enlargements() -> Vec<f64> {
    vec![0.0]
}

fn default_sigma_pairs() -> Vec<(f64, f64)> {
    vec![(0.0, 0.0)]
}

fn default_seed_count() -> u64 {
    5
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn seeds(&self) -> Vec<u64> {
        (self.seed..self.seed + self.seed_count).collect()
    }

    /// Cells in canonical order. Non-grid models ignore enlargement and selection and
    /// so appear once per remaining combination.
    pub fn cells(&self) -> Vec<EvalCell> {
        let mut out = Vec::new();
        for &model in &self.models {
            let grid = model.layout().is_some();
            let selections: &[SelectionMode] = if grid { &self.selections } else { &self.selections[..1.min(self.selections.len())] };
            let enlargements: &[f64] = if grid { &self.enlargements } else { &[0.0] };
            for &length in &self.lengths {
                for &subset in &self.subsets {
                    for &selection in selections {
                        for &enlargement in enlargements {
                            for &(ss, sa) in &self.sigma_pairs {
                                let mut cell = EvalCell::new(model, length, subset)
                                    .with_selection(selection)
                                    .with_enlargement(enlargement)
                                    .with_perturbation(ss, sa, self.seeds());
                                cell.aggregation = self.aggregation;
                                cell.select_on_base = self.select_on_base;
                                out.push(cell);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Runs every cell of `config` on a pool of `jobs` threads (0 = rayon default).
/// Reports come back in [`SweepConfig::cells`] order.
pub fn sweep(
    annotations: &[Annotation],
    config: &SweepConfig,
    engine: &SearchEngine,
    jobs: usize,
) -> Result<Vec<EvalReport>, EvalError> {
    let cells = config.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| EvalError::InvalidCell(e.to_string()))?;
    pool.install(|| {
        cells
            .par_iter()
            .map(|cell| run_eval(annotations, cell, engine))
            .collect()
    })
}

/// One long-format CSV row per report.
pub fn write_sweep_csv(mut w: impl Write, reports: &[EvalReport]) -> io::Result<()> {
    writeln!(w, "{SWEEP_CSV_HEADER}")?;
    for r in reports {
        let c = &r.cell;
        let m = &r.metrics;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.model,
            c.query_length,
            c.subset,
            c.selection,
            c.enlargement,
            c.sigma_shift,
            c.sigma_area_fraction(),
            c.seeds.len(),
            m.r1,
            m.r10,
            m.r100,
            m.r1000,
            m.mnr,
            m.n
        )?;
    }
    Ok(())
}
