//! Annotation collections and keyframe manifests.
//!
//! Both files are UTF-8 with one JSON record per line. An annotation file starts
//! with a header line declaring its coordinate convention:
//!
//! ```text
//! {"coords":"pixel"}
//! {"id":"a1","image_id":"kf_0001","short":"red fish","long":"a small red fish near the rock","x1":10,"y1":20,"x2":200,"y2":180,"skippable":true}
//! ```
//!
//! Manifest lines carry `image_id`, `width`, `height` and `uri`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Rect};

/// Box area above which a warning is emitted.
pub const AREA_WARN: f64 = 0.30;
/// Box area above which a record is rejected.
pub const AREA_REJECT: f64 = 0.35;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing or invalid header, expected {{\"coords\":\"normalized\"|\"pixel\"}}")]
    Header { line: usize },
    #[error("line {line}: record {record:?} references unknown image_id {image_id:?}")]
    UnknownImage {
        line: usize,
        record: String,
        image_id: String,
    },
    #[error("line {line}: record {record:?}: {source}")]
    Box {
        line: usize,
        record: String,
        #[source]
        source: GeometryError,
    },
    #[error("line {line}: record {record:?}: box area {area:.3} exceeds the {limit} cap")]
    AreaTooLarge {
        line: usize,
        record: String,
        area: f64,
        limit: f64,
    },
    #[error("line {line}: record {record:?}: empty {field} description")]
    EmptyText {
        line: usize,
        record: String,
        field: &'static str,
    },
    #[error("line {line}: duplicate {kind} {id:?}")]
    Duplicate {
        line: usize,
        kind: &'static str,
        id: String,
    },
    #[error("line {line}: image {image_id:?} has zero width or height")]
    BadDimensions { line: usize, image_id: String },
    #[error("empty annotation collection")]
    Empty,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeEntry {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub uri: String,
}

#[derive(Debug, Clone, Default)]
pub struct KeyframeManifest {
    entries: Vec<KeyframeEntry>,
    index: HashMap<String, usize>,
}

impl KeyframeManifest {
    pub fn from_entries(entries: Vec<KeyframeEntry>) -> Result<Self, DatasetError> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.width == 0 || e.height == 0 {
                return Err(DatasetError::BadDimensions {
                    line: i + 1,
                    image_id: e.image_id.clone(),
                });
            }
            if index.insert(e.image_id.clone(), i).is_some() {
                return Err(DatasetError::Duplicate {
                    line: i + 1,
                    kind: "image_id",
                    id: e.image_id.clone(),
                });
            }
        }
        Ok(Self { entries, index })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: KeyframeEntry =
                serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            entries.push(entry);
        }
        Self::from_entries(entries)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        for e in &self.entries {
            let line = serde_json::to_string(e).expect("manifest entries serialize");
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn get(&self, image_id: &str) -> Option<&KeyframeEntry> {
        self.index.get(image_id).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.index.contains_key(image_id)
    }

    pub fn entries(&self) -> &[KeyframeEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub image_id: String,
    pub short_desc: String,
    pub long_desc: String,
    #[serde(rename = "box")]
    pub bbox: Rect,
    pub skippable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordSystem {
    Normalized,
    Pixel,
}

#[derive(Deserialize)]
struct Header {
    coords: CoordSystem,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    id: String,
    image_id: String,
    short: String,
    long: String,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    skippable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotator_id: Option<String>,
}

/// Non-fatal findings from loading.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadWarning {
    pub line: usize,
    pub record: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct LoadedAnnotations {
    pub annotations: Vec<Annotation>,
    pub warnings: Vec<LoadWarning>,
}

pub fn load_annotations(
    path: impl AsRef<Path>,
    manifest: &KeyframeManifest,
) -> Result<LoadedAnnotations, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    read_annotations(BufReader::new(file), manifest).map_err(|e| match e {
        DatasetError::Io { source, .. } => DatasetError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

pub fn read_annotations(
    reader: impl BufRead,
    manifest: &KeyframeManifest,
) -> Result<LoadedAnnotations, DatasetError> {
    let mut coords = None;
    let mut annotations = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: "<reader>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(coords) = coords else {
            let header: Header =
                serde_json::from_str(&line).map_err(|_| DatasetError::Header { line: lineno })?;
            coords = Some(header.coords);
            continue;
        };
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
                line: lineno,
                message: e.to_string(),
            })?;
        let ann = validate_record(rec, coords, manifest, lineno, &mut warnings)?;
        if !seen.insert(ann.id.clone()) {
            return Err(DatasetError::Duplicate {
                line: lineno,
                kind: "annotation id",
                id: ann.id,
            });
        }
        annotations.push(ann);
    }
    if coords.is_none() {
        return Err(DatasetError::Header { line: 1 });
    }
    Ok(LoadedAnnotations {
        annotations,
        warnings,
    })
}

fn validate_record(
    rec: AnnotationRecord,
    coords: CoordSystem,
    manifest: &KeyframeManifest,
    line: usize,
    warnings: &mut Vec<LoadWarning>,
) -> Result<Annotation, DatasetError> {
    let entry = manifest
        .get(&rec.image_id)
        .ok_or_else(|| DatasetError::UnknownImage {
            line,
            record: rec.id.clone(),
            image_id: rec.image_id.clone(),
        })?;
    for (field, text) in [("short", &rec.short), ("long", &rec.long)] {
        if text.trim().is_empty() {
            return Err(DatasetError::EmptyText {
                line,
                record: rec.id.clone(),
                field,
            });
        }
    }
    let bbox = match coords {
        CoordSystem::Normalized => Rect::new(rec.x1, rec.y1, rec.x2, rec.y2),
        CoordSystem::Pixel => {
            Rect::from_pixels(rec.x1, rec.y1, rec.x2, rec.y2, entry.width, entry.height)
        }
    }
    .map_err(|source| DatasetError::Box {
        line,
        record: rec.id.clone(),
        source,
    })?;
    let area = bbox.area();
    if area > AREA_REJECT {
        return Err(DatasetError::AreaTooLarge {
            line,
            record: rec.id,
            area,
            limit: AREA_REJECT,
        });
    }
    if area > AREA_WARN {
        warnings.push(LoadWarning {
            line,
            record: rec.id.clone(),
            message: format!("box area {area:.3} exceeds the {AREA_WARN} cap"),
        });
    }
    Ok(Annotation {
        id: rec.id,
        image_id: rec.image_id,
        short_desc: rec.short,
        long_desc: rec.long,
        bbox,
        skippable: rec.skippable,
        annotator_id: rec.annotator_id,
    })
}

/// Writes annotations in normalized coordinates.
pub fn write_annotations(mut w: impl Write, annotations: &[Annotation]) -> io::Result<()> {
    writeln!(w, "{{\"coords\":\"normalized\"}}")?;
    for a in annotations {
        let rec = AnnotationRecord {
            id: a.id.clone(),
            image_id: a.image_id.clone(),
            short: a.short_desc.clone(),
            long: a.long_desc.clone(),
            x1: a.bbox.x1,
            y1: a.bbox.y1,
            x2: a.bbox.x2,
            y2: a.bbox.y2,
            skippable: a.skippable,
            annotator_id: a.annotator_id.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).map_err(io::Error::other)?)?;
    }
    Ok(())
}

pub fn save_annotations(path: impl AsRef<Path>, annotations: &[Annotation]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    write_annotations(&mut w, annotations).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Skippable,
    NonSkippable,
    All,
}

impl Subset {
    pub fn name(self) -> &'static str {
        match self {
            Subset::Skippable => "skippable",
            Subset::NonSkippable => "non_skippable",
            Subset::All => "all",
        }
    }

    pub fn matches(self, a: &Annotation) -> bool {
        match self {
            Subset::Skippable => a.skippable,
            Subset::NonSkippable => !a.skippable,
            Subset::All => true,
        }
    }

    pub fn filter(self, annotations: &[Annotation]) -> Vec<&Annotation> {
        annotations.iter().filter(|a| self.matches(a)).collect()
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "skippable" => Ok(Subset::Skippable),
            "non_skippable" | "nonskippable" => Ok(Subset::NonSkippable),
            "all" | "total" => Ok(Subset::All),
            _ => Err(format!("unknown subset {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for fewer than two values.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetStats {
    pub count: usize,
    /// Characters in the short description, spaces included.
    pub short_chars: Option<MeanStd>,
    pub long_chars: Option<MeanStd>,
    /// Box area as a percentage of the frame.
    pub area_pct: Option<MeanStd>,
}

impl SubsetStats {
    fn of<'a>(annotations: impl Iterator<Item = &'a Annotation> + Clone) -> Self {
        let col = |f: &dyn Fn(&Annotation) -> f64| -> Vec<f64> { annotations.clone().map(f).collect() };
        let short = col(&|a| a.short_desc.chars().count() as f64);
        Self {
            count: short.len(),
            short_chars: MeanStd::of(&short),
            long_chars: MeanStd::of(&col(&|a| a.long_desc.chars().count() as f64)),
            area_pct: MeanStd::of(&col(&|a| a.bbox.area() * 100.0)),
        }
    }
}

/// Box coverage accumulated over a `width × height` bin grid. Each bin receives the
/// fraction of its own area covered by each box.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major, `height` rows of `width` bins.
    pub bins: Vec<f64>,
}

impl Heatmap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bins: vec![0.0; width * height],
        }
    }

    pub fn add(&mut self, b: &Rect) {
        let (w, h) = (self.width as f64, self.height as f64);
        let cols = (b.x1 * w).floor() as usize..((b.x2 * w).ceil() as usize).min(self.width);
        let rows = (b.y1 * h).floor() as usize..((b.y2 * h).ceil() as usize).min(self.height);
        for row in rows {
            let (ry1, ry2) = (row as f64 / h, (row + 1) as f64 / h);
            let cover_y = (b.y2.min(ry2) - b.y1.max(ry1)).max(0.0) * h;
            for col in cols.clone() {
                let (rx1, rx2) = (col as f64 / w, (col + 1) as f64 / w);
                let cover_x = (b.x2.min(rx2) - b.x1.max(rx1)).max(0.0) * w;
                self.bins[row * self.width + col] += cover_x * cover_y;
            }
        }
    }

    pub fn total(&self) -> f64 {
        self.bins.iter().sum()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.bins[row * self.width + col]
    }
}

pub const HEATMAP_WIDTH: usize = 64;
pub const HEATMAP_HEIGHT: usize = 36;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub skippable: SubsetStats,
    pub non_skippable: SubsetStats,
    pub total: SubsetStats,
    #[serde(skip)]
    pub heatmaps: [(Subset, Heatmap); 3],
}

pub fn summarize(annotations: &[Annotation]) -> Result<DatasetStats, DatasetError> {
    summarize_with(annotations, HEATMAP_WIDTH, HEATMAP_HEIGHT)
}

pub fn summarize_with(
    annotations: &[Annotation],
    heatmap_width: usize,
    heatmap_height: usize,
) -> Result<DatasetStats, DatasetError> {
    if annotations.is_empty() {
        return Err(DatasetError::Empty);
    }
    let subset = |s: Subset| annotations.iter().filter(move |a| s.matches(a));
    let heatmap = |s: Subset| {
        let mut h = Heatmap::new(heatmap_width, heatmap_height);
        subset(s).for_each(|a| h.add(&a.bbox));
        (s, h)
    };
    Ok(DatasetStats {
        skippable: SubsetStats::of(subset(Subset::Skippable)),
        non_skippable: SubsetStats::of(subset(Subset::NonSkippable)),
        total: SubsetStats::of(subset(Subset::All)),
        heatmaps: [
            heatmap(Subset::All),
            heatmap(Subset::Skippable),
            heatmap(Subset::NonSkippable),
        ],
    })
}

/// Long-format heatmap CSV: `subset,row,col,value`.
pub fn write_heatmap_csv(mut w: impl Write, stats: &DatasetStats) -> io::Result<()> {
    writeln!(w, "subset,row,col,value")?;
    for (subset, h) in &stats.heatmaps {
        for row in 0..h.height {
            for col in 0..h.width {
                writeln!(w, "{},{},{},{}", subset.name(), row, col, h.get(row, col))?;
            }
        }
    }
    Ok(())
}
