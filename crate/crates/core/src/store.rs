//! Unit-norm embedding matrices keyed by `(image_id, cell_id)`.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! magic          b"GSES"
//! version        u16   (1)
//! reserved       u16   (0)
//! dim            u32
//! row_count      u64
//! region_set     u16 length + UTF-8 bytes
//! row index      row_count × (u16 length + image_id bytes, u16 length + cell_id bytes)
//! padding        zero bytes up to a 4-byte boundary
//! matrix         row_count × dim × f32
//! ```
//!
//! Rows are ordered by `image_id`, then by the region set's cell order, so every
//! image owns a contiguous block of `cells` rows.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::KeyframeManifest;
use crate::embed::{EmbedError, Embedder};
use crate::geometry::{GeometryError, RegionSet};
use crate::vector;

pub const STORE_MAGIC: [u8; 4] = *b"GSES";
pub const STORE_VERSION: u16 = 1;
pub const STORE_EXTENSION: &str = "gses";

/// Rows must have this L2 norm within `1e-4`.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad store file: {0}")]
    Format(String),
    #[error("expected {expected} vectors, found {found}")]
    Count { expected: usize, found: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dim { expected: usize, actual: usize },
    #[error("non-finite value in row ({image_id}, {cell_id})")]
    NonFinite { image_id: String, cell_id: String },
    #[error("non-normalizable row ({image_id}, {cell_id})")]
    ZeroRow { image_id: String, cell_id: String },
    #[error("duplicate row ({image_id}, {cell_id})")]
    Duplicate { image_id: String, cell_id: String },
    #[error("image {image_id} has {found} of {expected} rows")]
    Incomplete {
        image_id: String,
        expected: usize,
        found: usize,
    },
    #[error("cell {cell_id:?} is not part of region set {region_set}")]
    UnknownCell { region_set: String, cell_id: String },
    #[error("no row for ({image_id}, {cell_id})")]
    MissingKey { image_id: String, cell_id: String },
    #[error(transparent)]
    Region(#[from] GeometryError),
    #[error("embedding image {image_id}: {source}")]
    Embed {
        image_id: String,
        #[source]
        source: EmbedError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    region_set: RegionSet,
    region_set_id: String,
    cell_ids: Vec<String>,
    dim: usize,
    image_ids: Vec<String>,
    image_index: HashMap<String, usize>,
    data: Vec<f32>,
}

/// A single input row for [`EmbeddingStore::from_rows`].
#[derive(Debug, Clone)]
pub struct StoreRow {
    pub image_id: String,
    pub cell_id: String,
    pub vector: Vec<f32>,
}

/// Sidecar header describing a raw vector file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawVectorsHeader {
    pub rows: usize,
    pub dim: usize,
    #[serde(default)]
    pub dtype: RawDtype,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawDtype {
    #[default]
    F32,
    F64,
}

/// Sidecar path for a raw vector file: `<vectors>.json`.
pub fn sidecar_path(vectors: &Path) -> PathBuf {
    let mut p = vectors.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

impl EmbeddingStore {
    /// Builds a store from loose rows: re-normalizes, checks keys and completeness,
    /// and sorts into canonical order.
    pub fn from_rows(
        region_set: RegionSet,
        dim: usize,
        rows: impl IntoIterator<Item = StoreRow>,
    ) -> Result<Self, StoreError> {
        let cell_ids: Vec<String> = region_set.regions()?.into_iter().map(|c| c.id).collect();
        let cell_pos: HashMap<&str, usize> = cell_ids
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let region_set_id = region_set.id();

        let mut per_image: HashMap<String, Vec<Option<Vec<f32>>>> = HashMap::new();
        for row in rows {
            if row.vector.len() != dim {
                return Err(StoreError::Dim {
                    expected: dim,
                    actual: row.vector.len(),
                });
            }
            let &pos = cell_pos
                .get(row.cell_id.as_str())
                .ok_or_else(|| StoreError::UnknownCell {
                    region_set: region_set_id.clone(),
                    cell_id: row.cell_id.clone(),
                })?;
            if row.vector.iter().any(|x| !x.is_finite()) {
                return Err(StoreError::NonFinite {
                    image_id: row.image_id,
                    cell_id: row.cell_id,
                });
            }
            let Some(unit) = vector::unit(&row.vector) else {
                return Err(StoreError::ZeroRow {
                    image_id: row.image_id,
                    cell_id: row.cell_id,
                });
            };
            let slots = per_image
                .entry(row.image_id.clone())
                .or_insert_with(|| vec![None; cell_ids.len()]);
            if slots[pos].replace(unit).is_some() {
                return Err(StoreError::Duplicate {
                    image_id: row.image_id,
                    cell_id: row.cell_id,
                });
            }
        }

        let mut image_ids: Vec<String> = per_image.keys().cloned().collect();
        image_ids.sort();
        let mut data = Vec::with_capacity(image_ids.len() * cell_ids.len() * dim);
        for image_id in &image_ids {
            let slots = per_image.remove(image_id).expect("key collected above");
            let found = slots.iter().filter(|s| s.is_some()).count();
            if found != cell_ids.len() {
                return Err(StoreError::Incomplete {
                    image_id: image_id.clone(),
                    expected: cell_ids.len(),
                    found,
                });
            }
            for v in slots.into_iter().flatten() {
                data.extend_from_slice(&v);
            }
        }
        Ok(Self::assemble(region_set, cell_ids, dim, image_ids, data))
    }

    fn assemble(
        region_set: RegionSet,
        cell_ids: Vec<String>,
        dim: usize,
        image_ids: Vec<String>,
        data: Vec<f32>,
    ) -> Self {
        let image_index = image_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Self {
            region_set_id: region_set.id(),
            region_set,
            cell_ids,
            dim,
            image_ids,
            image_index,
            data,
        }
    }

    /// Reads a raw row-major vector file (manifest order × cell order) described by
    /// its `<vectors>.json` sidecar.
    pub fn ingest(
        manifest: &KeyframeManifest,
        vectors_path: impl AsRef<Path>,
        region_set: RegionSet,
    ) -> Result<Self, StoreError> {
        let vectors_path = vectors_path.as_ref();
        let sidecar = sidecar_path(vectors_path);
        let header: RawVectorsHeader = serde_json::from_reader(
            File::open(&sidecar).map_err(io_err(&sidecar))?,
        )
        .map_err(|e| StoreError::Format(format!("{}: {e}", sidecar.display())))?;
        let cells = region_set.regions()?;
        let expected = manifest.len() * cells.len();
        if header.rows != expected {
            return Err(StoreError::Count {
                expected,
                found: header.rows,
            });
        }
        let mut bytes = Vec::new();
        File::open(vectors_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(vectors_path))?;
        let width = match header.dtype {
            RawDtype::F32 => 4,
            RawDtype::F64 => 8,
        };
        if bytes.len() != header.rows * header.dim * width {
            return Err(StoreError::Count {
                expected: header.rows * header.dim,
                found: bytes.len() / width,
            });
        }
        let values: Vec<f32> = match header.dtype {
            RawDtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            RawDtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
                .collect(),
        };
        let (values, cells) = (&values, &cells);
        let rows = manifest.entries().iter().enumerate().flat_map(|(i, entry)| {
            cells.iter().enumerate().map(move |(j, cell)| {
                let start = (i * cells.len() + j) * header.dim;
                StoreRow {
                    image_id: entry.image_id.clone(),
                    cell_id: cell.id.clone(),
                    vector: values[start..start + header.dim].to_vec(),
                }
            })
        });
        Self::from_rows(region_set, header.dim, rows)
    }

    /// Embeds every region of every manifest image through `embedder`.
    pub fn from_embedder(
        manifest: &KeyframeManifest,
        region_set: RegionSet,
        embedder: &dyn Embedder,
    ) -> Result<Self, StoreError> {
        let cells = region_set.regions()?;
        let rows: Vec<Vec<StoreRow>> = manifest
            .entries()
            .par_iter()
            .map(|entry| {
                cells
                    .iter()
                    .map(|cell| {
                        embedder
                            .embed_crop(&entry.image_id, &entry.uri, &cell.rect)
                            .map(|vector| StoreRow {
                                image_id: entry.image_id.clone(),
                                cell_id: cell.id.clone(),
                                vector,
                            })
                            .map_err(|source| StoreError::Embed {
                                image_id: entry.image_id.clone(),
                                source,
                            })
                    })
                    .collect()
            })
            .collect::<Result<_, _>>()?;
        Self::from_rows(region_set, embedder.dim(), rows.into_iter().flatten())
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        let mut header = Vec::new();
        header.extend_from_slice(&STORE_MAGIC);
        header.extend_from_slice(&STORE_VERSION.to_le_bytes());
        header.extend_from_slice(&0u16.to_le_bytes());
        header.extend_from_slice(&(self.dim as u32).to_le_bytes());
        header.extend_from_slice(&(self.n_rows() as u64).to_le_bytes());
        put_str(&mut header, &self.region_set_id)?;
        for image_id in &self.image_ids {
            for cell_id in &self.cell_ids {
                put_str(&mut header, image_id)?;
                put_str(&mut header, cell_id)?;
            }
        }
        header.resize(header.len().next_multiple_of(4), 0);
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        self.write_to(&mut w).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != STORE_MAGIC {
            return Err(StoreError::Format("bad magic".into()));
        }
        let version = r.u16()?;
        if version != STORE_VERSION {
            return Err(StoreError::Format(format!("unsupported version {version}")));
        }
        r.u16()?;
        let dim = r.u32()? as usize;
        let n_rows = usize::try_from(r.u64()?).map_err(|_| StoreError::Format("row count".into()))?;
        let region_set_id = r.string()?;
        let region_set: RegionSet = region_set_id.parse()?;
        let cell_ids: Vec<String> = region_set.regions()?.into_iter().map(|c| c.id).collect();
        if dim == 0 || n_rows % cell_ids.len() != 0 {
            return Err(StoreError::Format(format!(
                "{n_rows} rows of dim {dim} do not fit region set {region_set_id}"
            )));
        }
        let mut image_ids = Vec::with_capacity(n_rows / cell_ids.len());
        for row in 0..n_rows {
            let image_id = r.string()?;
            let cell_id = r.string()?;
            let expected_cell = &cell_ids[row % cell_ids.len()];
            if &cell_id != expected_cell {
                return Err(StoreError::Format(format!(
                    "row {row}: expected cell {expected_cell}, found {cell_id}"
                )));
            }
            if row % cell_ids.len() == 0 {
                if image_ids.last().is_some_and(|prev: &String| prev >= &image_id) {
                    return Err(StoreError::Format(format!("row {row}: images out of order")));
                }
                image_ids.push(image_id);
            } else if image_ids.last() != Some(&image_id) {
                return Err(StoreError::Format(format!("row {row}: image block broken")));
            }
        }
        r.pos = r.pos.next_multiple_of(4);
        let body = r.take(n_rows * dim * 4)?;
        if r.pos != bytes.len() {
            return Err(StoreError::Format("trailing bytes".into()));
        }
        let data: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let store = Self::assemble(region_set, cell_ids, dim, image_ids, data);
        store.check_norms()?;
        Ok(store)
    }

    fn check_norms(&self) -> Result<(), StoreError> {
        for (i, row) in self.data.chunks_exact(self.dim).enumerate() {
            let n = vector::norm(row);
            if !n.is_finite() || (n - 1.0).abs() > NORM_TOLERANCE {
                let image_id = self.image_ids[i / self.cell_ids.len()].clone();
                let cell_id = self.cell_ids[i % self.cell_ids.len()].clone();
                return Err(StoreError::Format(format!(
                    "row ({image_id}, {cell_id}) has norm {n}"
                )));
            }
        }
        Ok(())
    }

    pub fn region_set(&self) -> RegionSet {
        self.region_set
    }

    pub fn region_set_id(&self) -> &str {
        &self.region_set_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cell_ids(&self) -> &[String] {
        &self.cell_ids
    }

    pub fn cells_per_image(&self) -> usize {
        self.cell_ids.len()
    }

    /// Image ids in store order (sorted).
    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn n_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn n_rows(&self) -> usize {
        self.image_ids.len() * self.cell_ids.len()
    }

    pub fn contains_image(&self, image_id: &str) -> bool {
        self.image_index.contains_key(image_id)
    }

    pub fn image_position(&self, image_id: &str) -> Option<usize> {
        self.image_index.get(image_id).copied()
    }

    pub fn cell_position(&self, cell_id: &str) -> Option<usize> {
        self.cell_ids.iter().position(|c| c == cell_id)
    }

    /// The `cells × dim` block of the image at store position `pos`.
    pub fn image_block(&self, pos: usize) -> &[f32] {
        let stride = self.cell_ids.len() * self.dim;
        &self.data[pos * stride..(pos + 1) * stride]
    }

    pub fn row(&self, image_id: &str, cell_id: &str) -> Option<&[f32]> {
        let img = self.image_position(image_id)?;
        let cell = self.cell_position(cell_id)?;
        let start = (img * self.cell_ids.len() + cell) * self.dim;
        Some(&self.data[start..start + self.dim])
    }

    /// Rows for `cell_ids` of one image, in the order requested.
    pub fn rows_for<S: AsRef<str>>(
        &self,
        image_id: &str,
        cell_ids: &[S],
    ) -> Result<Vec<&[f32]>, StoreError> {
        cell_ids
            .iter()
            .map(|c| {
                self.row(image_id, c.as_ref())
                    .ok_or_else(|| StoreError::MissingKey {
                        image_id: image_id.to_string(),
                        cell_id: c.as_ref().to_string(),
                    })
            })
            .collect()
    }

    /// The whole matrix, row-major.
    pub fn matrix(&self) -> &[f32] {
        &self.data
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> io::Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, format!("id too long: {s}")))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| StoreError::Format("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, StoreError> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| StoreError::Format("invalid UTF-8 id".into()))
    }
}

/// Loads every `*.gses` file in `dir`, keyed by region set id.
pub fn load_store_dir(dir: impl AsRef<Path>) -> Result<Vec<EmbeddingStore>, StoreError> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == STORE_EXTENSION))
        .collect();
    paths.sort();
    paths.iter().map(EmbeddingStore::open).collect()
}

/// Canonical file name for a store: `<region_set_id>.gses`.
pub fn store_file_name(region_set_id: &str) -> String {
    format!("{region_set_id}.{STORE_EXTENSION}")
}
