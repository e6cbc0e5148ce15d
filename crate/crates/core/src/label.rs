//! Reference embedding database and nearest-neighbor label verification.
//!
//! Each masked region is pasted onto a white canvas, embedded by the embedder
//! service, and relabeled with the label of the most cosine-similar entry in
//! the reference database. The search is an exhaustive scan.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{from_str_at, Error, Result};
use crate::mask::Mask;

/// Background color for composed crops.
pub const BLANK: Rgb<u8> = Rgb([255, 255, 255]);

const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// One `(label, unit vector)` row of the reference database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingEntry {
    pub label: String,
    pub vector: Vec<f64>,
}

/// Immutable set of reference embeddings sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDb {
    entries: Vec<EmbeddingEntry>,
    dim: usize,
}

/// Scale `v` to unit L2 norm.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteVector("vector has non-finite components".into()));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::NonFiniteVector(format!("norm is {norm}")));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub(crate) fn is_unit(v: &[f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ReferenceDb {
    /// Build a database, renormalizing every vector.
    pub fn from_entries(entries: Vec<EmbeddingEntry>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::EmptyDatabase);
        };
        let dim = first.vector.len();
        if dim == 0 {
            return Err(Error::NonFiniteVector("zero-length vector".into()));
        }
        let mut out = Vec::with_capacity(entries.len());
        for (i, entry) in entries.into_iter().enumerate() {
            if entry.label.is_empty() {
                return Err(Error::InvalidInput(format!("entry {i} has an empty label")));
            }
            if entry.vector.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "entry {i} (`{}`) has dimension {}, expected {dim}",
                    entry.label,
                    entry.vector.len()
                )));
            }
            let vector = normalize(&entry.vector).map_err(|e| match e {
                Error::NonFiniteVector(msg) => {
                    Error::NonFiniteVector(format!("entry {i} (`{}`): {msg}", entry.label))
                }
                other => other,
            })?;
            out.push(EmbeddingEntry {
                label: entry.label,
                vector,
            });
        }
        Ok(Self { entries: out, dim })
    }

    /// Load a JSONL file of `{"label": ..., "vector": [...]}` rows. Blank lines are skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ctx = format!("{}:{}", path.display(), lineno + 1);
            entries.push(from_str_at::<EmbeddingEntry>(&ctx, &line)?);
        }
        Self::from_entries(entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[EmbeddingEntry] {
        &self.entries
    }

    pub fn contains_label(&self, label: &str) -> bool {
        self.entries.iter().any(|e| e.label == label)
    }

    /// Distinct labels in first-seen order.
    pub fn labels(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !seen.contains(&e.label.as_str()) {
                seen.push(&e.label);
            }
        }
        seen
    }
}

/// Result of a nearest-neighbor lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMatch {
    pub label: String,
    pub similarity: f64,
    pub index: usize,
}

/// Label of the reference entry with maximum cosine similarity to `query`.
///
/// The query is renormalized first. Ties keep the lowest entry index.
pub fn nearest_label(query: &[f64], db: &ReferenceDb) -> Result<LabelMatch> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if query.len() != db.dim {
        return Err(Error::DimensionMismatch(format!(
            "query has dimension {}, database has {}",
            query.len(),
            db.dim
        )));
    }
    let q = normalize(query)?;
    let mut best_index = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, entry) in db.entries.iter().enumerate() {
        let sim = dot(&q, &entry.vector);
        if sim > best {
            best = sim;
            best_index = i;
        }
    }
    Ok(LabelMatch {
        label: db.entries[best_index].label.clone(),
        similarity: best.clamp(-1.0, 1.0),
        index: best_index,
    })
}

/// A masked region pasted onto a blank canvas of the source image's size.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop(pub RgbImage);

impl Crop {
    pub fn image(&self) -> &RgbImage {
        &self.0
    }

    pub fn width(&self) -> u32 {
        self.0.width()
    }

    pub fn height(&self) -> u32 {
        self.0.height()
    }

    /// Packed row-major RGB bytes.
    pub fn as_raw(&self) -> &[u8] {
        self.0.as_raw()
    }
}

/// Copy masked pixels of `image` onto a white canvas.
pub fn compose_on_blank(image: &RgbImage, mask: &Mask) -> Result<Crop> {
    if image.dimensions() != mask.dims() {
        return Err(Error::DimensionMismatch(format!(
            "image is {}x{}, mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    let out = RgbImage::from_fn(image.width(), image.height(), |x, y| {
        if mask.get(x, y) {
            *image.get_pixel(x, y)
        } else {
            BLANK
        }
    });
    Ok(Crop(out))
}
