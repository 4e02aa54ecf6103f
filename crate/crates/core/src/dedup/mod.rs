//! Train/test overlap detection by image-embedding cosine similarity.
//!
//! Test images whose best train match reaches a threshold count as
//! overlapped; accuracy is then re-measured on the remainder.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Dataset;
use crate::metrics::predictions;
use crate::model::{dual::normalized, Classifier, ImageEmbedder};
use crate::parallel::try_map_indexed;
use crate::tape::dot;

mod projection;

pub use projection::RandomProjectionEmbedder;

pub const INDEX_MAGIC: &[u8; 4] = b"ROZE";
const INDEX_VERSION: u32 = 1;
/// Largest tolerated deviation of a stored vector's norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.80, 0.85, 0.90, 0.95, 0.99];

/// Unit-norm embeddings of one dataset. Values are held at `f32` precision so
/// the file format round-trips exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub dataset_id: String,
    pub encoder_id: String,
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingIndex {
    pub fn new(dataset_id: impl Into<String>, encoder_id: impl Into<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        let mut stored = Vec::with_capacity(vectors.len());
        for (i, v) in vectors.into_iter().enumerate() {
            if v.len() != dim {
                return Err(Error::ShapeMismatch { expected: format!("{dim}-d embedding"), got: format!("{}-d at row {i}", v.len()) });
            }
            if v.iter().any(|x| !x.is_finite()) || v.iter().all(|x| *x == 0.0) {
                return Err(Error::NonFinite(format!("embedding row {i} cannot be normalized")));
            }
            stored.push(normalized(v).into_iter().map(|x| x as f32 as f64).collect());
        }
        let index = Self { dataset_id: dataset_id.into(), encoder_id: encoder_id.into(), dim, vectors: stored };
        index.check_norms()?;
        Ok(index)
    }

    fn check_norms(&self) -> Result<()> {
        for (i, v) in self.vectors.iter().enumerate() {
            let n = dot(v, v).sqrt();
            if (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Format(format!("row {i} has norm {n}")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        for s in [&self.encoder_id, &self.dataset_id] {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&(self.vectors.len() as u64).to_le_bytes())?;
        for v in &self.vectors {
            for x in v {
                w.write_all(&(*x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if &b4 != INDEX_MAGIC {
            return Err(Error::Format(format!("bad index magic {b4:?}")));
        }
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {}", u32::from_le_bytes(b4))));
        }
        let mut strings = Vec::with_capacity(2);
        for _ in 0..2 {
            r.read_exact(&mut b4)?;
            let mut s = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut s)?;
            strings.push(String::from_utf8(s).map_err(|e| Error::Format(e.to_string()))?);
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let dim = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let rows = u64::from_le_bytes(b8) as usize;
        let mut bytes = vec![0u8; dim * rows * 4];
        r.read_exact(&mut bytes)?;
        let flat: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let vectors = if dim == 0 { vec![Vec::new(); rows] } else { flat.chunks_exact(dim).map(<[f64]>::to_vec).collect() };
        let dataset_id = strings.pop().expect("two strings");
        let encoder_id = strings.pop().expect("two strings");
        let index = Self { dataset_id, encoder_id, dim, vectors };
        index.check_norms()?;
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

/// Embeds every image of `dataset`; rows follow dataset order.
pub fn build_embedding_index(encoder: &dyn ImageEmbedder, dataset: &Dataset, workers: usize) -> Result<EmbeddingIndex> {
    let vectors = try_map_indexed(workers, dataset.len(), |i| encoder.embed_image(&dataset.examples[i].image))?;
    EmbeddingIndex::new(dataset.identity(), encoder.embedder_id(), vectors)
}

/// A flagged test image and its most similar train image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub test_id: usize,
    pub train_id: usize,
    pub similarity: f64,
}

fn check_compatible(test: &EmbeddingIndex, train: &EmbeddingIndex) -> Result<()> {
    if test.encoder_id != train.encoder_id {
        return Err(invalid(format!("encoder mismatch: {} vs {}", test.encoder_id, train.encoder_id)));
    }
    if test.dim != train.dim && !test.is_empty() && !train.is_empty() {
        return Err(Error::ShapeMismatch { expected: format!("{}-d", test.dim), got: format!("{}-d", train.dim) });
    }
    Ok(())
}

/// Highest-similarity train row among `candidates`; ties go to the lowest id.
fn best_of(query: &[f64], train: &EmbeddingIndex, candidates: impl Iterator<Item = usize>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for j in candidates {
        let s = dot(query, train.row(j));
        match best {
            Some((bj, bs)) if s < bs || (s == bs && j > bj) => {}
            _ => best = Some((j, s)),
        }
    }
    best
}

/// Reference path: every test row against every train row.
pub fn detect_overlaps_exhaustive(test: &EmbeddingIndex, train: &EmbeddingIndex, threshold: f64, workers: usize) -> Result<Vec<Overlap>> {
    check_compatible(test, train)?;
    let best = try_map_indexed(workers, test.len(), |i| Ok(best_of(test.row(i), train, 0..train.len())))?;
    Ok(collect_flags(best, threshold))
}

fn collect_flags(best: Vec<Option<(usize, f64)>>, threshold: f64) -> Vec<Overlap> {
    best.into_iter()
        .enumerate()
        .filter_map(|(test_id, b)| b.filter(|&(_, s)| s >= threshold).map(|(train_id, similarity)| Overlap { test_id, train_id, similarity }))
        .collect()
}

/// Train rows sorted by their projection onto one pivot direction.
///
/// For (near) unit vectors `a`, `b` with `a·b ≥ t`, the projections differ by
/// at most `‖a − b‖ ≤ √(2 − 2t)` (plus the norm slack), so only a window of the
/// sorted list needs an exact check.
struct ProjectionFilter {
    pivot: Vec<f64>,
    order: Vec<(f64, usize)>,
}

impl ProjectionFilter {
    fn new(train: &EmbeddingIndex) -> Self {
        let mut mean = vec![0.0; train.dim];
        for v in &train.vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        let pivot = if dot(&mean, &mean) > 1e-12 {
            normalized(mean)
        } else {
            let mut e = vec![0.0; train.dim];
            if let Some(first) = e.first_mut() {
                *first = 1.0;
            }
            e
        };
        let mut order: Vec<(f64, usize)> = train.vectors.iter().enumerate().map(|(j, v)| (dot(v, &pivot), j)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Self { pivot, order }
    }

    fn window(&self, query: &[f64], threshold: f64) -> impl Iterator<Item = usize> + '_ {
        let n = 1.0 + NORM_TOLERANCE;
        let radius = (2.0 * n * n - 2.0 * threshold).max(0.0).sqrt() + 1e-9;
        let p = dot(query, &self.pivot);
        let lo = self.order.partition_point(|&(q, _)| q < p - radius);
        let hi = self.order.partition_point(|&(q, _)| q <= p + radius);
        self.order[lo..hi].iter().map(|&(_, j)| j)
    }
}

/// Flags every test row whose best cosine against `train` is at least
/// `threshold`. Uses an exact projection pre-filter; the result equals
/// [`detect_overlaps_exhaustive`].
pub fn detect_overlaps(test: &EmbeddingIndex, train: &EmbeddingIndex, threshold: f64, workers: usize) -> Result<Vec<Overlap>> {
    check_compatible(test, train)?;
    if !threshold.is_finite() {
        return Err(invalid(format!("threshold must be finite, got {threshold}")));
    }
    let filter = ProjectionFilter::new(train);
    let best = try_map_indexed(workers, test.len(), |i| {
        let mut ids: Vec<usize> = filter.window(test.row(i), threshold).collect();
        ids.sort_unstable();
        Ok(best_of(test.row(i), train, ids.into_iter()))
    })?;
    Ok(collect_flags(best, threshold))
}

/// One point of the threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub threshold: f64,
    pub overlapped: Vec<Overlap>,
    pub overlap_fraction: f64,
    pub accuracy_full: f64,
    /// `None` when every test image was removed.
    pub accuracy_cleaned: Option<f64>,
    pub cleaned_count: usize,
}

/// Overlap fraction and full/cleaned accuracy at each threshold.
pub fn overlap_sweep_report(
    model: &dyn Classifier,
    test: &Dataset,
    test_index: &EmbeddingIndex,
    train_index: &EmbeddingIndex,
    thresholds: &[f64],
    workers: usize,
) -> Result<Vec<OverlapReport>> {
    if thresholds.is_empty() {
        return Err(invalid("threshold list is empty"));
    }
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) || thresholds.iter().any(|t| !t.is_finite()) {
        return Err(invalid("thresholds must be finite and strictly ascending"));
    }
    if test_index.len() != test.len() {
        return Err(invalid(format!("test index has {} rows for {} images", test_index.len(), test.len())));
    }
    if test.is_empty() {
        return Err(invalid("empty test set"));
    }
    check_compatible(test_index, train_index)?;
    let preds = predictions(model, test, workers)?;
    let correct: Vec<bool> = preds.iter().zip(&test.examples).map(|(p, e)| *p == e.label).collect();
    let accuracy_full = correct.iter().filter(|c| **c).count() as f64 / test.len() as f64;
    thresholds
        .iter()
        .map(|&t| {
            let overlapped = detect_overlaps(test_index, train_index, t, workers)?;
            let mut removed = vec![false; test.len()];
            for o in &overlapped {
                removed[o.test_id] = true;
            }
            let kept: Vec<bool> = correct.iter().zip(&removed).filter(|(_, r)| !**r).map(|(c, _)| *c).collect();
            let accuracy_cleaned = (!kept.is_empty()).then(|| kept.iter().filter(|c| **c).count() as f64 / kept.len() as f64);
            Ok(OverlapReport {
                threshold: t,
                overlap_fraction: overlapped.len() as f64 / test.len() as f64,
                overlapped,
                accuracy_full,
                accuracy_cleaned,
                cleaned_count: kept.len(),
            })
        })
        .collect()
}

/// Marker written for an undefined cleaned accuracy.
pub const UNDEFINED: &str = "NA";

/// `threshold,overlap_pct,acc_full,acc_clean` with percentages.
pub fn sweep_csv(reports: &[OverlapReport]) -> String {
    let mut out = String::from("threshold,overlap_pct,acc_full,acc_clean\n");
    for r in reports {
        let clean = r.accuracy_cleaned.map_or(UNDEFINED.to_string(), |a| format!("{:.4}", 100.0 * a));
        out.push_str(&format!("{:.4},{:.4},{:.4},{clean}\n", r.threshold, 100.0 * r.overlap_fraction, 100.0 * r.accuracy_full));
    }
    out
}
