//! Database embedding and exhaustive cosine search. At inference only the
//! master block runs: the original image (resized to the global side) plus
//! every global and local crop are embedded and concatenated in fixed order,
//! giving (n_global + n_local + 1)·D dimensions per record.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::backbone::{embed, BlockParams, BlockVars};
use crate::crop::{multi_crop, resize_rect, CropConfig};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::autodiff::Graph;
use crate::rng::fnv1a;

/// Ordered (id, score) pairs, scores non-increasing, ids unique.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query_id: Option<String>,
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    /// Check the ordering and uniqueness invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        let mut prev = f64::INFINITY;
        for (id, score) in &self.entries {
            if *score > prev {
                return Err(Error::Validation(format!(
                    "ranked list scores increase at id {id}: {prev} -> {score}"
                )));
            }
            prev = *score;
            if !seen.insert(id.clone()) {
                return Err(Error::Validation(format!("duplicate id {id} in ranked list")));
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f64>,
    pub norm: f64,
}

impl EmbeddingRecord {
    pub fn new(id: String, vector: Vec<f64>) -> Result<Self> {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(Error::Validation(format!("zero embedding vector for id {id}")));
        }
        Ok(EmbeddingRecord { id, vector, norm })
    }
}

/// Flat cosine-similarity index; immutable once built, safe to query in
/// parallel.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    records: Vec<EmbeddingRecord>,
    dim: usize,
}

impl RetrievalIndex {
    pub fn new(dim: usize) -> Self {
        RetrievalIndex { records: Vec::new(), dim }
    }

    pub fn from_records(records: Vec<EmbeddingRecord>) -> Result<Self> {
        let dim = records
            .first()
            .map(|r| r.vector.len())
            .ok_or_else(|| Error::Validation("cannot build index from zero records".into()))?;
        let mut index = RetrievalIndex::new(dim);
        for r in records {
            index.insert(r)?;
        }
        Ok(index)
    }

    pub fn insert(&mut self, record: EmbeddingRecord) -> Result<()> {
        if record.vector.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "index_insert",
                lhs: vec![self.dim],
                rhs: vec![record.vector.len()],
            });
        }
        if record.norm <= 0.0 {
            return Err(Error::Validation(format!("zero vector rejected for id {}", record.id)));
        }
        if self.records.iter().any(|r| r.id == record.id) {
            return Err(Error::Validation(format!("duplicate id {}", record.id)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Cosine similarity of a query vector to every record, in record order.
    pub fn similarities(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "similarities",
                lhs: vec![self.dim],
                rhs: vec![query.len()],
            });
        }
        let qnorm = query.iter().map(|v| v * v).sum::<f64>().sqrt();
        if qnorm == 0.0 {
            return Ok(vec![0.0; self.records.len()]);
        }
        Ok(self
            .records
            .iter()
            .map(|r| {
                let dot: f64 = r.vector.iter().zip(query).map(|(a, b)| a * b).sum();
                dot / (r.norm * qnorm)
            })
            .collect())
    }
}

/// Top-min(k, n) records by cosine similarity, descending; ties break by
/// ascending id so results are deterministic.
pub fn knn_query(index: &RetrievalIndex, query: &[f64], k: usize) -> Result<RankedList> {
    if index.is_empty() {
        return Err(Error::Validation("knn_query on empty index".into()));
    }
    if k == 0 {
        return Err(Error::Validation("knn_query needs k >= 1".into()));
    }
    let sims = index.similarities(query)?;
    let mut scored: Vec<(usize, f64)> = sims.into_iter().enumerate().collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| index.records[a.0].id.cmp(&index.records[b.0].id))
    });
    scored.truncate(k.min(index.len()));
    Ok(RankedList {
        query_id: None,
        entries: scored
            .into_iter()
            .map(|(i, s)| (index.records[i].id.clone(), s))
            .collect(),
    })
}

/// Symmetric cosine matrix with exact unit diagonal, row-major n×n.
pub fn pairwise_similarities(index: &RetrievalIndex) -> Result<Vec<f64>> {
    if index.is_empty() {
        return Err(Error::Validation("pairwise_similarities on empty index".into()));
    }
    let n = index.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
        for j in i + 1..n {
            let a = &index.records[i];
            let b = &index.records[j];
            let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
            let sim = dot / (a.norm * b.norm);
            out[i * n + j] = sim;
            out[j * n + i] = sim;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// concatenated inference embedding
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConcatNormalize {
    /// L2-normalize the full concatenated vector (default).
    Whole,
    /// L2-normalize each D-dim segment before concatenation.
    PerSegment,
}

#[derive(Clone, Debug)]
pub struct EmbedOptions {
    pub crop: CropConfig,
    pub normalize: ConcatNormalize,
}

impl EmbedOptions {
    pub fn new(crop: CropConfig) -> Self {
        EmbedOptions { crop, normalize: ConcatNormalize::Whole }
    }
}

/// Deterministic inference crop seed for an image id.
pub fn crop_seed_for_id(id: &str) -> u64 {
    fnv1a(id)
}

/// Embed original + globals + locals through one or more blocks (one for the
/// plain model, master+assistant for the ensemble variant) and concatenate.
pub fn embed_concat_blocks(
    image: &Image,
    id: &str,
    blocks: &[&BlockParams],
    opts: &EmbedOptions,
    crop_seed: u64,
) -> Result<EmbeddingRecord> {
    if blocks.is_empty() {
        return Err(Error::Validation("embed_concat needs at least one block".into()));
    }
    let crops = multi_crop(image, id, &opts.crop, crop_seed)?;
    let original = resize_rect(
        image,
        (0.0, 0.0, image.w as f64, image.h as f64),
        opts.crop.global_side,
    );
    let mut vector = Vec::new();
    for params in blocks {
        let mut g = Graph::new();
        let vars = BlockVars::insert(&mut g, params)?;
        let push = |g: &mut Graph, pixels: &[f64], side: usize, out: &mut Vec<f64>| -> Result<()> {
            let e = embed(g, pixels, side, &vars)?;
            let mut seg = g.data(e).to_vec();
            if opts.normalize == ConcatNormalize::PerSegment {
                let norm = seg.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    seg.iter_mut().for_each(|v| *v /= norm);
                }
            }
            out.extend(seg);
            Ok(())
        };
        push(&mut g, &original, opts.crop.global_side, &mut vector)?;
        for c in &crops.globals {
            push(&mut g, &c.pixels, c.side, &mut vector)?;
        }
        for c in &crops.locals {
            push(&mut g, &c.pixels, c.side, &mut vector)?;
        }
    }
    if opts.normalize == ConcatNormalize::Whole {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            vector.iter_mut().for_each(|v| *v /= norm);
        }
    }
    EmbeddingRecord::new(id.to_string(), vector)
}

/// The standard single-block inference embedding via the master.
pub fn embed_concat(
    image: &Image,
    id: &str,
    master: &BlockParams,
    opts: &EmbedOptions,
    crop_seed: u64,
) -> Result<EmbeddingRecord> {
    embed_concat_blocks(image, id, &[master], opts, crop_seed)
}

// ---------------------------------------------------------------------------
// embedding file: magic "BEMB", version u32, count u64, dim u32, then per
// record (id length u16, id bytes, dim f32 little-endian values)
// ---------------------------------------------------------------------------

const BEMB_MAGIC: &[u8; 4] = b"BEMB";
const BEMB_VERSION: u32 = 1;

pub fn save_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let dim = records.first().map(|r| r.vector.len()).unwrap_or(0);
    let mut out = Vec::new();
    out.extend_from_slice(BEMB_MAGIC);
    out.extend_from_slice(&BEMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "save_embeddings",
                lhs: vec![dim],
                rhs: vec![r.vector.len()],
            });
        }
        let id_bytes = r.id.as_bytes();
        if id_bytes.len() > u16::MAX as usize {
            return Err(Error::Validation(format!("id too long: {}", r.id)));
        }
        out.extend_from_slice(&(id_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(id_bytes);
        for v in &r.vector {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let bytes = fs::read(path)?;
    let err = |detail: String| Error::Format { what: path.display().to_string(), detail };
    if bytes.len() < 20 || &bytes[..4] != BEMB_MAGIC {
        return Err(err("missing BEMB magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BEMB_VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let mut pos = 20usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        if pos + 2 > bytes.len() {
            return Err(err("truncated id length".into()));
        }
        let id_len = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        if pos + id_len + dim * 4 > bytes.len() {
            return Err(err(format!(
                "truncated record: need {} more bytes, have {}",
                id_len + dim * 4,
                bytes.len() - pos
            )));
        }
        let id = String::from_utf8(bytes[pos..pos + id_len].to_vec())
            .map_err(|_| err("id is not utf-8".into()))?;
        pos += id_len;
        let vector: Vec<f64> = bytes[pos..pos + dim * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        pos += dim * 4;
        records.push(EmbeddingRecord::new(id, vector)?);
    }
    if pos != bytes.len() {
        return Err(err(format!("{} trailing bytes after {count} records", bytes.len() - pos)));
    }
    Ok(records)
}
