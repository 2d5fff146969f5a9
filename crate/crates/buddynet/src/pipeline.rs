//! Composition helpers tying the stages together: embed a labeled image set
//! through trained blocks, build the flat index, run a similarity function
//! over queries, and score mAP. Used by the ablation driver, the binary,
//! and the examples.

use crate::backbone::BlockParams;
use crate::data::{LabeledImage, SynthDataset};
use crate::error::Result;
use crate::eval::{evaluate, EvalReport, GroundTruth};
use crate::postproc::{compose, DiffusionConfig, SimilarityFunc};
use crate::retrieval::{
    crop_seed_for_id, embed_concat_blocks, EmbedOptions, EmbeddingRecord, RetrievalIndex,
};
use crate::util::parallel_map;

/// Concatenated inference embeddings for a set of labeled images; the crop
/// seed is pinned to each image id so databases are reproducible.
pub fn embed_dataset(
    images: &[LabeledImage],
    blocks: &[&BlockParams],
    opts: &EmbedOptions,
) -> Result<Vec<EmbeddingRecord>> {
    parallel_map(images, |img| {
        embed_concat_blocks(&img.image, &img.id, blocks, opts, crop_seed_for_id(&img.id))
    })
}

/// Embed the database and the queries, compose the similarity function, and
/// produce the evaluation report.
pub fn evaluate_retrieval(
    blocks: &[&BlockParams],
    database: &[LabeledImage],
    queries: &[LabeledImage],
    gt: &GroundTruth,
    opts: &EmbedOptions,
    func_name: &str,
    dcfg: &DiffusionConfig,
) -> Result<EvalReport> {
    let db_records = embed_dataset(database, blocks, opts)?;
    let index = RetrievalIndex::from_records(db_records)?;
    let query_records = embed_dataset(queries, blocks, opts)?;
    let func = compose(func_name, &index, dcfg)?;
    evaluate_records(&index, &query_records, gt, &func)
}

pub fn evaluate_records(
    index: &RetrievalIndex,
    queries: &[EmbeddingRecord],
    gt: &GroundTruth,
    func: &SimilarityFunc,
) -> Result<EvalReport> {
    let pairs: Vec<(String, Vec<f64>)> =
        queries.iter().map(|r| (r.id.clone(), r.vector.clone())).collect();
    evaluate(index, &pairs, gt, func)
}

/// Convenience for a generated corpus: train-free evaluation of a given
/// master block with the plain similarity function.
pub fn evaluate_on_dataset(
    master: &BlockParams,
    data: &SynthDataset,
    opts: &EmbedOptions,
    func_name: &str,
    dcfg: &DiffusionConfig,
) -> Result<EvalReport> {
    evaluate_retrieval(
        &[master],
        &data.database,
        &data.queries,
        &data.ground_truth,
        opts,
        func_name,
        dcfg,
    )
}
