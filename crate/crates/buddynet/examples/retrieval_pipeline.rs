//! Database embedding and nearest-neighbor search with a trained master:
//! the original image plus every crop is embedded and concatenated, the
//! index is exhaustive cosine.
//!
//!     cargo run --release --example retrieval_pipeline

use buddynet::data::{synth_dataset, SyntheticSpec};
use buddynet::pipeline::embed_dataset;
use buddynet::retrieval::{knn_query, EmbedOptions, RetrievalIndex};
use buddynet::train::{train, TrainingConfig};

fn main() {
    let mut spec = SyntheticSpec::new(3, 12, 32);
    spec.seed = 3;
    let data = synth_dataset(&spec).unwrap();

    let mut cfg = TrainingConfig::desk_default();
    cfg.epochs = 10;
    cfg.warmup_epochs = 2;
    cfg.seed = 3;
    let state = train(&cfg, &data.train).unwrap();

    let opts = EmbedOptions::new(cfg.crop.clone());
    let records = embed_dataset(&data.database, &[&state.master], &opts).unwrap();
    println!(
        "embedded {} database images, concatenated dim {}",
        records.len(),
        records[0].vector.len()
    );
    let index = RetrievalIndex::from_records(records).unwrap();

    let queries = embed_dataset(&data.queries, &[&state.master], &opts).unwrap();
    for q in queries.iter().take(3) {
        let ranked = knn_query(&index, &q.vector, 5).unwrap();
        println!("query {} (class {}):", q.id, &q.id[1..4]);
        for (rank, (id, score)) in ranked.entries.iter().enumerate() {
            println!("  {}. {id}  cosine {score:.4}", rank + 1);
        }
    }
}
