//! The similarity-function plug-ins side by side on a clustered synthetic
//! vector database: plain cosine, average query expansion, heat-kernel
//! re-ranking + AQE, and precomputed offline diffusion.
//!
//!     cargo run --release --example post_processing

use std::collections::BTreeMap;

use buddynet::eval::{evaluate, GroundTruth, GroundTruthEntry};
use buddynet::postproc::{compose, DiffusionConfig};
use buddynet::retrieval::{EmbeddingRecord, RetrievalIndex};
use buddynet::rng::Rng;

fn main() {
    // 6 noisy clusters of 15 vectors in 16 dims; enough spread that the
    // plain ranking is imperfect and the re-ranking stages have work to do
    let mut rng = Rng::from_seed(21);
    let dim = 16;
    let n_clusters = 6;
    let per_cluster = 15;
    let mut centers = Vec::new();
    for _ in 0..n_clusters {
        let c: Vec<f64> = (0..dim).map(|_| rng.range(-1.0, 1.0)).collect();
        centers.push(c);
    }
    let jitter = |rng: &mut Rng, c: &[f64], eps: f64| -> Vec<f64> {
        c.iter().map(|v| v + rng.range(-eps, eps)).collect()
    };

    let mut records = Vec::new();
    let mut gt_map = BTreeMap::new();
    let mut queries = Vec::new();
    for (ci, center) in centers.iter().enumerate() {
        for j in 0..per_cluster {
            let id = format!("c{ci}_{j:02}");
            records.push(EmbeddingRecord::new(id, jitter(&mut rng, center, 0.85)).unwrap());
        }
        let qid = format!("q{ci}");
        let positives: std::collections::BTreeSet<String> =
            (0..per_cluster).map(|j| format!("c{ci}_{j:02}")).collect();
        gt_map.insert(qid.clone(), GroundTruthEntry { positives, junk: Default::default() });
        queries.push((qid, jitter(&mut rng, center, 0.85)));
    }
    let index = RetrievalIndex::from_records(records).unwrap();
    let gt = GroundTruth::from_map(gt_map).unwrap();

    let cfg = DiffusionConfig { graph_k: 8, rerank_depth: 30, ..Default::default() };
    println!("pipeline   mAP");
    for name in ["none", "Q", "WQR", "O"] {
        let func = compose(name, &index, &cfg).unwrap();
        let report = evaluate(&index, &queries, &gt, &func).unwrap();
        println!("{name:<9}  {:.4}", report.map);
    }
}
