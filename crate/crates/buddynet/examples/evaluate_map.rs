//! Average precision under the landmark protocol: junk ids drop out of the
//! ranking before precision is read off at each hit.
//!
//!     cargo run --release --example evaluate_map

use std::collections::BTreeSet;

use buddynet::eval::{average_precision, GroundTruthEntry};
use buddynet::retrieval::RankedList;

fn list(ids: &[&str]) -> RankedList {
    RankedList {
        query_id: None,
        entries: ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.to_string(), 1.0 - 0.1 * i as f64))
            .collect(),
    }
}

fn entry(pos: &[&str], junk: &[&str]) -> GroundTruthEntry {
    GroundTruthEntry {
        positives: pos.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
        junk: junk.iter().map(|s| s.to_string()).collect(),
    }
}

fn main() {
    let cases = [
        ("perfect ranking", list(&["a", "b", "x", "y"]), entry(&["a", "b"], &[])),
        ("positive at rank 2", list(&["x", "a"]), entry(&["a"], &[])),
        ("junk closes ranks", list(&["j", "a", "x"]), entry(&["a"], &["j"])),
        ("missed positive", list(&["a", "x", "y"]), entry(&["a", "ghost"], &[])),
        ("interleaved", list(&["a", "x", "b", "y", "c"]), entry(&["a", "b", "c"], &[])),
    ];
    for (name, ranked, gt) in cases {
        let ap = average_precision(&ranked, &gt).unwrap();
        println!("{name:<20} AP = {ap:.4}");
    }
}
