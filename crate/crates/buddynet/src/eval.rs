//! Mean average precision under the standard landmark protocol: junk ids are
//! removed from the ranking (ranks close up), precision is averaged at the
//! ranks of retrieved positives, and positives never retrieved count as
//! misses through the 1/|positives| normalization.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::postproc::SimilarityFunc;
use crate::retrieval::{RankedList, RetrievalIndex};
use crate::util::parallel_map;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruthEntry {
    pub positives: BTreeSet<String>,
    pub junk: BTreeSet<String>,
}

/// Per-query relevance sets, keyed by query id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    entries: BTreeMap<String, GroundTruthEntry>,
}

impl GroundTruth {
    pub fn from_map(entries: BTreeMap<String, GroundTruthEntry>) -> Result<Self> {
        for (query, entry) in &entries {
            if !entry.positives.is_disjoint(&entry.junk) {
                return Err(Error::Validation(format!(
                    "query {query}: positives and junk overlap"
                )));
            }
            if entry.positives.contains(query) {
                return Err(Error::Validation(format!(
                    "query {query}: listed among its own positives"
                )));
            }
        }
        Ok(GroundTruth { entries })
    }

    pub fn entry(&self, query_id: &str) -> Option<&GroundTruthEntry> {
        self.entries.get(query_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &GroundTruthEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Average precision of one ranked list against one ground-truth entry.
/// The query's own id and all junk ids are dropped before scoring.
pub fn average_precision(ranked: &RankedList, gt: &GroundTruthEntry) -> Result<f64> {
    if gt.positives.is_empty() {
        return Err(Error::Validation("average_precision: empty positive set".into()));
    }
    let own_id = ranked.query_id.as_deref();
    let mut hits = 0usize;
    let mut rank = 0usize;
    let mut precision_sum = 0.0;
    for (id, _) in &ranked.entries {
        if gt.junk.contains(id) || Some(id.as_str()) == own_id {
            continue;
        }
        rank += 1;
        if gt.positives.contains(id) {
            hits += 1;
            precision_sum += hits as f64 / rank as f64;
        }
    }
    Ok(precision_sum / gt.positives.len() as f64)
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    /// (query id, average precision), ordered by query id.
    pub per_query: Vec<(String, f64)>,
    pub map: f64,
    pub similarity_func: String,
    pub config_echo: String,
}

impl EvalReport {
    /// Delimited text: one query per line, then the mean.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# similarity_func\t{}\n", self.similarity_func));
        if !self.config_echo.is_empty() {
            for line in self.config_echo.lines() {
                out.push_str(&format!("# {line}\n"));
            }
        }
        out.push_str("query\tap\n");
        for (id, ap) in &self.per_query {
            out.push_str(&format!("{id}\t{ap}\n"));
        }
        out.push_str(&format!("mAP\t{}\n", self.map));
        out
    }
}

/// Rank the full database for every query and aggregate AP into mAP.
/// Every query must have a ground-truth entry.
pub fn evaluate(
    index: &RetrievalIndex,
    queries: &[(String, Vec<f64>)],
    gt: &GroundTruth,
    func: &SimilarityFunc,
) -> Result<EvalReport> {
    for (id, _) in queries {
        if gt.entry(id).is_none() {
            return Err(Error::Validation(format!("query {id} has no ground-truth entry")));
        }
    }
    let mut per_query: Vec<(String, f64)> = parallel_map(queries, |(id, vector)| {
        let ranked = func.rank(Some(id.as_str()), vector, index)?;
        let ap = average_precision(&ranked, gt.entry(id).unwrap())?;
        Ok((id.clone(), ap))
    })?;
    per_query.sort_by(|a, b| a.0.cmp(&b.0));
    let map = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|(_, ap)| ap).sum::<f64>() / per_query.len() as f64
    };
    Ok(EvalReport {
        per_query,
        map,
        similarity_func: func.name(),
        config_echo: String::new(),
    })
}

// ---------------------------------------------------------------------------
// ground-truth file: one record per query:  <query-id> P: <ids...> J: <ids...>
// ---------------------------------------------------------------------------

pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    let mut out = String::new();
    for (query, entry) in gt.iter() {
        out.push_str(query);
        out.push_str(" P:");
        for id in &entry.positives {
            out.push(' ');
            out.push_str(id);
        }
        out.push_str(" J:");
        for id in &entry.junk {
            out.push(' ');
            out.push_str(id);
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = fs::read_to_string(path)?;
    let mut entries = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let Some(query) = tokens.next() else { continue };
        let mut entry = GroundTruthEntry::default();
        let mut section = None;
        let err = |detail: String| Error::Format {
            what: path.display().to_string(),
            detail: format!("line {}: {detail}", lineno + 1),
        };
        for tok in tokens {
            match tok {
                "P:" => section = Some(true),
                "J:" => section = Some(false),
                id => match section {
                    Some(true) => {
                        entry.positives.insert(id.to_string());
                    }
                    Some(false) => {
                        entry.junk.insert(id.to_string());
                    }
                    None => return Err(err(format!("id {id} before P:/J: marker"))),
                },
            }
        }
        if section.is_none() {
            return Err(err("record has no P: section".into()));
        }
        entries.insert(query.to_string(), entry);
    }
    GroundTruth::from_map(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn ranked(query: Option<&str>, ids: &[&str]) -> RankedList {
        RankedList {
            query_id: query.map(str::to_string),
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.to_string(), 1.0 - i as f64 * 0.01))
                .collect(),
        }
    }

    fn gt_entry(pos: &[&str], junk: &[&str]) -> GroundTruthEntry {
        GroundTruthEntry {
            positives: pos.iter().map(|s| s.to_string()).collect(),
            junk: junk.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn all_positives_on_top_gives_one() {
        let list = ranked(None, &["a", "b", "c", "d"]);
        let ap = average_precision(&list, &gt_entry(&["a", "b"], &[])).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn single_positive_at_rank_two_of_two() {
        let list = ranked(None, &["x", "p"]);
        let ap = average_precision(&list, &gt_entry(&["p"], &[])).unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn junk_removal_closes_ranks() {
        // junk at rank 1: positive effectively at rank 1 after removal
        let list = ranked(None, &["j", "p", "x"]);
        let ap = average_precision(&list, &gt_entry(&["p"], &["j"])).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn own_query_id_is_excluded() {
        let list = ranked(Some("q"), &["q", "p", "x"]);
        let ap = average_precision(&list, &gt_entry(&["p"], &[])).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn absent_positives_count_as_misses() {
        let list = ranked(None, &["p", "x"]);
        let ap = average_precision(&list, &gt_entry(&["p", "ghost"], &[])).unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn empty_positives_is_an_error() {
        let list = ranked(None, &["a"]);
        assert!(average_precision(&list, &gt_entry(&[], &[])).is_err());
    }

    /// Direct-definition oracle: enumerate positives, compute precision at
    /// each hit rank from scratch, on random lists with junk.
    #[test]
    fn matches_direct_definition_oracle_on_random_lists() {
        let mut rng = Rng::from_seed(2024);
        for _trial in 0..100 {
            let n = 30;
            let ids: Vec<String> = (0..n).map(|i| format!("d{i:02}")).collect();
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let list = RankedList {
                query_id: None,
                entries: order
                    .iter()
                    .enumerate()
                    .map(|(r, &i)| (ids[i].clone(), 1.0 - r as f64 / n as f64))
                    .collect(),
            };
            let mut positives = BTreeSet::new();
            let mut junk = BTreeSet::new();
            for id in &ids {
                let u = rng.uniform();
                if u < 0.3 {
                    positives.insert(id.clone());
                } else if u < 0.45 {
                    junk.insert(id.clone());
                }
            }
            if positives.is_empty() {
                positives.insert(ids[0].clone());
                junk.remove(&ids[0]);
            }
            let gt = GroundTruthEntry { positives: positives.clone(), junk: junk.clone() };

            // oracle: quadratic recomputation over the filtered list
            let filtered: Vec<&String> = list
                .entries
                .iter()
                .map(|(id, _)| id)
                .filter(|id| !junk.contains(*id))
                .collect();
            let mut oracle = 0.0;
            for (idx, id) in filtered.iter().enumerate() {
                if positives.contains(*id) {
                    let hits_so_far =
                        filtered[..=idx].iter().filter(|x| positives.contains(**x)).count();
                    oracle += hits_so_far as f64 / (idx + 1) as f64;
                }
            }
            oracle /= positives.len() as f64;

            let ap = average_precision(&list, &gt).unwrap();
            assert!((ap - oracle).abs() < 1e-12, "ap {ap} oracle {oracle}");
        }
    }

    /// AP is invariant to junk insertion anywhere and to permutations among
    /// junk entries.
    #[test]
    fn junk_position_invariance() {
        let mut rng = Rng::from_seed(9);
        let base = ranked(None, &["a", "b", "c", "d"]);
        let gt = gt_entry(&["b", "d"], &["j1", "j2"]);
        let ap0 = average_precision(&base, &gt).unwrap();
        for _ in 0..20 {
            let mut with_junk: Vec<(String, f64)> = base.entries.clone();
            let k1 = rng.index(with_junk.len() + 1);
            with_junk.insert(k1, ("j1".into(), 0.0));
            let k2 = rng.index(with_junk.len() + 1);
            with_junk.insert(k2, ("j2".into(), 0.0));
            let list = RankedList { query_id: None, entries: with_junk };
            let ap = average_precision(&list, &gt).unwrap();
            assert_eq!(ap, ap0);
        }
    }

    /// Promoting a positive by one rank (swap with adjacent negative) never
    /// decreases AP.
    #[test]
    fn promotion_monotonicity() {
        let mut rng = Rng::from_seed(31);
        for _ in 0..50 {
            let n = 12;
            let ids: Vec<String> = (0..n).map(|i| format!("e{i}")).collect();
            let positives: BTreeSet<String> =
                ids.iter().filter(|_| rng.uniform() < 0.4).cloned().collect();
            if positives.is_empty() {
                continue;
            }
            let gt = GroundTruthEntry { positives: positives.clone(), junk: BTreeSet::new() };
            let mut order = ids.clone();
            rng.shuffle(&mut order);
            // find adjacent (negative, positive) pair and swap
            let mut swapped = order.clone();
            let mut found = false;
            for i in 0..n - 1 {
                if !positives.contains(&order[i]) && positives.contains(&order[i + 1]) {
                    swapped.swap(i, i + 1);
                    found = true;
                    break;
                }
            }
            if !found {
                continue;
            }
            let mk = |ids: &[String]| RankedList {
                query_id: None,
                entries: ids
                    .iter()
                    .enumerate()
                    .map(|(r, id)| (id.clone(), 1.0 - r as f64 * 0.01))
                    .collect(),
            };
            let before = average_precision(&mk(&order), &gt).unwrap();
            let after = average_precision(&mk(&swapped), &gt).unwrap();
            assert!(after >= before, "promotion decreased AP: {before} -> {after}");
        }
    }

    fn toy_index(vectors: Vec<Vec<f64>>) -> crate::retrieval::RetrievalIndex {
        crate::retrieval::RetrievalIndex::from_records(
            vectors
                .into_iter()
                .enumerate()
                .map(|(i, v)| crate::retrieval::EmbeddingRecord::new(format!("d{i}"), v).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn evaluate_whole_database_positive_gives_map_one() {
        let mut rng = Rng::from_seed(41);
        let index = toy_index((0..6).map(|_| vec![rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), 1.0]).collect());
        let mut entries = BTreeMap::new();
        entries.insert(
            "q".to_string(),
            GroundTruthEntry {
                positives: (0..6).map(|i| format!("d{i}")).collect(),
                junk: BTreeSet::new(),
            },
        );
        let gt = GroundTruth::from_map(entries).unwrap();
        let func = crate::postproc::SimilarityFunc::Plain;
        let queries = vec![("q".to_string(), vec![0.3, -0.7, 0.1])];
        let report = evaluate(&index, &queries, &gt, &func).unwrap();
        assert_eq!(report.map, 1.0);
    }

    #[test]
    fn evaluate_adversarial_bottom_ranked_positives() {
        // 5-item database along one axis; query at the positive end ranks
        // d0..d4 in order; positives are the bottom two -> AP by hand:
        // hits at ranks 4 and 5 -> (1/4 + 2/5) / 2 = 0.325
        let index = toy_index(vec![
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.8, 0.3],
            vec![0.5, 0.6],
            vec![0.2, 0.9],
        ]);
        let mut entries = BTreeMap::new();
        entries.insert(
            "q".to_string(),
            GroundTruthEntry {
                positives: ["d3", "d4"].iter().map(|s| s.to_string()).collect(),
                junk: BTreeSet::new(),
            },
        );
        let gt = GroundTruth::from_map(entries).unwrap();
        let queries = vec![("q".to_string(), vec![1.0, 0.0])];
        let func = crate::postproc::SimilarityFunc::Plain;
        let report = evaluate(&index, &queries, &gt, &func).unwrap();
        assert!((report.map - 0.325).abs() < 1e-12, "mAP {}", report.map);
    }

    #[test]
    fn evaluate_plain_equals_degenerate_aqe() {
        let mut rng = Rng::from_seed(43);
        let index =
            toy_index((0..12).map(|_| (0..4).map(|_| rng.range(-1.0, 1.0)).collect()).collect());
        let mut entries = BTreeMap::new();
        entries.insert(
            "q".to_string(),
            GroundTruthEntry {
                positives: ["d1", "d4", "d7"].iter().map(|s| s.to_string()).collect(),
                junk: ["d2"].iter().map(|s| s.to_string()).collect(),
            },
        );
        let gt = GroundTruth::from_map(entries).unwrap();
        let queries = vec![(
            "q".to_string(),
            (0..4).map(|_| rng.range(-1.0, 1.0)).collect::<Vec<f64>>(),
        )];
        let plain = evaluate(&index, &queries, &gt, &crate::postproc::SimilarityFunc::Plain).unwrap();
        let aqe0 =
            evaluate(&index, &queries, &gt, &crate::postproc::SimilarityFunc::Aqe { top_k: 0 })
                .unwrap();
        assert_eq!(plain.per_query, aqe0.per_query);
        assert_eq!(plain.map, aqe0.map);
    }

    #[test]
    fn evaluate_requires_ground_truth_for_every_query() {
        let index = toy_index(vec![vec![1.0, 0.0]]);
        let gt = GroundTruth::from_map(BTreeMap::new()).unwrap();
        let queries = vec![("mystery".to_string(), vec![1.0, 0.0])];
        assert!(evaluate(&index, &queries, &gt, &crate::postproc::SimilarityFunc::Plain).is_err());
    }

    #[test]
    fn ground_truth_file_round_trip() {
        let mut entries = BTreeMap::new();
        entries.insert("q1".to_string(), gt_entry(&["a", "b"], &["z"]));
        entries.insert("q2".to_string(), gt_entry(&["c"], &[]));
        let gt = GroundTruth::from_map(entries).unwrap();
        let dir = std::env::temp_dir().join("buddynet_test_gt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("gt.txt");
        write_ground_truth(&path, &gt).unwrap();
        let back = read_ground_truth(&path).unwrap();
        assert_eq!(gt, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn validation_rejects_overlap_and_self_positive() {
        let mut entries = BTreeMap::new();
        entries.insert("q".to_string(), gt_entry(&["a"], &["a"]));
        assert!(GroundTruth::from_map(entries).is_err());
        let mut entries = BTreeMap::new();
        entries.insert("q".to_string(), gt_entry(&["q"], &[]));
        assert!(GroundTruth::from_map(entries).is_err());
    }
}
