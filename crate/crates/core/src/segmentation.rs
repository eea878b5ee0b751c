//! Probabilistic span segmentation of training documents.
//!
//! Each document is segmented once per threshold `p_r`. The scan moves left
//! to right; where the longest reference match at the cursor reaches `l_min`
//! tokens, one keyed uniform draw `u` decides the step: `u ≥ p_r` commits the
//! longest match, otherwise the cursor token is emitted alone and the scan
//! resumes one token later. With `p_0 = 0` every candidate is committed, which
//! is plain forward maximum matching. Skipped commitments shift later piece
//! boundaries, so segmentations under different thresholds share some
//! boundaries and diverge between them, giving states with several in-paths.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{DocId, Document, TokenId};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub l_min: usize,
    pub l_max: usize,
    pub thresholds: Vec<f64>,
    pub seed: u64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            l_min: 2,
            l_max: 8,
            thresholds: vec![0.0, 0.3, 0.6],
            seed: 0,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_min < 2 || self.l_min > self.l_max {
            return Err(Error::Config(format!(
                "span bounds must satisfy 2 <= l_min <= l_max (got {}..{})",
                self.l_min, self.l_max
            )));
        }
        if self.thresholds.first() != Some(&0.0) {
            return Err(Error::Config("the first threshold must be 0".into()));
        }
        if self.thresholds.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::Config("thresholds must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Where a span was found: `tokens[start..end]` of document `doc_id`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Provenance {
    pub doc_id: DocId,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    pub tokens: Vec<TokenId>,
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub doc_id: DocId,
    pub threshold_index: usize,
    pub pieces: Vec<Piece>,
}

impl Segmentation {
    pub fn concat(&self) -> Vec<TokenId> {
        self.pieces.iter().flat_map(|p| p.tokens.iter().copied()).collect()
    }

    pub fn provenanced_count(&self) -> usize {
        self.pieces.iter().filter(|p| p.provenance.is_some()).count()
    }

    /// Exclusive end offset of every piece.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut at = 0;
        self.pieces
            .iter()
            .map(|p| {
                at += p.tokens.len();
                at
            })
            .collect()
    }
}

/// Every reference n-gram with admissible length, mapped to its first
/// occurrence by `(doc_id, start)`.
pub struct ReferenceSet {
    l_min: usize,
    l_max: usize,
    ngrams: HashMap<Vec<TokenId>, Provenance>,
}

impl ReferenceSet {
    pub fn new(references: &[&Document], l_min: usize, l_max: usize) -> Self {
        let mut refs: Vec<&&Document> = references.iter().collect();
        refs.sort_by_key(|d| d.doc_id);
        let mut ngrams = HashMap::new();
        for d in refs {
            let n = d.tokens.len();
            for start in 0..n {
                for len in l_min..=l_max.min(n - start) {
                    ngrams
                        .entry(d.tokens[start..start + len].to_vec())
                        .or_insert(Provenance {
                            doc_id: d.doc_id,
                            start,
                            end: start + len,
                        });
                }
            }
        }
        Self { l_min, l_max, ngrams }
    }

    pub fn longest_match(&self, tokens: &[TokenId], cursor: usize) -> Option<(usize, Provenance)> {
        let remaining = tokens.len().saturating_sub(cursor);
        let top = self.l_max.min(remaining);
        (self.l_min..=top)
            .rev()
            .find_map(|l| self.ngrams.get(&tokens[cursor..cursor + l]).map(|p| (l, *p)))
    }
}

/// Longest span starting at `cursor` with length in `[l_min, l_max]` that
/// occurs in some reference document.
pub fn longest_match(
    tokens: &[TokenId],
    cursor: usize,
    references: &[&Document],
    cfg: &SegmentationConfig,
) -> Option<(usize, Provenance)> {
    ReferenceSet::new(references, cfg.l_min, cfg.l_max).longest_match(tokens, cursor)
}

/// One segmentation per threshold in `cfg.thresholds`.
pub fn segment_document(
    doc: &Document,
    references: &[&Document],
    cfg: &SegmentationConfig,
) -> Vec<Segmentation> {
    let set = ReferenceSet::new(references, cfg.l_min, cfg.l_max);
    cfg.thresholds
        .iter()
        .enumerate()
        .map(|(r, &p)| segment_with(&doc.tokens, doc.doc_id, r, p, &set, cfg.seed))
        .collect()
}

fn segment_with(
    tokens: &[TokenId],
    doc_id: DocId,
    threshold_index: usize,
    threshold: f64,
    set: &ReferenceSet,
    seed: u64,
) -> Segmentation {
    let mut pieces = Vec::new();
    let mut cursor = 0;
    while cursor < tokens.len() {
        let step = set.longest_match(tokens, cursor).and_then(|(len, prov)| {
            let u = rng::keyed_uniform(
                seed,
                &[
                    rng::domain::SEGMENT,
                    doc_id as u64,
                    threshold_index as u64,
                    cursor as u64,
                ],
            );
            (u >= threshold).then_some((len, prov))
        });
        match step {
            Some((len, prov)) => {
                pieces.push(Piece {
                    tokens: tokens[cursor..cursor + len].to_vec(),
                    provenance: Some(prov),
                });
                cursor += len;
            }
            None => {
                pieces.push(Piece {
                    tokens: vec![tokens[cursor]],
                    provenance: None,
                });
                cursor += 1;
            }
        }
    }
    Segmentation {
        doc_id,
        threshold_index,
        pieces,
    }
}

/// Number of distinct piece paths from offset 0 into every boundary offset,
/// over the union of the given segmentations' edges.
pub fn boundary_path_counts(segs: &[Segmentation], len: usize) -> Vec<u64> {
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for s in segs {
        let mut at = 0;
        for p in &s.pieces {
            edges.push((at, at + p.tokens.len()));
            at += p.tokens.len();
        }
    }
    edges.sort_unstable();
    edges.dedup();
    let mut counts = vec![0u64; len + 1];
    counts[0] = 1;
    // edges sorted by start, and every edge moves forward
    for (a, b) in edges {
        counts[b] += counts[a];
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: DocId, tokens: &[TokenId]) -> Document {
        Document {
            doc_id: id,
            tokens: tokens.to_vec(),
        }
    }

    fn cfg(thresholds: Vec<f64>) -> SegmentationConfig {
        SegmentationConfig {
            thresholds,
            ..SegmentationConfig::default()
        }
    }

    #[test]
    fn longest_match_examples() {
        let r = doc(1, &[1, 2, 3, 9]);
        let c = cfg(vec![0.0]);
        let (len, prov) = longest_match(&[1, 2, 3, 4], 0, &[&r], &c).unwrap();
        assert_eq!(len, 3);
        assert_eq!(prov, Provenance { doc_id: 1, start: 0, end: 3 });
        assert_eq!(longest_match(&[5, 6, 7], 0, &[&r], &c), None);

        let long: Vec<TokenId> = (10..20).collect();
        let r2 = doc(0, &long);
        let (len, _) = longest_match(&long, 0, &[&r2], &c).unwrap();
        assert_eq!(len, 8);
    }

    #[test]
    fn provenance_prefers_lowest_doc_then_start() {
        let a = doc(3, &[1, 2, 1, 2]);
        let b = doc(5, &[1, 2]);
        let c = cfg(vec![0.0]);
        let (_, p) = longest_match(&[1, 2], 0, &[&b, &a], &c).unwrap();
        assert_eq!(p, Provenance { doc_id: 3, start: 0, end: 2 });
    }

    #[test]
    fn zero_threshold_is_forward_maximum_matching() {
        let r = doc(1, &[1, 2, 3, 7, 4, 5]);
        let d = doc(0, &[1, 2, 3, 4, 5, 6]);
        let segs = segment_document(&d, &[&r], &cfg(vec![0.0]));
        let pieces: Vec<Vec<TokenId>> = segs[0].pieces.iter().map(|p| p.tokens.clone()).collect();
        assert_eq!(pieces, vec![vec![1, 2, 3], vec![4, 5], vec![6]]);
        assert!(segs[0].pieces[2].provenance.is_none());
    }

    #[test]
    fn high_threshold_commits_fewer_spans() {
        let r = doc(1, &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]);
        let d = doc(0, &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]);
        let (mut zero, mut high) = (0usize, 0usize);
        for seed in 0..1000 {
            let c = SegmentationConfig {
                thresholds: vec![0.0, 0.99],
                seed,
                ..SegmentationConfig::default()
            };
            let segs = segment_document(&d, &[&r], &c);
            zero += segs[0].provenanced_count();
            high += segs[1].provenanced_count();
        }
        assert!((high as f64 / 1000.0) < (zero as f64 / 1000.0));
    }

    #[test]
    fn thresholds_induce_multiple_in_paths() {
        let r = doc(1, &[1, 2, 3, 4, 5, 6, 7, 8]);
        let d = doc(0, &[1, 2, 3, 4, 5, 6, 7, 8]);
        let found = (0..50).any(|seed| {
            let c = SegmentationConfig {
                l_max: 4,
                thresholds: vec![0.0, 0.5, 0.8],
                seed,
                ..SegmentationConfig::default()
            };
            let segs = segment_document(&d, &[&r], &c);
            boundary_path_counts(&segs, d.tokens.len()).iter().any(|&n| n >= 2)
        });
        assert!(found);
    }

    #[test]
    fn path_counts_follow_edges() {
        let s1 = Segmentation {
            doc_id: 0,
            threshold_index: 0,
            pieces: vec![
                Piece { tokens: vec![1, 2], provenance: None },
                Piece { tokens: vec![3], provenance: None },
            ],
        };
        let s2 = Segmentation {
            doc_id: 0,
            threshold_index: 1,
            pieces: vec![
                Piece { tokens: vec![1], provenance: None },
                Piece { tokens: vec![2, 3], provenance: None },
            ],
        };
        assert_eq!(boundary_path_counts(&[s1, s2], 3), vec![1, 1, 1, 2]);
    }

    #[test]
    fn config_validation() {
        assert!(SegmentationConfig::default().validate().is_ok());
        assert!(SegmentationConfig { l_min: 1, ..Default::default() }.validate().is_err());
        assert!(cfg(vec![0.1]).validate().is_err());
        assert!(cfg(vec![0.0, 1.0]).validate().is_err());
    }

    proptest! {
        #[test]
        fn segmentation_is_lossless_and_deterministic(
            tokens in proptest::collection::vec(0u32..4, 1..30),
            other in proptest::collection::vec(0u32..4, 1..30),
            seed in 0u64..1000,
        ) {
            let d = doc(0, &tokens);
            let r = doc(1, &other);
            let c = SegmentationConfig { seed, ..SegmentationConfig::default() };
            let a = segment_document(&d, &[&d, &r], &c);
            let b = segment_document(&d, &[&d, &r], &c);
            prop_assert_eq!(&a, &b);
            for s in &a {
                prop_assert_eq!(s.concat(), tokens.clone());
                for p in &s.pieces {
                    match p.provenance {
                        Some(pr) => {
                            prop_assert!(p.tokens.len() >= c.l_min && p.tokens.len() <= c.l_max);
                            let src = if pr.doc_id == 0 { &tokens } else { &other };
                            prop_assert_eq!(&src[pr.start..pr.end], &p.tokens[..]);
                        }
                        None => prop_assert_eq!(p.tokens.len(), 1),
                    }
                }
            }
        }
    }
}
