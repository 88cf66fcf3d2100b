//! Iterated Smith-Waterman local alignment over token sequences.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwConfig {
    pub match_score: i32,
    pub mismatch: i32,
    pub gap: i32,
    /// Regions scoring below this end the search.
    pub min_score: i32,
    /// Matched words a region needs before it yields segments.
    pub min_island: usize,
}

impl Default for SwConfig {
    fn default() -> Self {
        Self { match_score: 2, mismatch: -1, gap: -1, min_score: 1, min_island: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOp {
    Match,
    Mismatch,
    /// Hypothesis word with no transcript counterpart.
    Insertion,
    /// Transcript word the hypothesis skipped.
    Deletion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub op: PairOp,
    pub hyp: Option<usize>,
    pub reference: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedRegion {
    pub score: i32,
    /// Half-open hypothesis index range.
    pub hyp_range: (usize, usize),
    pub ref_range: (usize, usize),
    pub pairs: Vec<AlignedPair>,
}

impl AlignedRegion {
    pub fn matches(&self) -> usize {
        self.pairs.iter().filter(|p| p.op == PairOp::Match).count()
    }
}

/// All local alignments scoring at least `min_score`, best first. After
/// each region is found its hypothesis and transcript ranges are masked
/// and the search repeats.
pub fn smith_waterman<T: PartialEq>(hyp: &[T], reference: &[T], cfg: &SwConfig) -> Vec<AlignedRegion> {
    assert!(cfg.match_score > 0 && cfg.mismatch <= 0 && cfg.gap <= 0, "invalid scoring");
    let (n, m) = (hyp.len(), reference.len());
    let mut hyp_mask = vec![false; n];
    let mut ref_mask = vec![false; m];
    let mut regions = Vec::new();
    let w = m + 1;
    let mut h = vec![0i32; (n + 1) * w];
    loop {
        let mut best = (0i32, 0usize, 0usize);
        for i in 1..=n {
            for j in 1..=m {
                let v = if hyp_mask[i - 1] || ref_mask[j - 1] {
                    0
                } else {
                    let s = if hyp[i - 1] == reference[j - 1] { cfg.match_score } else { cfg.mismatch };
                    let diag = h[(i - 1) * w + j - 1] + s;
                    let up = h[(i - 1) * w + j] + cfg.gap;
                    let left = h[i * w + j - 1] + cfg.gap;
                    diag.max(up).max(left).max(0)
                };
                h[i * w + j] = v;
                if v > best.0 {
                    best = (v, i, j);
                }
            }
        }
        let (score, mut i, mut j) = best;
        if score == 0 || score < cfg.min_score {
            break;
        }
        let mut pairs = Vec::new();
        while i > 0 && j > 0 && h[i * w + j] > 0 {
            let v = h[i * w + j];
            let same = hyp[i - 1] == reference[j - 1];
            let s = if same { cfg.match_score } else { cfg.mismatch };
            if h[(i - 1) * w + j - 1] + s == v {
                let op = if same { PairOp::Match } else { PairOp::Mismatch };
                pairs.push(AlignedPair { op, hyp: Some(i - 1), reference: Some(j - 1) });
                i -= 1;
                j -= 1;
            } else if h[(i - 1) * w + j] + cfg.gap == v {
                pairs.push(AlignedPair { op: PairOp::Insertion, hyp: Some(i - 1), reference: None });
                i -= 1;
            } else {
                pairs.push(AlignedPair { op: PairOp::Deletion, hyp: None, reference: Some(j - 1) });
                j -= 1;
            }
        }
        pairs.reverse();
        let hyp_range = (i, best.1);
        let ref_range = (j, best.2);
        hyp_mask[hyp_range.0..hyp_range.1].iter_mut().for_each(|x| *x = true);
        ref_mask[ref_range.0..ref_range.1].iter_mut().for_each(|x| *x = true);
        regions.push(AlignedRegion { score, hyp_range, ref_range, pairs });
    }
    regions
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let r = smith_waterman(&["A", "B", "C", "D"], &["X", "B", "C", "Y"], &SwConfig::default());
        assert_eq!(r[0].score, 4);
        assert_eq!(r[0].hyp_range, (1, 3));
        assert_eq!(r[0].ref_range, (1, 3));
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn identical_and_disjoint() {
        let s = ["A", "B", "C"];
        let r = smith_waterman(&s, &s, &SwConfig::default());
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].score, 6);
        assert!(r[0].pairs.iter().all(|p| p.op == PairOp::Match));
        assert!(smith_waterman(&["A"], &["B"], &SwConfig::default()).is_empty());
        assert!(smith_waterman::<&str>(&[], &[], &SwConfig::default()).is_empty());
    }

    #[test]
    fn finds_islands_separated_by_junk() {
        let hyp = ["A", "B", "C", "Q", "R", "S", "T", "D", "E", "F"];
        let reference = ["A", "B", "C", "W", "D", "E", "F"];
        let r = smith_waterman(&hyp, &reference, &SwConfig::default());
        let total: usize = r.iter().map(|x| x.matches()).sum();
        assert_eq!(total, 6);
    }
}
