//! Levenshtein alignment and WER/CER scoring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("reference side has no tokens; error rate undefined")]
    NoReferenceTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditOp {
    Match,
    Sub,
    Ins,
    Del,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditStep {
    pub op: EditOp,
    pub ref_idx: Option<usize>,
    pub hyp_idx: Option<usize>,
}

/// Minimal unit-cost edit script from `reference` to `hypothesis`. Among
/// equal-cost scripts the traceback prefers substitution, then insertion,
/// then deletion.
pub fn align_edit<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Vec<EditStep> {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0u32; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i as u32;
    }
    for j in 0..=m {
        d[j] = j as u32;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + u32::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = d[i * w + j - 1] + 1;
            let del = d[(i - 1) * w + j] + 1;
            d[i * w + j] = diag.min(ins).min(del);
        }
    }
    let mut steps = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + u32::from(!same) == cur {
                let op = if same { EditOp::Match } else { EditOp::Sub };
                steps.push(EditStep { op, ref_idx: Some(i - 1), hyp_idx: Some(j - 1) });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == cur {
            steps.push(EditStep { op: EditOp::Ins, ref_idx: None, hyp_idx: Some(j - 1) });
            j -= 1;
        } else {
            steps.push(EditStep { op: EditOp::Del, ref_idx: Some(i - 1), hyp_idx: None });
            i -= 1;
        }
    }
    steps.reverse();
    steps
}

/// Unit-cost edit distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    align_edit(a, b).iter().filter(|s| s.op != EditOp::Match).count()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub n_ref: usize,
    pub matches: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn of<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Self {
        let mut c = EditCounts { n_ref: reference.len(), ..Default::default() };
        for s in align_edit(reference, hypothesis) {
            match s.op {
                EditOp::Match => c.matches += 1,
                EditOp::Sub => c.substitutions += 1,
                EditOp::Ins => c.insertions += 1,
                EditOp::Del => c.deletions += 1,
            }
        }
        c
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn add(mut self, o: &EditCounts) -> Self {
        self.n_ref += o.n_ref;
        self.matches += o.matches;
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self
    }
}

/// A reference/hypothesis pair of normalized token sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub id: String,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UttErrors {
    pub id: String,
    #[serde(flatten)]
    pub counts: EditCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Word,
    Char,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub unit: Unit,
    #[serde(flatten)]
    pub totals: EditCounts,
    /// Pooled error rate as a fraction; may exceed 1.
    pub rate: f64,
    pub per_utterance: Vec<UttErrors>,
}

impl WerReport {
    pub fn percent(&self) -> String {
        format!("{:.2}%", self.rate * 100.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let name = match self.unit {
            Unit::Word => "WER",
            Unit::Char => "CER",
        };
        let t = &self.totals;
        format!(
            "{name:<5} {:>8}  N={:<8} S={:<6} D={:<6} I={:<6} utts={}\n",
            self.percent(),
            t.n_ref,
            t.substitutions,
            t.deletions,
            t.insertions,
            self.per_utterance.len()
        )
    }

    pub fn per_utterance_tsv(&self) -> String {
        let mut out = String::from("id\tn_ref\tsub\tdel\tins\trate\n");
        for u in &self.per_utterance {
            let c = &u.counts;
            let rate = if c.n_ref == 0 { f64::NAN } else { c.errors() as f64 / c.n_ref as f64 };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{:.4}\n",
                u.id, c.n_ref, c.substitutions, c.deletions, c.insertions, rate
            ));
        }
        out
    }
}

fn pooled(unit: Unit, per_utterance: Vec<UttErrors>) -> Result<WerReport, EvalError> {
    let totals = per_utterance.iter().fold(EditCounts::default(), |acc, u| acc.add(&u.counts));
    if totals.n_ref == 0 {
        return Err(EvalError::NoReferenceTokens);
    }
    let rate = totals.errors() as f64 / totals.n_ref as f64;
    Ok(WerReport { unit, totals, rate, per_utterance })
}

/// Corpus-level word error rate: summed edits over summed reference tokens.
pub fn wer(pairs: &[ScoredPair]) -> Result<WerReport, EvalError> {
    let per: Vec<UttErrors> = pairs
        .par_iter()
        .map(|p| UttErrors { id: p.id.clone(), counts: EditCounts::of(&p.reference, &p.hypothesis) })
        .collect();
    pooled(Unit::Word, per)
}

fn chars(tokens: &[String]) -> Vec<char> {
    tokens.join(" ").chars().collect()
}

/// Character error rate over the space-joined token sequences; spaces count.
pub fn cer(pairs: &[ScoredPair]) -> Result<WerReport, EvalError> {
    let per: Vec<UttErrors> = pairs
        .par_iter()
        .map(|p| UttErrors { id: p.id.clone(), counts: EditCounts::of(&chars(&p.reference), &chars(&p.hypothesis)) })
        .collect();
    pooled(Unit::Char, per)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(r: &str, h: &str) -> ScoredPair {
        let t = |s: &str| s.split_whitespace().map(str::to_string).collect();
        ScoredPair { id: "u".into(), reference: t(r), hypothesis: t(h) }
    }

    #[test]
    fn identical_is_zero() {
        let r = wer(&[pair("A B", "A B")]).unwrap();
        assert_eq!(r.percent(), "0.00%");
        assert!(align_edit(&["A"], &["A"]).iter().all(|s| s.op == EditOp::Match));
        assert_eq!(cer(&[pair("A B", "A B")]).unwrap().percent(), "0.00%");
    }

    #[test]
    fn worked_example() {
        let c = EditCounts::of(&["A", "B", "C"], &["A", "X", "C", "D"]);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 1, 0));
        assert_eq!(wer(&[pair("A B C", "A X C D")]).unwrap().percent(), "66.67%");
        let c = EditCounts::of(&["A"], &[] as &[&str]);
        assert_eq!(c.deletions, 1);
    }

    #[test]
    fn cer_counts_characters() {
        assert_eq!(cer(&[pair("AB", "AC")]).unwrap().percent(), "50.00%");
        // "A B" vs "AB": one deleted space.
        assert_eq!(cer(&[pair("A B", "AB")]).unwrap().totals.deletions, 1);
    }

    #[test]
    fn tie_break_prefers_substitution() {
        let s = align_edit(&["A"], &["B"]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].op, EditOp::Sub);
    }

    #[test]
    fn pooled_not_averaged() {
        let r = wer(&[pair("A", "B"), pair("A B C", "A B C")]).unwrap();
        assert!((r.rate - 0.25).abs() < 1e-12);
        assert_eq!(r.per_utterance.len(), 2);
        assert!(r.per_utterance_tsv().lines().count() == 3);
    }

    #[test]
    fn errors() {
        assert_eq!(wer(&[]).unwrap_err(), EvalError::NoReferenceTokens);
        assert_eq!(wer(&[pair("", "A")]).unwrap_err(), EvalError::NoReferenceTokens);
    }
}
