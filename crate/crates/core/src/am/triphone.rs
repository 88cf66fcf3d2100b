//! Occupancy-tied triphones bootstrapped from monophone alignments.

use std::collections::BTreeMap;

use super::{train, AcousticModel, AlignInput, AlignmentPath, AmError, Ctx, IterStats, ModelKind, TrainSchedule};
use crate::lexicon::{Lexicon, SPN};

/// (left context, phone, right context).
pub type TriphoneKey = (Ctx, usize, Ctx);

/// Frames spent in each in-word phone context across the alignments.
pub fn triphone_occupancy<'a>(
    model: &AcousticModel,
    paths: impl IntoIterator<Item = &'a AlignmentPath>,
) -> BTreeMap<TriphoneKey, usize> {
    let spn = model.phone_id(SPN);
    let mut occ = BTreeMap::new();
    for p in paths {
        for span in &p.phones {
            if span.word.is_none() || Some(span.phone) == spn {
                continue;
            }
            *occ.entry((span.left, span.phone, span.right)).or_insert(0) += span.end - span.start;
        }
    }
    occ
}

/// Give every context with at least `tie_min_count` frames its own states
/// (cloned from the monophone, mixtures cut to what the context's frames
/// support), then re-train. Rarer contexts stay tied to
/// the monophone states. With no qualifying context the monophone model is
/// returned unchanged apart from its kind.
pub fn train_triphone(
    mono: &AcousticModel,
    lex: &Lexicon,
    alignments: &[Option<AlignmentPath>],
    utts: &[AlignInput],
    tie_min_count: usize,
    sched: &TrainSchedule,
) -> Result<(AcousticModel, Vec<IterStats>), AmError> {
    let occ = triphone_occupancy(mono, alignments.iter().flatten());
    let mut model = mono.clone();
    model.kind = ModelKind::Triphone;
    for (&(l, p, r), &n) in &occ {
        if n < tie_min_count {
            continue;
        }
        let src = mono.mono_states(p).to_vec();
        let first = model.states.len();
        // No more components than the context's frames can support.
        let k = ((n as f64 / src.len() as f64 / sched.min_split_occ) as usize).max(1);
        for s in &src {
            let mut st = mono.states[*s].clone();
            st.gmm = st.gmm.truncate(k);
            model.states.push(st);
        }
        model.tri_map_mut().insert((l, p, r), (first..first + src.len()).collect());
    }
    if model.n_contexts() == 0 {
        log::warn!("triphone: no context reached {tie_min_count} frames; keeping monophone states");
        return Ok((model, Vec::new()));
    }
    log::info!("triphone: {} of {} contexts get dedicated states", model.n_contexts(), occ.len());
    let sched = TrainSchedule { equal_align_first: false, ..sched.clone() };
    train(model, lex, utts, &sched)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::separated_model;
    use super::super::{force_align, AlignOptions};
    use super::*;
    use crate::features::FeatureMatrix;

    fn corpus(model: &AcousticModel, word: &str, reps: usize) -> Vec<AlignInput> {
        let sil = model.mono_states(model.sil()).to_vec();
        let mut seq = sil.clone();
        for g in word.chars() {
            for &s in model.mono_states(model.phone_id(&g.to_string()).unwrap()) {
                seq.extend([s, s]);
            }
        }
        seq.extend(sil);
        let rows: Vec<Vec<f64>> = seq.iter().map(|&s| model.states[s].gmm.means()[0].clone()).collect();
        (0..reps)
            .map(|i| AlignInput { id: format!("u{i}"), feats: FeatureMatrix::from_rows(&rows, 0.01), words: vec![word.into()] })
            .collect()
    }

    #[test]
    fn frequent_context_gets_states_and_lookup_falls_back() {
        let (m, mut lex) = separated_model(&["A", "B"], 3, 8);
        lex.add_word("AB").unwrap();
        let utts = corpus(&m, "AB", 200);
        let paths: Vec<Option<AlignmentPath>> =
            utts.iter().map(|u| force_align(&m, &lex, &u.feats, &u.words, &AlignOptions::default()).ok()).collect();
        let a = m.phone_id("A").unwrap();
        let b = m.phone_id("B").unwrap();
        let occ = triphone_occupancy(&m, paths.iter().flatten());
        assert_eq!(occ[&(None, a, Some(b))], 1200);
        let sched = TrainSchedule { n_iters: 2, split_iters: vec![], ..TrainSchedule::default() };
        let (tri, _) = train_triphone(&m, &lex, &paths, &utts, 1000, &sched).unwrap();
        assert_eq!(tri.n_contexts(), 2);
        assert_ne!(tri.states_for(a, None, Some(b)), m.mono_states(a));
        assert_eq!(tri.states_for(a, Some(b), None), m.mono_states(a));
        tri.check_invariants().unwrap();
    }

    #[test]
    fn unreachable_threshold_keeps_monophone() {
        let (m, mut lex) = separated_model(&["A", "B"], 3, 8);
        lex.add_word("AB").unwrap();
        let utts = corpus(&m, "AB", 3);
        let paths: Vec<Option<AlignmentPath>> =
            utts.iter().map(|u| force_align(&m, &lex, &u.feats, &u.words, &AlignOptions::default()).ok()).collect();
        let (tri, trace) = train_triphone(&m, &lex, &paths, &utts, usize::MAX, &TrainSchedule::default()).unwrap();
        assert!(trace.is_empty());
        assert_eq!(tri.states, m.states);
        assert_eq!(tri.n_contexts(), 0);
    }
}
