mod common;

use proptest::prelude::*;

use bootasr::corpus::{subset_by_duration, Utterance};
use bootasr::decode::{build_prefix_tree, DecodeConfig, Decoder};
use bootasr::eval::{edit_distance, EditCounts};
use bootasr::features::{cmvn, FeatureMatrix, MfccConfig};
use bootasr::lexicon::{build_wordlist, graphemic_lexicon, oov_rate, supplement};
use bootasr::lm::{train_ngram, LmConfig, Smoothing};
use bootasr::segment::{chunk_spans, smith_waterman, SwConfig};
use bootasr::textnorm::{normalize, NumeralTable};

use common::*;

fn numerals() -> NumeralTable {
    let mut t = NumeralTable::new();
    for (i, w) in ["NIL", "UNNANE", "JEES", "TREE", "KIARE", "QUEIG"].iter().enumerate() {
        t.insert(i as u32, w);
    }
    t
}

fn messy_text() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[a-zA-ZÉéÇçÑñ0-9 '\\-,.!?’\t]{0,40}").unwrap()
}

fn tokens(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..=max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn normalize_is_idempotent(s in messy_text()) {
        let t = numerals();
        let once = normalize(&s, &t);
        prop_assert_eq!(normalize(&once.joined(), &t).tokens, once.tokens);
    }

    #[test]
    fn normalize_ignores_case(s in messy_text()) {
        let t = numerals();
        prop_assert_eq!(normalize(&s.to_lowercase(), &t).tokens, normalize(&s.to_uppercase(), &t).tokens);
    }

    #[test]
    fn punctuation_only_is_empty(s in "[ ,.!?;:'\\-\"()]{0,20}") {
        prop_assert!(normalize(&s, &NumeralTable::new()).tokens.is_empty());
    }

    #[test]
    fn pronunciation_spells_the_word(words in prop::collection::vec("[A-Z]{1,4}([-'][A-Z]{1,3})?", 1..8)) {
        let wl = build_wordlist(words.iter().map(String::as_str), 1);
        let (lex, rejected) = graphemic_lexicon(&wl).unwrap();
        prop_assert!(rejected.is_empty());
        for w in &words {
            let joined: String = lex.pronunciation(w).unwrap().concat();
            prop_assert_eq!(joined, w.replace(['-', '\''], ""));
        }
    }

    #[test]
    fn supplement_never_raises_oov(base in prop::collection::vec("[A-D]{1,2}", 1..10),
                                   extra in prop::collection::vec("[A-D]{1,2}", 0..6),
                                   test in prop::collection::vec("[A-D]{1,2}", 1..12)) {
        // One word clears the threshold so the base lexicon is never empty.
        let wl = build_wordlist(["A", "A"].into_iter().chain(base.iter().map(String::as_str)), 2);
        let before = graphemic_lexicon(&wl).unwrap().0;
        let after = graphemic_lexicon(&supplement(&wl, &extra)).unwrap().0;
        let t = || test.iter().map(String::as_str);
        prop_assert!(oov_rate(&after, t()) <= oov_rate(&before, t()));
    }

    #[test]
    fn subsets_grow_with_budget(durs in prop::collection::vec(0.5f64..8.0, 1..40), a in 0.0f64..3.0, b in 0.0f64..3.0, seed in 0u64..50) {
        let utts: Vec<Utterance> = durs
            .iter()
            .enumerate()
            .map(|(i, &d)| Utterance::whole(&format!("u{i}"), format!("u{i}.wav"), vec!["A".into()], d))
            .collect();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (s, l) = (subset_by_duration(&utts, lo, seed), subset_by_duration(&utts, hi, seed));
        prop_assert!(s.seconds <= l.seconds);
        let small: Vec<&str> = s.utterances.iter().map(|u| u.id.as_str()).collect();
        let large: Vec<&str> = l.utterances.iter().map(|u| u.id.as_str()).collect();
        prop_assert_eq!(&large[..small.len()], &small[..]);
    }

    #[test]
    fn chunks_cover_the_recording(duration in 0.1f64..600.0, len in 5.0f64..60.0, frac in 0.0f64..0.5) {
        let overlap = len * frac;
        let spans = chunk_spans(duration, len, overlap);
        prop_assert_eq!(spans[0].0, 0.0);
        prop_assert_eq!(spans.last().unwrap().1, duration);
        for w in spans.windows(2) {
            prop_assert!(w[1].0 <= w[0].1, "gap between chunks");
            prop_assert!(w[1].0 > w[0].0);
        }
        for &(s, e) in &spans {
            prop_assert!(e - s <= len + 1e-9);
        }
    }

    #[test]
    fn sw_regions_are_disjoint_and_ranked(a in tokens(30), b in tokens(30)) {
        let cfg = SwConfig::default();
        let regions = smith_waterman(&a, &b, &cfg);
        for (i, r) in regions.iter().enumerate() {
            prop_assert!(r.score >= cfg.min_score);
            if i > 0 {
                prop_assert!(r.score <= regions[i - 1].score);
            }
            for q in &regions[..i] {
                prop_assert!(r.hyp_range.1 <= q.hyp_range.0 || q.hyp_range.1 <= r.hyp_range.0);
                prop_assert!(r.ref_range.1 <= q.ref_range.0 || q.ref_range.1 <= r.ref_range.0);
            }
        }
    }

    #[test]
    fn edit_distance_is_a_metric(a in tokens(8), b in tokens(8), c in tokens(8)) {
        let ab = edit_distance(&a, &b);
        prop_assert_eq!(ab, brute_edit(&a, &b));
        prop_assert_eq!(ab, edit_distance(&b, &a));
        prop_assert!(edit_distance(&a, &c) <= ab + edit_distance(&b, &c));
        prop_assert_eq!(ab == 0, a == b);
        let k = EditCounts::of(&a, &b);
        prop_assert_eq!(k.n_ref, k.matches + k.substitutions + k.deletions);
        prop_assert_eq!(k.errors(), ab);
    }

    #[test]
    fn cmvn_is_idempotent(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 2..30)) {
        let once = cmvn(&FeatureMatrix::from_rows(&rows, 0.01));
        let twice = cmvn(&once);
        for (x, y) in once.data().iter().zip(twice.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn frame_count_formula(n in 400usize..1_000_000) {
        let cfg = MfccConfig::default();
        let (w, s) = (cfg.window_samples(), cfg.shift_samples());
        prop_assert_eq!(cfg.num_frames(n), if n < w { 0 } else { 1 + (n - w) / s });
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lm_distributions_sum_to_one(sents in prop::collection::vec(prop::collection::vec(0u8..6, 1..6), 1..25),
                                    order in 1usize..=4, kn in any::<bool>(), seed in any::<u64>()) {
        let text: Vec<Vec<String>> = sents.iter().map(|s| s.iter().map(|w| format!("W{w}")).collect()).collect();
        let smoothing = if kn { Smoothing::KneserNeyMod } else { Smoothing::WittenBell };
        let lm = train_ngram(&text, &LmConfig { order, smoothing, ..Default::default() }).unwrap();
        let vocab: Vec<String> = lm.predictable().map(|w| lm.word(w).to_string()).collect();
        let mut r = rng(seed);
        use rand::seq::IndexedRandom;
        for _ in 0..5 {
            let h: Vec<&str> = (0..order - 1).map(|_| vocab.choose(&mut r).unwrap().as_str()).collect();
            let total: f64 = vocab.iter().map(|w| 10f64.powf(lm.score(&h, w))).sum();
            prop_assert!((total - 1.0).abs() <= 1e-6, "sum {total}");
        }
    }

    #[test]
    fn more_text_never_unseens_a_word(sents in prop::collection::vec(prop::collection::vec(0u8..8, 1..5), 1..15),
                                       extra in prop::collection::vec(0u8..8, 1..5)) {
        let text: Vec<Vec<String>> = sents.iter().map(|s| s.iter().map(|w| format!("W{w}")).collect()).collect();
        let cfg = LmConfig { unk_singletons: false, ..Default::default() };
        let before = train_ngram(&text, &cfg).unwrap();
        let mut more = text.clone();
        more.push(extra.iter().map(|w| format!("W{w}")).collect());
        let after = train_ngram(&more, &cfg).unwrap();
        for w in before.vocab() {
            prop_assert!(after.word_id(w).is_some(), "{w} lost");
        }
    }

    #[test]
    fn wider_beam_never_scores_worse(seed in any::<u64>(), t in 3usize..25, narrow in 0.5f64..20.0) {
        let mut r = rng(seed);
        let (model, lex) = micro_model(&["A", "AB", "BA", "B"], 2, &mut r);
        let text: Vec<Vec<String>> = vec![vec!["A".into(), "B".into()], vec!["AB".into()], vec!["BA".into(), "A".into()]];
        let lm = train_ngram(&text, &LmConfig { order: 2, unk_singletons: false, ..Default::default() }).unwrap();
        let tree = build_prefix_tree(&lex, false);
        let feats = random_feats(t, 2, &mut r);
        let score = |beam| {
            let cfg = DecodeConfig { beam, lm_scale: 2.0, ..DecodeConfig::default() };
            Decoder::new(&model, &lm, &tree, cfg).unwrap().decode(&feats).map(|h| h.total)
        };
        let (n, w) = (score(narrow), score(narrow * 4.0));
        if let Ok(n) = n {
            prop_assert!(w.unwrap() >= n - 1e-9);
        }
    }

    #[test]
    fn decoded_words_tile_the_utterance(seed in any::<u64>(), t in 3usize..30) {
        let mut r = rng(seed);
        let (model, lex) = micro_model(&["A", "AB", "B"], 2, &mut r);
        let text: Vec<Vec<String>> = vec![vec!["A".into(), "B".into()], vec!["AB".into()]];
        let lm = train_ngram(&text, &LmConfig { order: 2, unk_singletons: false, ..Default::default() }).unwrap();
        let tree = build_prefix_tree(&lex, false);
        let feats = random_feats(t, 2, &mut r);
        let hyp = Decoder::new(&model, &lm, &tree, DecodeConfig::default()).unwrap().decode(&feats).unwrap();
        let end = feats.duration();
        let mut prev = 0.0;
        for w in &hyp.words {
            prop_assert!(w.start >= prev - 1e-9 && w.end > w.start && w.end <= end + 1e-9);
            prev = w.end;
        }
    }
}
