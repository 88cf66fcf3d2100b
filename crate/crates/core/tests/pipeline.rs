mod common;

use std::collections::BTreeMap;

use bootasr::pipeline::{run_pipeline, sweep, PipelineConfig, PipelineError, RunOutcome, StageStatus, SweepConfig};

use common::*;

fn statuses(out: &RunOutcome) -> BTreeMap<String, StageStatus> {
    out.stages.iter().map(|s| (s.name.clone(), s.status)).collect()
}

#[test]
fn rerun_is_cached_and_text_edits_invalidate_downstream_only() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = make_corpus(&dir.path().join("corpus"), &tiny_corpus_config());
    let cfg = pipeline_config(&corpus, dir.path().join("work"), true);

    let first = run_pipeline(&cfg).unwrap();
    assert!(statuses(&first).values().all(|s| *s == StageStatus::Ran));
    assert!(first.summary.harvest.is_some() && first.summary.triphone.is_some());
    for f in ["run.toml", "summary.json", "timing.json"] {
        assert!(dir.path().join("work").join(f).is_file(), "{f}");
    }

    let again = run_pipeline(&cfg).unwrap();
    assert!(statuses(&again).values().all(|s| *s == StageStatus::Cached));
    assert_eq!(again.summary, first.summary);

    let mut text = std::fs::read_to_string(&corpus.text_corpus).unwrap();
    text.push_str(&corpus.truth.vocabulary[..3].join(" "));
    text.push('\n');
    std::fs::write(&corpus.text_corpus, text).unwrap();
    let edited = statuses(&run_pipeline(&cfg).unwrap());
    assert_eq!(edited["features"], StageStatus::Cached);
    for s in ["normalize", "lexicon", "mono", "lm", "decode", "score"] {
        assert_eq!(edited[s], StageStatus::Ran, "{s}");
    }
}

#[test]
fn bad_numerals_fail_validation_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = make_corpus(&dir.path().join("corpus"), &tiny_corpus_config());
    let mut cfg = pipeline_config(&corpus, dir.path().join("work"), true);
    cfg.paths.numerals = Some(dir.path().join("missing.tsv"));
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(err.is_validation(), "{err}");
    assert!(!dir.path().join("work/stages").exists());

    std::fs::write(dir.path().join("bad.tsv"), "seven\tSEVEN\n").unwrap();
    cfg.paths.numerals = Some(dir.path().join("bad.tsv"));
    assert!(matches!(run_pipeline(&cfg), Err(PipelineError::Config(_))));
}

#[test]
fn snapshot_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = make_corpus(&dir.path().join("corpus"), &tiny_corpus_config());
    let cfg = pipeline_config(&corpus, dir.path().join("work"), true);
    let text = cfg.to_toml();
    let back = PipelineConfig::from_toml(&text, dir.path()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    let mut moved = cfg.clone();
    moved.paths.workdir = dir.path().join("elsewhere");
    assert_eq!(moved.hash(), cfg.hash());
    moved.seed += 1;
    assert_ne!(moved.hash(), cfg.hash());
}

#[test]
fn sweep_fills_the_budget_by_lm_table() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = make_corpus(&dir.path().join("corpus"), &tiny_corpus_config());
    let mut cfg = pipeline_config(&corpus, dir.path().join("work"), true);
    cfg.triphone.enabled = false;
    let res = sweep(&cfg, &SweepConfig { budgets: vec![1.0, 0.5, 1.0], include_long_form: false }).unwrap();
    assert_eq!(res.cells.len(), 4);
    assert_eq!(res.budgets(), vec![0.5, 1.0]);
    assert!(res.cells.iter().all(|c| c.score.is_ok()), "{:?}", res.cells);
    let root = dir.path().join("work/sweep-s1");
    let tsv = std::fs::read_to_string(root.join("sweep.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3);
    assert!(std::fs::read_to_string(root.join("sweep.svg")).unwrap().contains("<polyline"));

    let bad = sweep(&cfg, &SweepConfig { budgets: vec![-1.0], include_long_form: false });
    assert!(matches!(bad, Err(PipelineError::Config(_))));
}
