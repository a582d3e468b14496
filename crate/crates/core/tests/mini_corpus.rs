use std::path::PathBuf;

use csls::corpus::{corpus_stats, load_jsonl, split_dataset};
use csls::linealign::{align_batch, split_lines, AlignMode, DEFAULT_K_CAP, DEFAULT_P};
use csls::tokenize::DEFAULT_MAX_LEN;
use csls::ByteTokenizer;

fn corpus_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/mini_corpus.jsonl")
}

#[test]
fn stats_match_frozen_recount() {
    let corpus = load_jsonl(&corpus_path()).unwrap();
    assert_eq!(corpus.len(), 50);
    let stats = corpus_stats(&corpus, &ByteTokenizer, DEFAULT_MAX_LEN).unwrap();
    // recounted by scripts/make_mini_corpus.py
    assert_eq!(stats.mean_tokens_structured, 16204.0 / 50.0);
    assert_eq!(stats.mean_tokens_baseline, 14180.0 / 50.0);
    assert_eq!(stats.ratio, (14180.0 / 50.0) / (16204.0 / 50.0));
    assert_eq!(stats.mean_lines, 937.0 / 50.0);
    assert_eq!(stats.frac_over_limit, 0.0);
}

#[test]
fn frac_over_limit_tracks_the_limit() {
    let corpus = load_jsonl(&corpus_path()).unwrap();
    for (limit, over) in [(1, 50), (128, 50), (256, 36), (1024, 0)] {
        let stats = corpus_stats(&corpus, &ByteTokenizer, limit).unwrap();
        assert_eq!(stats.frac_over_limit, over as f64 / 50.0, "limit {limit}");
    }
}

#[test]
fn stats_csv_has_one_row_per_snippet() {
    let corpus = load_jsonl(&corpus_path()).unwrap();
    let stats = corpus_stats(&corpus, &ByteTokenizer, DEFAULT_MAX_LEN).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stats.csv");
    stats.write_csv(&path).unwrap();
    let mut r = csv::Reader::from_path(&path).unwrap();
    assert_eq!(
        r.headers().unwrap(),
        vec!["id", "structured_tokens", "baseline_tokens", "lines"]
    );
    assert_eq!(r.records().count(), 50);
}

#[test]
fn whole_corpus_aligns() {
    let corpus = load_jsonl(&corpus_path()).unwrap();
    let lines: Vec<Vec<&str>> = corpus.iter().map(|s| split_lines(&s.code)).collect();
    let batch = align_batch(
        &lines,
        DEFAULT_K_CAP,
        DEFAULT_P,
        &ByteTokenizer,
        AlignMode::PerBatch,
    )
    .unwrap();
    let max_lines = lines.iter().map(Vec::len).max().unwrap();
    assert_eq!(batch.k, max_lines.min(DEFAULT_K_CAP));
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(batch.real_lines(i), l.len().min(batch.k));
    }
}

#[test]
fn split_is_80_10_10() {
    let corpus = load_jsonl(&corpus_path()).unwrap();
    let split = split_dataset(&corpus, (0.8, 0.1, 0.1), 123456).unwrap();
    assert_eq!(
        (split.train.len(), split.valid.len(), split.test.len()),
        (40, 5, 5)
    );
    assert_eq!(
        split,
        split_dataset(&corpus, (0.8, 0.1, 0.1), 123456).unwrap()
    );
}
