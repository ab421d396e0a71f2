mod common;

use common::{rng, tiny_model};
use fdvae::autodiff::Tape;
use fdvae::corpus::{
    batches, build_vocab, generate_synthetic, load_text, write_text, CorpusSplit, PaddedBatch,
    SyntheticSpec, Vocabulary, BOS, EOS, PAD, UNK,
};
use fdvae::objectives::{elbo_step, ObjectiveConfig, StepNoise};
use fdvae::Error;
use rand::seq::SliceRandom;
use std::collections::HashSet;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[test]
fn reserved_ids() {
    let v = Vocabulary::from_tokens(["x"]).unwrap();
    assert_eq!(v.tokens()[..4], ["<pad>", "<unk>", "<s>", "</s>"]);
    assert_eq!((PAD, UNK, BOS, EOS), (0, 1, 2, 3));
    assert_eq!(v.id("x"), Some(4));
    assert_eq!(v.decode(&[4, 99]), vec!["x", "<unk>"]);
    assert!(Vocabulary::from_tokens(["x", "x"]).is_err());
    assert!(Vocabulary::from_tokens(["<s>"]).is_err());
}

#[test]
fn vocabulary_hash_ignores_sentence_order() {
    let corpus: Vec<Vec<String>> = [
        "the cat sat", "a dog ran", "the dog sat down", "a cat", "every cat ran far",
        "no dog", "the the cat", "down by the river",
    ]
    .iter()
    .map(|s| words(s))
    .collect();
    let base = build_vocab(&corpus, 9).unwrap().hash();
    let mut r = rng(3);
    for _ in 0..10 {
        let mut shuffled = corpus.clone();
        shuffled.shuffle(&mut r);
        assert_eq!(build_vocab(&shuffled, 9).unwrap().hash(), base);
    }
}

#[test]
fn text_round_trip_and_blank_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.txt");
    std::fs::write(&path, "a b  c\n\n   \nd e\n").unwrap();
    assert_eq!(load_text(&path).unwrap(), vec![words("a b c"), words("d e")]);

    let sents = vec![words("x y"), words("z")];
    write_text(&path, &sents).unwrap();
    assert_eq!(load_text(&path).unwrap(), sents);

    let missing = dir.path().join("missing.txt");
    match load_text(&missing) {
        Err(Error::Io { path, .. }) => assert_eq!(path, missing),
        other => panic!("expected an I/O error, got {other:?}"),
    }
}

#[test]
fn vocabulary_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    let v = build_vocab(&[words("b a b c")], 100).unwrap();
    v.save(&path).unwrap();
    let back = Vocabulary::load(&path).unwrap();
    assert_eq!(back, v);
    assert_eq!(back.hash(), v.hash());
    std::fs::write(&path, "a\nb\n").unwrap();
    assert!(matches!(Vocabulary::load(&path), Err(Error::Format { .. })));
}

#[test]
fn synthetic_splits_are_disjoint_and_balanced() {
    let c = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let train: HashSet<_> = c.split.train.iter().collect();
    let dev: HashSet<_> = c.split.dev.iter().collect();
    assert!(c.split.dev.iter().all(|s| !train.contains(s)));
    assert!(c.split.test.iter().all(|s| !train.contains(s) && !dev.contains(s)));
    assert_eq!(c.split.train.len(), 2000);
    assert!(c.vocab.len() <= 200);
    let k = 4.0;
    for t in 0..4 {
        let n = c.train.iter().filter(|s| s.template == t).count() as f64;
        assert!((n / 2000.0 - 1.0 / k).abs() <= 0.1 / k, "template {t}: {n}");
    }
}

#[test]
fn synthetic_rejects_grammar_too_small_for_disjoint_splits() {
    let spec = SyntheticSpec {
        n_templates: 2,
        n_topics: 1,
        words_per_slot: 1,
        n_train: 10,
        n_dev: 5,
        ..SyntheticSpec::default()
    };
    assert!(matches!(generate_synthetic(&spec), Err(Error::Config { .. })));
    let bad = SyntheticSpec {
        n_templates: 1,
        ..SyntheticSpec::default()
    };
    assert!(generate_synthetic(&bad).is_err());
}

#[test]
fn overlapping_splits_are_rejected() {
    let split = CorpusSplit {
        train: vec![vec![4, 5]],
        dev: vec![vec![5]],
        test: vec![vec![4, 5]],
        source: "inline".into(),
    };
    assert!(matches!(split.validate(6), Err(Error::Input(_))));
    let oov = CorpusSplit {
        test: vec![vec![9]],
        ..split
    };
    assert!(matches!(oov.validate(6), Err(Error::Index { .. })));
}

#[test]
fn padding_does_not_change_the_loss() {
    let m = tiny_model(21);
    let sents: Vec<Vec<usize>> = vec![
        vec![4, 5, 4],
        vec![5],
        vec![4, 4, 5, 5, 4],
        vec![5, 4],
        vec![1, 4, 5, 4],
        vec![4],
        vec![5, 5, 5, 4, 1, 4],
        vec![4, 5],
    ];
    let cfg = ObjectiveConfig::default();
    let noise = StepNoise { eps: None, masks: None };
    let batched = {
        let b = &batches(&sents, 8, 0, 0, false).unwrap()[0];
        let mut tape = Tape::new();
        elbo_step(&mut tape, &m, b, &cfg, 1.0, &noise).unwrap().breakdown.total
    };
    let single: f64 = sents
        .iter()
        .map(|x| {
            let mut tape = Tape::new();
            let b = PaddedBatch::single(x).unwrap();
            elbo_step(&mut tape, &m, &b, &cfg, 1.0, &noise).unwrap().breakdown.total
        })
        .sum::<f64>()
        / 8.0;
    assert!((batched - single).abs() < 1e-10);
}

#[test]
fn padded_batch_layout() {
    let b = PaddedBatch::from_sentences(&[&[4, 5, 6], &[7]], vec![3, 8]).unwrap();
    assert_eq!(b.tokens, vec![vec![4, 5, 6], vec![7, PAD, PAD]]);
    assert_eq!(b.sentence(1), &[7]);
    assert_eq!(b.position_mask(1), vec![1.0, 0.0]);
    assert_eq!(b.total_tokens(), 4);
    assert!(PaddedBatch::from_sentences(&[&[4], &[]], vec![0, 1]).is_err());
}
