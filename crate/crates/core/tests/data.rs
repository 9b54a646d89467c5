use std::collections::BTreeSet;

use mmt_core::data::bpe::normalize;
use mmt_core::data::grounded::{mask_sentence, DEFAULT_MIN_COUNT};
use mmt_core::data::synth::translate_word;
use mmt_core::data::vocab::{BOS, EOS, MASK_SYMBOL, PAD, SPECIALS};
use mmt_core::data::{
    batch_by_tokens, build_grounded_vocab, detokenize, gen_synthetic_corpus, learn_bpe, mask_grounded_tokens,
    BpeModel, EncodedPair, ParallelCorpus, Split, Stopwords, SynthConfig, SynthMode, TokenBatch, Vocab,
};
use proptest::prelude::*;

fn pair(a: &str, b: &str) -> (String, String) {
    (a.to_string(), b.to_string())
}

#[test]
fn bpe_hand_examples() {
    let m = learn_bpe(&["aa aa"], 1).unwrap();
    assert_eq!(m.merges(), &[pair("a", "a")]);

    let m = BpeModel::from_merges(vec![pair("a", "a"), pair("aa", "aa")]);
    assert_eq!(m.apply("aaaa"), vec!["aaaa"]);

    let m = learn_bpe(&["hello world"], 0).unwrap();
    assert!(m.merges().is_empty());
    assert_eq!(m.apply("hi there"), vec!["h@@", "i", "t@@", "h@@", "e@@", "r@@", "e"]);
}

#[test]
fn bpe_learning_rules() {
    assert!(learn_bpe::<&str>(&[], 10).is_err());
    // "ab" and "bc" both occur twice; the smaller pair wins.
    let m = learn_bpe(&["abc abc"], 1).unwrap();
    assert_eq!(m.merges(), &[pair("a", "b")]);
    // No pair repeats, so learning stops early.
    let m = learn_bpe(&["abcd"], 5).unwrap();
    assert!(m.merges().is_empty());
    // Merges never cross punctuation.
    let m = learn_bpe(&["a.a a.a a.a"], 10).unwrap();
    assert!(m.merges().iter().all(|(a, b)| !format!("{a}{b}").contains('.') || a == "." || b == "."));
    assert!(m.merges().is_empty());
    assert_eq!(m.apply("a.a"), vec!["a@@", ".@@", "a"]);
    // Specials are atomic.
    let m = learn_bpe(&["<mask> x"], 0).unwrap();
    assert_eq!(m.apply("<mask> x"), vec!["<mask>", "x"]);
}

#[test]
fn bpe_learning_is_deterministic_and_serializes() {
    let corpus = ["the cat sat on the mat", "the bat sat", "a cat, a hat."];
    let a = learn_bpe(&corpus, 20).unwrap();
    let b = learn_bpe(&corpus, 20).unwrap();
    assert_eq!(a.merges(), b.merges());
    let text = a.to_text();
    assert!(text.starts_with(&format!("#mmt-bpe v1 merges={}", a.merges().len())));
    assert_eq!(BpeModel::from_text(&text).unwrap(), a);
    assert!(BpeModel::from_text("nonsense").is_err());
}

/// Applies each merge to every adjacent occurrence, left to right, in rank order.
fn naive_segment(word: &str, merges: &[(String, String)]) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(String::from).collect();
    for (a, b) in merges {
        let mut i = 0;
        while i + 1 < syms.len() {
            if &syms[i] == a && &syms[i + 1] == b {
                syms[i] = format!("{a}{b}");
                syms.remove(i + 1);
            } else {
                i += 1;
            }
        }
    }
    syms
}

proptest! {
    #[test]
    fn bpe_round_trip(mut lines in prop::collection::vec("[a-c ,.!]{0,30}", 1..8), merges in 0usize..40) {
        lines.push("ab".to_string());
        let model = learn_bpe(&lines, merges).unwrap();
        for s in &lines {
            let n = normalize(s, false);
            prop_assert_eq!(detokenize(&model.apply(&n)), n);
        }
    }

    #[test]
    fn bpe_segment_matches_sequential_merging(words in prop::collection::vec("[ab]{1,12}", 1..10), merges in 0usize..30) {
        let model = learn_bpe(&words, merges).unwrap();
        for w in &words {
            prop_assert_eq!(model.segment(w), naive_segment(w, model.merges()));
        }
    }

    #[test]
    fn batches_partition_the_corpus(
        lengths in prop::collection::vec((1usize..40, 1usize..40), 1..200),
        extra in 0usize..300,
        seed in 0u64..100,
    ) {
        let longest = lengths.iter().map(|l| l.0.max(l.1)).max().unwrap();
        let budget = longest + extra;
        let batches = batch_by_tokens(&lengths, budget, seed).unwrap();
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>());
        for b in &batches {
            prop_assert!(!b.is_empty());
            let m = b.iter().map(|&i| lengths[i].0.max(lengths[i].1)).max().unwrap();
            prop_assert!(b.len() * m <= budget);
        }
        prop_assert_eq!(batches.clone(), batch_by_tokens(&lengths, budget, seed).unwrap());
    }
}

#[test]
fn batching_edge_cases() {
    let uniform = vec![(5, 5); 7];
    let batches = batch_by_tokens(&uniform, 5, 0).unwrap();
    assert_eq!(batches.len(), 7);
    assert!(batches.iter().all(|b| b.len() == 1));

    let mixed = [(3, 9), (4, 2), (7, 7)];
    assert_eq!(batch_by_tokens(&mixed, 1 << 20, 3).unwrap().len(), 1);
    assert!(batch_by_tokens(&mixed, 8, 0).is_err());
}

#[test]
fn token_batch_layout() {
    let pairs = vec![EncodedPair::new(vec![7, 8], vec![9]), EncodedPair::new(vec![7], vec![10, 11, 12])];
    let b = TokenBatch::build(&pairs, &[0, 1]).unwrap();
    assert_eq!(b.source.ids, vec![7, 8, EOS, 7, EOS, PAD]);
    assert_eq!(b.target_in.ids, vec![BOS, 9, PAD, PAD, BOS, 10, 11, 12]);
    assert_eq!(b.target_out, vec![9, EOS, PAD, PAD, 10, 11, 12, EOS]);
    assert_eq!(b.target_in.lens, vec![2, 4]);
}

fn repeated(token: &str, n: usize) -> Vec<String> {
    vec![token.to_string(); n]
}

#[test]
fn grounded_vocab_threshold_and_stopwords() {
    let mut sents = repeated("thirty", 30);
    sents.extend(repeated("thirtyone", 31));
    sents.extend(repeated("the", 1000));
    sents.extend(repeated(MASK_SYMBOL, 100));
    let g = build_grounded_vocab(&sents, &Stopwords::english(), DEFAULT_MIN_COUNT);
    assert_eq!(g, BTreeSet::from(["thirtyone".to_string()]));
    let g = build_grounded_vocab(&["The x", "the x"], &Stopwords::english(), 0);
    assert_eq!(g, BTreeSet::from(["x".to_string()]));
    let custom = Stopwords::parse("x\n\n");
    assert_eq!(custom.len(), 1);
    assert!(build_grounded_vocab(&["x y"], &custom, 0).contains("y"));
}

#[test]
fn masking_cases() {
    let none = mask_sentence("a man rides a horse", &BTreeSet::new());
    assert_eq!(none.tokens.join(" "), "a man rides a horse");
    assert_eq!((none.masked, none.fraction()), (0, 0.0));

    let all: BTreeSet<String> = ["man", "horse"].iter().map(|s| s.to_string()).collect();
    let m = mask_grounded_tokens(&["man", "horse"], &all);
    assert_eq!(m.tokens, vec![MASK_SYMBOL, MASK_SYMBOL]);
    assert_eq!(m.fraction(), 1.0);

    let m = mask_sentence("a man rides a horse", &all);
    assert_eq!(m.tokens.join(" "), "a <mask> rides a <mask>");
    assert_eq!(m.fraction(), 0.4);
}

#[test]
fn synthetic_masked_fraction_is_calibrated() {
    for mode in [SynthMode::TextSufficient, SynthMode::TextInsufficient] {
        let cfg = SynthConfig {
            mode,
            ..SynthConfig::default()
        };
        let s = gen_synthetic_corpus(&cfg).unwrap();
        let sources: Vec<&str> = s.corpus.pairs.iter().map(|p| p.source.as_str()).collect();
        let grounded = build_grounded_vocab(&sources, &Stopwords::english(), DEFAULT_MIN_COUNT);
        let (mut masked, mut total) = (0, 0);
        for src in sources {
            let toks: Vec<&str> = src.split_whitespace().filter(|&t| t != MASK_SYMBOL).collect();
            let m = mask_grounded_tokens(&toks, &grounded);
            masked += m.masked;
            total += m.tokens.len();
        }
        let frac = masked as f64 / total as f64;
        assert!((frac - 0.45).abs() <= 0.02, "{mode:?}: masked fraction {frac}");
    }
}

#[test]
fn synthetic_corpus_structure() {
    let cfg = SynthConfig {
        n: 500,
        seed: 4,
        ..SynthConfig::default()
    };
    let a = gen_synthetic_corpus(&cfg).unwrap();
    assert_eq!(a, gen_synthetic_corpus(&cfg).unwrap());
    assert_ne!(a.corpus, gen_synthetic_corpus(&SynthConfig { seed: 5, ..cfg.clone() }).unwrap().corpus);
    assert_eq!(a.store.len(), 500);
    assert_eq!(a.store.dim(), cfg.d_v);
    for (i, p) in a.corpus.pairs.iter().enumerate() {
        assert_eq!(p.feature_id, format!("img{i:06}"));
        let want: Vec<String> = p.source.split(' ').map(translate_word).collect();
        assert_eq!(p.target, want.join(" "));
        assert!(a.classes[i] < cfg.classes);
    }

    let ins = gen_synthetic_corpus(&SynthConfig {
        mode: SynthMode::TextInsufficient,
        ..cfg.clone()
    })
    .unwrap();
    // The class word sits at the mask slot and is a function of the class alone.
    let mut word_of_class = vec![None; cfg.classes];
    for (p, &c) in ins.corpus.pairs.iter().zip(&ins.classes) {
        let src: Vec<&str> = p.source.split(' ').collect();
        let tgt: Vec<&str> = p.target.split(' ').collect();
        assert_eq!(src.len(), tgt.len());
        let slots: Vec<usize> = (0..src.len()).filter(|&i| src[i] == MASK_SYMBOL).collect();
        assert_eq!(slots.len(), 1);
        for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
            if i == slots[0] {
                let w = word_of_class[c].get_or_insert(t.to_string());
                assert_eq!(w, t);
            } else {
                assert_eq!(translate_word(s), *t);
            }
        }
    }
    let distinct: BTreeSet<_> = word_of_class.iter().flatten().collect();
    assert_eq!(distinct.len(), cfg.classes);
    assert!(SynthConfig { n: 0, ..cfg }.validate().is_err());
}

#[test]
fn corpus_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = gen_synthetic_corpus(&SynthConfig {
        n: 50,
        ..SynthConfig::default()
    })
    .unwrap();
    let [train, valid, test] = s.corpus.split_off(5, 5).unwrap();
    assert_eq!((train.len(), valid.len(), test.len()), (40, 5, 5));
    assert_eq!(test.split, Split::Test);
    for c in [&train, &valid, &test] {
        c.write(dir.path(), c.split.name()).unwrap();
        assert_eq!(&ParallelCorpus::read_dir(dir.path(), c.split).unwrap(), c);
    }
    std::fs::write(dir.path().join("train.fid"), "x\n").unwrap();
    assert!(ParallelCorpus::read_dir(dir.path(), Split::Train).is_err());
}

#[test]
fn vocabulary_order_and_serialization() {
    let sents = vec![vec!["b", "a", "b"], vec!["c", "a", "b"]];
    let v = Vocab::build(&sents);
    assert_eq!(&v.tokens()[..SPECIALS.len()], &SPECIALS);
    assert_eq!(&v.tokens()[SPECIALS.len()..], &["b", "a", "c"]);
    assert_eq!(v.id("zzz"), 3);
    assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
    assert!(Vocab::from_text("x\n").is_err());
}
