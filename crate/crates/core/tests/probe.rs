use std::collections::HashMap;

use mmt_autodiff::Tensor;
use mmt_core::fusion::GateRecord;
use mmt_core::params::ParamStore;
use mmt_core::probe::gate::{read_gate_log, stats_by_epoch, write_gate_log};
use mmt_core::probe::{
    bleu4, emit_dynamics_csv, history_csv, micro_avg_gate, micro_avg_summaries, weight_l2_norm, EpochRecord,
    GateLogLine, GateStats, GateSummary, DEFAULT_TAU,
};
use mmt_core::train::Checkpoint;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Corpus BLEU-4 written from the textbook definition.
fn oracle_bleu(hyps: &[String], refs: &[String]) -> f64 {
    let mut num = [0u64; 4];
    let mut den = [0u64; 4];
    let (mut c, mut r) = (0u64, 0u64);
    for (h, rf) in hyps.iter().zip(refs) {
        let h: Vec<String> = h.split(' ').filter(|s| !s.is_empty()).map(String::from).collect();
        let rf: Vec<String> = rf.split(' ').filter(|s| !s.is_empty()).map(String::from).collect();
        c += h.len() as u64;
        r += rf.len() as u64;
        for n in 1..=4usize {
            if h.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<Vec<String>, u64> = HashMap::new();
            for i in 0..rf.len().saturating_sub(n - 1) {
                *ref_counts.entry(rf[i..i + n].to_vec()).or_default() += 1;
            }
            let mut hyp_counts: HashMap<Vec<String>, u64> = HashMap::new();
            for i in 0..=h.len() - n {
                *hyp_counts.entry(h[i..i + n].to_vec()).or_default() += 1;
            }
            for (g, k) in hyp_counts {
                num[n - 1] += k.min(ref_counts.get(&g).copied().unwrap_or(0));
                den[n - 1] += k;
            }
        }
    }
    if num.contains(&0) || c == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..4).map(|n| (num[n] as f64 / den[n] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * log_p.exp()
}

fn random_sentence(rng: &mut ChaCha8Rng, words: usize, max_len: usize) -> String {
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| format!("w{}", rng.gen_range(0..words))).collect::<Vec<_>>().join(" ")
}

#[test]
fn bleu_matches_clean_room_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut nonzero = 0;
    for _ in 0..100 {
        let m = rng.gen_range(1..6);
        let refs: Vec<String> = (0..m).map(|_| random_sentence(&mut rng, 4, 12)).collect();
        let hyps: Vec<String> = refs
            .iter()
            .map(|r| {
                if rng.gen_bool(0.5) {
                    r.split(' ').filter(|_| rng.gen_bool(0.85)).collect::<Vec<_>>().join(" ")
                } else {
                    random_sentence(&mut rng, 4, 12)
                }
            })
            .collect();
        let got = bleu4(&hyps, &refs).unwrap().bleu;
        let want = oracle_bleu(&hyps, &refs);
        assert!((got - want).abs() < 1e-6, "{got} vs {want} on {hyps:?} / {refs:?}");
        nonzero += usize::from(want > 0.0);
    }
    assert!(nonzero > 20, "only {nonzero} corpora with positive BLEU");
}

#[test]
fn bleu_fixed_cases() {
    let refs = ["a cat sat on the mat", "the dog ran"];
    assert_eq!(bleu4(&refs, &refs).unwrap().bleu, 100.0);
    let r = bleu4(&["x y z w v"], &["a b c d e"]).unwrap();
    assert_eq!(r.bleu, 0.0);
    assert_eq!(bleu4(&[""], &["a b c d"]).unwrap().bleu, 0.0);
    // Hand count: 5-token hypothesis prefix of a 6-token reference.
    let r = bleu4(&["a b c d e"], &["a b c d e f"]).unwrap();
    assert_eq!(r.precisions, [1.0; 4]);
    assert!((r.brevity_penalty - (1.0f64 - 6.0 / 5.0).exp()).abs() < 1e-15);
    assert!(bleu4(&["a"], &["a", "b"]).is_err());
    assert!(bleu4::<&str, &str>(&[], &[]).is_err());
    assert!(r.summary().starts_with("BLEU = "));
}

proptest! {
    #[test]
    fn bleu_range_and_permutation_invariance(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(1..8);
        let refs: Vec<String> = (0..m).map(|_| random_sentence(&mut rng, 3, 10)).collect();
        let hyps: Vec<String> = (0..m).map(|_| random_sentence(&mut rng, 3, 10)).collect();
        let base = bleu4(&hyps, &refs).unwrap().bleu;
        prop_assert!((0.0..=100.0).contains(&base));
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let ph: Vec<&String> = order.iter().map(|&i| &hyps[i]).collect();
        let pr: Vec<&String> = order.iter().map(|&i| &refs[i]).collect();
        prop_assert!((bleu4(&ph, &pr).unwrap().bleu - base).abs() < 1e-9);
    }
}

fn random_records(rng: &mut ChaCha8Rng, d: usize, dyadic: bool) -> Vec<GateRecord> {
    let m = rng.gen_range(1..12);
    (0..m)
        .map(|i| {
            let t = rng.gen_range(1..9);
            let lambda = (0..t * d)
                .map(|_| match rng.gen_range(0..4) {
                    0 => 0.0,
                    1 if dyadic => 1.0 / 1024.0 / 1024.0 / 1024.0 / 1024.0,
                    1 => 1e-12,
                    _ if dyadic => rng.gen_range(0..=1024) as f64 / 1024.0,
                    _ => rng.gen_range(0.0..1.0),
                })
                .collect();
            GateRecord::new(format!("s{i}"), 1, t, d, lambda).unwrap()
        })
        .collect()
}

#[test]
fn gate_statistics_match_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let d = rng.gen_range(1..6);
        let recs = random_records(&mut rng, d, false);
        let stats = micro_avg_gate(&recs, DEFAULT_TAU).unwrap();
        let mut sum = 0.0;
        let mut above = 0usize;
        let mut rows = 0usize;
        for r in &recs {
            rows += r.t;
            for &x in &r.lambda {
                sum += x;
                above += usize::from(x > DEFAULT_TAU);
            }
        }
        assert_eq!(stats.lambda_bar, sum / (d * rows) as f64);
        assert_eq!(stats.exceed_fraction, above as f64 / (d * rows) as f64);
        assert_eq!((stats.m, stats.v, stats.d), (recs.len(), rows, d));
    }
}

#[test]
fn gate_statistics_are_associative_under_splits() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for dyadic in [true, false] {
        for _ in 0..50 {
            let d = rng.gen_range(1..6);
            let recs = random_records(&mut rng, d, dyadic);
            let whole = micro_avg_gate(&recs, DEFAULT_TAU).unwrap();
            let mut cuts: Vec<usize> = (1..recs.len()).filter(|_| rng.gen_bool(0.4)).collect();
            cuts.insert(0, 0);
            cuts.push(recs.len());
            let parts: Vec<GateStats> = cuts
                .windows(2)
                .map(|w| micro_avg_gate(&recs[w[0]..w[1]], DEFAULT_TAU).unwrap())
                .collect();
            let merged = GateStats::merge(&parts).unwrap();
            assert_eq!((merged.m, merged.v, merged.d), (whole.m, whole.v, whole.d));
            if dyadic {
                assert_eq!(merged.lambda_bar, whole.lambda_bar);
                assert_eq!(merged.exceed_fraction, whole.exceed_fraction);
            } else {
                assert!((merged.lambda_bar - whole.lambda_bar).abs() < 1e-12);
                assert!((merged.exceed_fraction - whole.exceed_fraction).abs() < 1e-12);
            }
            let summaries: Vec<GateSummary> = recs.iter().map(|r| GateSummary::of(r, DEFAULT_TAU)).collect();
            let from_summaries = micro_avg_summaries(&summaries).unwrap();
            assert!((from_summaries.lambda_bar - whole.lambda_bar).abs() < 1e-12);
            assert_eq!(from_summaries.exceed_fraction, whole.exceed_fraction);
        }
    }
}

#[test]
fn gate_statistics_examples() {
    let half = [GateRecord::new("a", 0, 3, 2, vec![0.5; 6]).unwrap(), GateRecord::new("b", 0, 1, 2, vec![0.5; 2]).unwrap()];
    let s = micro_avg_gate(&half, DEFAULT_TAU).unwrap();
    assert_eq!((s.lambda_bar, s.exceed_fraction), (0.5, 1.0));
    let zero = [GateRecord::new("a", 0, 2, 3, vec![0.0; 6]).unwrap()];
    let s = micro_avg_gate(&zero, DEFAULT_TAU).unwrap();
    assert_eq!((s.lambda_bar, s.exceed_fraction), (0.0, 0.0));
    // A long sentence weighs more than a short one.
    let mixed = [GateRecord::new("a", 0, 3, 1, vec![1.0; 3]).unwrap(), GateRecord::new("b", 0, 1, 1, vec![0.0]).unwrap()];
    assert_eq!(micro_avg_gate(&mixed, DEFAULT_TAU).unwrap().lambda_bar, 0.75);
    assert!(micro_avg_gate(&[], DEFAULT_TAU).is_err());
    let other_d = [zero[0].clone(), GateRecord::new("c", 0, 1, 2, vec![0.0; 2]).unwrap()];
    assert!(micro_avg_gate(&other_d, DEFAULT_TAU).is_err());
}

proptest! {
    #[test]
    fn exceed_fraction_is_non_increasing_in_tau(seed in 0u64..200, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs = random_records(&mut rng, 3, false);
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let a = micro_avg_gate(&recs, lo).unwrap();
        let b = micro_avg_gate(&recs, hi).unwrap();
        prop_assert!(b.exceed_fraction <= a.exceed_fraction);
        prop_assert!((0.0..=1.0).contains(&a.lambda_bar));
    }
}

#[test]
fn gate_log_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut lines: Vec<GateLogLine> = Vec::new();
    for epoch in [2, 1] {
        for mut r in random_records(&mut rng, 2, true) {
            r.epoch = epoch;
            lines.push(if epoch == 1 {
                GateLogLine::Full(r)
            } else {
                GateLogLine::Summary(GateSummary::of(&r, DEFAULT_TAU))
            });
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gates.jsonl");
    let mut buf = Vec::new();
    write_gate_log(&mut buf, &lines).unwrap();
    std::fs::write(&path, &buf).unwrap();
    let back = read_gate_log(&path).unwrap();
    assert_eq!(back, lines);
    let by_epoch = stats_by_epoch(&back, DEFAULT_TAU).unwrap();
    assert_eq!(by_epoch.iter().map(|(e, _)| *e).collect::<Vec<_>>(), vec![1, 2]);
    std::fs::write(&path, "").unwrap();
    assert!(read_gate_log(&path).is_err());
}

#[test]
fn weight_norm_and_csv() {
    let mut store = ParamStore::<f32>::new();
    store.insert("fusion.w_z", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    store.insert("dec.0.w", Tensor::new(vec![1], vec![12.0]).unwrap());
    let ckpt = Checkpoint::from_store(&store, 0, 1, 0.0);
    assert_eq!(weight_l2_norm(&ckpt, "fusion").unwrap(), 5.0);
    assert_eq!(weight_l2_norm(&ckpt, "").unwrap(), 13.0);
    assert!(weight_l2_norm(&ckpt, "nothing").is_err());

    let gate = micro_avg_gate(&[GateRecord::new("a", 1, 1, 2, vec![0.25, 0.0]).unwrap()], DEFAULT_TAU).unwrap();
    let history = vec![
        EpochRecord { epoch: 1, train_loss: 2.0, val_loss: 1.5, gate: Some(gate), lr: 1e-3 },
        EpochRecord { epoch: 2, train_loss: 1.0, val_loss: 1.25, gate: None, lr: 2e-3 },
    ];
    let csv = emit_dynamics_csv(&history).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "epoch,lambda_bar,exceed_fraction,val_loss");
    assert_eq!(rows[1], "1,1.25e-1,5e-1,1.5e0");
    assert_eq!(rows[2], "2,,,1.25e0");
    assert!(emit_dynamics_csv(&[]).is_err());
    assert_eq!(history_csv(&history).lines().count(), 3);
}
