use mmt_autodiff::{Graph, Tensor};
use mmt_core::data::bpe::learn_bpe;
use mmt_core::data::prepare::{encode_pairs, joint_vocab, tokenize_corpus};
use mmt_core::data::vocab::PAD;
use mmt_core::data::{gen_synthetic_corpus, SynthConfig, Vocab};
use mmt_core::model::{ModelConfig, ModelKind, Seq2Seq};
use mmt_core::params::ParamStore;
use mmt_core::train::loss::smoothed_targets;
use mmt_core::train::sweep::{sweep_csv, weight_decay_sweep, CellResult, SweepAxis};
use mmt_core::train::trainer::{token_accuracy, validate, visual_features};
use mmt_core::train::{
    average_checkpoints, smoothed_cross_entropy, train, AdamConfig, Checkpoint, EarlyStopping, FeatureSource,
    LrSchedule, OptimizerState, SplitData, TrainRunConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ce(logits: &[f64], targets: &[usize], v: usize, eps: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![targets.len(), v], logits.to_vec()).unwrap());
    let (loss, _) = smoothed_cross_entropy(&mut g, x, targets, eps, PAD).unwrap();
    g.value(loss).data()[0]
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    row.iter().map(|x| x - m - z.ln()).collect()
}

#[test]
fn schedule_anchors_and_shape() {
    let s = LrSchedule::default();
    assert_eq!(s.lr_at_step(0), 1e-7);
    assert_eq!(s.lr_at_step(2000), 0.005);
    assert!((s.lr_at_step(8000) - 0.0025).abs() < 1e-15);
    assert!((1..2000).all(|k| s.lr_at_step(k) > s.lr_at_step(k - 1)));
    assert!((2001..10000).all(|k| s.lr_at_step(k) < s.lr_at_step(k - 1)));
}

#[test]
fn label_smoothed_loss_cases() {
    // ε = 0 is plain cross-entropy.
    let logits = [0.3, -1.2, 2.0, 0.5, 0.0, -0.7];
    let want = -(log_softmax(&logits[..3])[2] + log_softmax(&logits[3..])[1]) / 2.0;
    assert!((ce(&logits, &[2, 1], 3, 0.0) - want).abs() < 1e-12);

    // Uniform logits give ln V for every ε.
    for eps in [0.0, 0.1, 0.5] {
        assert!((ce(&[0.0; 10], &[3, 4], 5, eps) - 5f64.ln()).abs() < 1e-12);
    }

    // 2×3 oracle with ε = 0.1 and a padded third row.
    let logits = [1.0, 2.0, 3.0, -1.0, 0.0, 4.0, 9.0, 9.0, 9.0];
    let eps = 0.1;
    let mut want = 0.0;
    for (r, gold) in [(0, 2usize), (1, 1)] {
        let lp = log_softmax(&logits[r * 3..r * 3 + 3]);
        for (j, l) in lp.iter().enumerate() {
            let q = if j == gold { 1.0 - eps } else { eps / 2.0 };
            want -= q * l / 2.0;
        }
    }
    assert!((ce(&logits, &[2, 1, PAD], 3, eps) - want).abs() < 1e-10);

    assert!(smoothed_targets::<f64>(&[PAD, PAD], 4, 0.1, PAD).is_err());
    assert!(smoothed_targets::<f64>(&[1], 4, 1.0, PAD).is_err());
    assert!(smoothed_targets::<f64>(&[9], 4, 0.1, PAD).is_err());
}

proptest! {
    #[test]
    fn smoothed_weights_form_a_mean_of_distributions(
        targets in prop::collection::vec(0usize..6, 1..10),
        eps in 0.0f64..0.9,
    ) {
        prop_assume!(targets.iter().any(|&t| t != PAD));
        let (w, n) = smoothed_targets::<f64>(&targets, 6, eps, PAD).unwrap();
        prop_assert_eq!(n, targets.iter().filter(|&&t| t != PAD).count());
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

/// Scalar Adam with coupled L2 decay.
fn adam_oracle(x0: f64, grads: &[f64], lrs: &[f64], wd: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.98f64, 1e-8);
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    for (t, (&g, &lr)) in grads.iter().zip(lrs).enumerate() {
        let g = g + wd * x;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32 + 1));
        let vh = v / (1.0 - b2.powi(t as i32 + 1));
        x -= lr * mh / (vh.sqrt() + eps);
    }
    x
}

#[test]
fn adam_cases() {
    let mut params = vec![Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()];
    let mut opt = OptimizerState::new(AdamConfig::default(), &params);
    opt.step(&mut params, &[Some(vec![0.0; 3])], 0.1).unwrap();
    assert_eq!(params[0].data(), &[1.0, -2.0, 0.5]);

    // The first bias-corrected step moves each weight by about lr.
    let mut opt = OptimizerState::new(AdamConfig::default(), &params);
    opt.step(&mut params, &[Some(vec![3.0, -0.2, 1e-3])], 0.01).unwrap();
    for (x, want) in params[0].data().iter().zip([0.99, -1.99, 0.49]) {
        assert!((x - want).abs() < 1e-6, "{x} vs {want}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for wd in [0.0, 0.01] {
        let x0: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grads: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let lrs = [1e-3, 2e-3, 3e-3, 2e-3, 1e-3];
        let mut params = vec![Tensor::<f64>::from_f64(&[4], &x0).unwrap()];
        let cfg = AdamConfig {
            weight_decay: wd,
            ..AdamConfig::default()
        };
        let mut opt = OptimizerState::new(cfg, &params);
        for (g, &lr) in grads.iter().zip(&lrs) {
            opt.step(&mut params, &[Some(g.clone())], lr).unwrap();
        }
        for (i, &x) in params[0].data().iter().enumerate() {
            let gi: Vec<f64> = grads.iter().map(|g| g[i]).collect();
            assert!((x - adam_oracle(x0[i], &gi, &lrs, wd)).abs() < 1e-12);
        }
    }

    // Decay alone shrinks the weights.
    for decoupled in [false, true] {
        let mut params = vec![Tensor::<f64>::from_f64(&[2], &[3.0, -4.0]).unwrap()];
        let cfg = AdamConfig {
            weight_decay: 0.1,
            decoupled,
            ..AdamConfig::default()
        };
        let mut opt = OptimizerState::new(cfg, &params);
        let norm = |p: &Tensor<f64>| p.data().iter().map(|x| x * x).sum::<f64>();
        let before = norm(&params[0]);
        opt.step(&mut params, &[None], 0.01).unwrap();
        assert!(norm(&params[0]) < before);
    }
    assert!(opt.step(&mut params, &[], 0.1).is_err());
}

fn random_checkpoint(rng: &mut ChaCha8Rng, epoch: usize) -> Checkpoint {
    let mut store = ParamStore::<f32>::new();
    store.insert("a", Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    store.insert("b", Tensor::new(vec![4], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    Checkpoint::from_store(&store, 0xfeed, epoch, 1.5)
}

#[test]
fn checkpoint_round_trip_and_averaging() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ckpts: Vec<Checkpoint> = (1..=4).map(|e| random_checkpoint(&mut rng, e)).collect();
    let bytes = ckpts[0].to_bytes();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpts[0]);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    ckpts[1].save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpts[1]);

    let avg = average_checkpoints(&ckpts).unwrap();
    assert_eq!(avg.epoch, 4);
    for (name, t) in &avg.params {
        for (j, &x) in t.data().iter().enumerate() {
            let mean = ckpts.iter().map(|c| c.get(name).unwrap().data()[j] as f64).sum::<f64>() / 4.0;
            assert!((x as f64 - mean).abs() < 1e-7);
        }
    }
    let single = average_checkpoints(&ckpts[..1]).unwrap();
    assert_eq!(single.params, ckpts[0].params);

    let mut odd = ckpts[0].clone();
    odd.params[1].0 = "c".into();
    assert!(average_checkpoints(&[ckpts[0].clone(), odd]).is_err());
    let mut short = ckpts[0].clone();
    short.params.pop();
    assert!(average_checkpoints(&[ckpts[0].clone(), short]).is_err());
    assert!(average_checkpoints(&[]).is_err());
}

/// Epoch at which a patience rule stops, computed from the whole trace.
fn stop_epoch(trace: &[f64], patience: usize) -> Option<usize> {
    (1..=trace.len()).find(|&e| {
        let best = (1..=e).min_by(|&a, &b| trace[a - 1].partial_cmp(&trace[b - 1]).unwrap().then(a.cmp(&b))).unwrap();
        e >= best + patience
    })
}

#[test]
fn early_stopping_scripted_traces() {
    let mut s = EarlyStopping::new(3);
    // A tie with the best loss is not an improvement.
    let trace = [5.0, 4.0, 4.5, 3.9, 4.2, 3.9, 4.1, 4.0];
    let stops: Vec<bool> = trace.iter().enumerate().map(|(i, &l)| s.observe(i + 1, l)).collect();
    assert_eq!(stops, [false, false, false, false, false, false, true, true]);
    assert_eq!(s.best_epoch, 4);
}

proptest! {
    #[test]
    fn early_stopping_matches_trace_oracle(trace in prop::collection::vec(0.0f64..5.0, 1..40), patience in 1usize..6) {
        let mut s = EarlyStopping::new(patience);
        let first = (1..=trace.len()).find(|&e| s.observe(e, trace[e - 1]));
        prop_assert_eq!(first, stop_epoch(&trace, patience));
    }
}

struct Task {
    vocab: Vocab,
    train: SplitData,
    valid: SplitData,
    d_v: usize,
}

fn task(kind: ModelKind, synth: SynthConfig) -> Task {
    let s = gen_synthetic_corpus(&synth).unwrap();
    let n = synth.n;
    let [tr, va, _] = s.corpus.clone().split_off(n / 10, 1).unwrap();
    let text: Vec<String> = tr.pairs.iter().flat_map(|p| [p.source.clone(), p.target.clone()]).collect();
    let bpe = learn_bpe(&text, 300).unwrap();
    let vocab = joint_vocab(&tokenize_corpus(&tr, &bpe, false));
    let split = |c: &mmt_core::data::ParallelCorpus| {
        let (pairs, references) = encode_pairs(&tokenize_corpus(c, &bpe, false), &vocab);
        SplitData {
            split: c.split,
            pairs,
            ids: (0..c.len()).map(|i| c.sentence_id(i)).collect(),
            visual: visual_features(kind, FeatureSource::Store, c, Some(&s.store), None, 1, synth.d_v, 0).unwrap(),
            references,
        }
    };
    Task {
        train: split(&tr),
        valid: split(&va),
        vocab,
        d_v: synth.d_v,
    }
}

fn small_model(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 16,
        d_ffn: 32,
        n_heads: 2,
        dropout: 0.1,
        vocab_size: vocab,
        max_len: 64,
        positional_encoding: true,
    }
}

fn small_run(kind: ModelKind, seed: u64, epochs: usize) -> TrainRunConfig {
    TrainRunConfig {
        model_kind: kind,
        warmup_steps: 50,
        token_budget: 256,
        max_epochs: epochs,
        avg_last: 2,
        seed,
        ..TrainRunConfig::default()
    }
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        n: 300,
        d_v: 8,
        len_min: 3,
        len_max: 5,
        ..SynthConfig::default()
    }
}

#[test]
fn first_epoch_lowers_validation_loss_for_every_kind() {
    for kind in [ModelKind::TextOnly, ModelKind::GatedFusion] {
        let t = task(kind, small_synth());
        for seed in 0..3 {
            let run = small_run(kind, seed, 1);
            let cfg = small_model(t.vocab.len());
            let d_v = kind.uses_images().then_some(t.d_v);
            let mut untrained_cfg = cfg.clone();
            untrained_cfg.dropout = run.dropout;
            let untrained = Seq2Seq::<f32>::new(untrained_cfg, kind, d_v, seed).unwrap();
            let (before, _) = validate(&untrained, &t.valid, &run, 0).unwrap();
            let out = train(&cfg, &run, &t.train, &t.valid, d_v, 0, &mut |_, _| Ok(())).unwrap();
            let after = out.history[0].val_loss;
            assert!(after < before, "{kind:?} seed {seed}: {before} -> {after}");
            assert_eq!(out.history[0].gate.is_some(), kind == ModelKind::GatedFusion);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let t = task(ModelKind::GatedFusion, small_synth());
    let run = small_run(ModelKind::GatedFusion, 7, 2);
    let cfg = small_model(t.vocab.len());
    let go = || {
        let mut bytes = Vec::new();
        let out = train(&cfg, &run, &t.train, &t.valid, Some(t.d_v), 42, &mut |_, c| {
            bytes.push(c.to_bytes());
            Ok(())
        })
        .unwrap();
        (bytes, out.history)
    };
    let (a, ha) = go();
    let (b, hb) = go();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_eq!(Checkpoint::from_bytes(&a[1]).unwrap().config_hash, 42);
}

#[test]
fn text_only_learns_a_small_bijection() {
    let synth = SynthConfig {
        n: 400,
        n_common: 12,
        mix: [0.4, 0.6, 0.0],
        ..small_synth()
    };
    let t = task(ModelKind::TextOnly, synth);
    let run = TrainRunConfig {
        dropout: 0.0,
        warmup_steps: 100,
        patience: 100,
        ..small_run(ModelKind::TextOnly, 0, 80)
    };
    let cfg = ModelConfig {
        d_model: 32,
        d_ffn: 64,
        n_heads: 4,
        ..small_model(t.vocab.len())
    };
    let out = train(&cfg, &run, &t.train, &t.valid, None, 0, &mut |_, _| Ok(())).unwrap();
    let acc = token_accuracy(&out.model, &t.valid, run.token_budget).unwrap();
    assert!(acc > 0.99, "token accuracy {acc}");
}

#[test]
fn run_config_validation() {
    assert!(TrainRunConfig::default().validate().is_ok());
    for bad in [
        TrainRunConfig { patience: 0, ..TrainRunConfig::default() },
        TrainRunConfig { label_smoothing: 1.0, ..TrainRunConfig::default() },
        TrainRunConfig { weight_decay: -1.0, ..TrainRunConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn weight_decay_sweep_runs_each_cell_in_order() {
    let mut seen = Vec::new();
    let rows = weight_decay_sweep(&TrainRunConfig::default(), &[0.0, 1e-4, 0.1], |run| {
        seen.push(run.weight_decay);
        Ok(CellResult {
            bleu: run.weight_decay * 100.0,
            val_loss: 1.0,
            lambda_bar: None,
        })
    })
    .unwrap();
    assert_eq!(seen, vec![0.0, 1e-4, 0.1]);
    assert_eq!(rows.len(), 3);
    let csv = sweep_csv(SweepAxis::WeightDecay, &rows);
    assert_eq!(csv.lines().next(), Some("weight_decay,bleu,val_loss,lambda_bar"));
    assert_eq!(csv.lines().count(), 4);
    assert!(SweepAxis::WeightDecay.apply(&TrainRunConfig::default(), "x").is_err());
    let noise = SweepAxis::FeatureSource.apply(&TrainRunConfig::default(), "noise").unwrap();
    assert_eq!(noise.feature_source, FeatureSource::Noise);
}
