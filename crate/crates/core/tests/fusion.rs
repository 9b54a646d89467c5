use mmt_autodiff::{Graph, Tensor};
use mmt_core::fusion::{
    feature_matrix, frozen_noise_feature, gated_fuse, sample_noise_feature, split_gate_records, FeatureTag,
    FusionParams, GateMode, GateRecord, VisualFeature,
};
use mmt_core::params::{Bound, ParamStore};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fusion parameters with explicit values.
fn params(wz: Tensor<f64>, wg: Tensor<f64>, ug: Tensor<f64>) -> (ParamStore<f64>, FusionParams) {
    let (d_v, d) = (wz.shape()[0], wz.shape()[1]);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fp = FusionParams::new(&mut store, &mut rng, d_v, d);
    *store.get_mut(fp.w_z) = wz;
    *store.get_mut(fp.w_gate) = wg;
    *store.get_mut(fp.u_gate) = ug;
    (store, fp)
}

fn matvec(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    (0..w.cols()).map(|j| (0..x.len()).map(|i| x[i] * w.at(i, j)).sum()).collect()
}

#[test]
fn project_image_cases() {
    let eye = Tensor::from_f64(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let (store, fp) = params(eye, Tensor::zeros(&[3, 3]), Tensor::zeros(&[3, 3]));
    let mut g = Graph::new();
    let mut p = Bound::new(&store);
    let f = g.constant(Tensor::from_f64(&[1, 3], &[0.5, -2.0, 7.0]).unwrap());
    let e = fp.project_image(&mut g, &mut p, f).unwrap();
    assert_eq!(g.value(e).data(), &[0.5, -2.0, 7.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let wz = random(&mut rng, &[5, 4]);
    let (store, fp) = params(wz.clone(), Tensor::zeros(&[4, 4]), Tensor::zeros(&[4, 4]));
    let mut g = Graph::new();
    let mut p = Bound::new(&store);
    let zero = g.constant(Tensor::zeros(&[1, 5]));
    let e = fp.project_image(&mut g, &mut p, zero).unwrap();
    assert!(g.value(e).data().iter().all(|&x| x == 0.0));

    let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = g.constant(Tensor::from_f64(&[1, 5], &x).unwrap());
    let e = fp.project_image(&mut g, &mut p, f).unwrap();
    for (a, b) in g.value(e).data().iter().zip(matvec(&x, &wz)) {
        assert!((a - b).abs() < 1e-12);
    }

    let wrong = g.constant(Tensor::zeros(&[1, 4]));
    assert!(fp.project_image(&mut g, &mut p, wrong).is_err());
}

#[test]
fn compute_gate_cases() {
    let z = || Tensor::<f64>::zeros(&[2, 2]);
    let (store, fp) = params(z(), z(), z());
    let mut g = Graph::new();
    let mut p = Bound::new(&store);
    let h = g.constant(Tensor::zeros(&[3, 2]));
    let e = g.constant(Tensor::zeros(&[1, 2]));
    let gate = fp.compute_gate(&mut g, &mut p, h, e, 3, GateMode::Learned).unwrap();
    assert!(g.value(gate).data().iter().all(|&x| x == 0.5));

    // W_Λ = 1000·I, e = 1 → pre-activation 1e3 everywhere.
    let big = Tensor::from_f64(&[2, 2], &[1000.0, 0.0, 0.0, 1000.0]).unwrap();
    let (store, fp) = params(z(), big, z());
    let mut g = Graph::new();
    let mut p = Bound::new(&store);
    let h = g.constant(Tensor::zeros(&[3, 2]));
    let e = g.constant(Tensor::filled(&[1, 2], 1.0));
    let gate = fp.compute_gate(&mut g, &mut p, h, e, 3, GateMode::Learned).unwrap();
    assert!(g.value(gate).data().iter().all(|&x| (x - 1.0).abs() < 1e-12));

    // Per-entry oracle on a random 2×2 case.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (wg, ug) = (random(&mut rng, &[2, 2]), random(&mut rng, &[2, 2]));
    let (ht, img) = (random(&mut rng, &[2, 2]), random(&mut rng, &[1, 2]));
    let (store, fp) = params(z(), wg.clone(), ug.clone());
    let mut g = Graph::new();
    let mut p = Bound::new(&store);
    let (h, e) = (g.constant(ht.clone()), g.constant(img.clone()));
    let gate = fp.compute_gate(&mut g, &mut p, h, e, 2, GateMode::Learned).unwrap();
    let from_img = matvec(img.data(), &wg);
    for t in 0..2 {
        let from_text = matvec(ht.row(t), &ug);
        for j in 0..2 {
            let want = sigmoid(from_img[j] + from_text[j]);
            assert!((g.value(gate).at(t, j) - want).abs() < 1e-15);
        }
    }
}

#[test]
fn gated_fuse_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ht = random(&mut rng, &[3, 4]);
    let img = random(&mut rng, &[1, 4]);
    let mut g = Graph::new();
    let (h, e) = (g.constant(ht.clone()), g.constant(img.clone()));

    let zero = g.constant(Tensor::zeros(&[3, 4]));
    let out = gated_fuse(&mut g, h, e, zero, 3).unwrap();
    assert_eq!(g.value(out), &ht);

    let one = g.constant(Tensor::filled(&[3, 4], 1.0));
    let out = gated_fuse(&mut g, h, e, one, 3).unwrap();
    for t in 0..3 {
        for j in 0..4 {
            assert_eq!(g.value(out).at(t, j), ht.at(t, j) + img.data()[j]);
        }
    }

    let lam = Tensor::from_f64(&[2, 2], &[0.1, 0.9, 0.5, 0.0]).unwrap();
    let h2 = Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let e2 = Tensor::from_f64(&[1, 2], &[10.0, -10.0]).unwrap();
    let (h, e, l) = (g.constant(h2), g.constant(e2), g.constant(lam));
    let out = gated_fuse(&mut g, h, e, l, 2).unwrap();
    let want = [1.0 + 0.1 * 10.0, 2.0 - 0.9 * 10.0, 3.0 + 0.5 * 10.0, 4.0];
    for (a, b) in g.value(out).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

fn rmmt(store: &ParamStore<f64>, fp: &FusionParams, ht: &Tensor<f64>, feats: &Tensor<f64>, k: usize) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let mut p = Bound::new(store);
    let (h, f) = (g.constant(ht.clone()), g.constant(feats.clone()));
    let (out, gate) = fp.rmmt_fuse(&mut g, &mut p, h, f, k, ht.rows(), GateMode::Learned).unwrap();
    (g.value(out).clone(), g.value(gate).clone())
}

#[test]
fn rmmt_fuse_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (store, fp) = params(random(&mut rng, &[6, 4]), random(&mut rng, &[4, 4]), random(&mut rng, &[4, 4]));
    let ht = random(&mut rng, &[3, 4]);
    let one = random(&mut rng, &[1, 6]);

    // K = 1 is plain gated fusion.
    let (single, _) = {
        let mut g = Graph::new();
        let mut p = Bound::new(&store);
        let (h, f) = (g.constant(ht.clone()), g.constant(one.clone()));
        let (out, gate) = fp.fuse_single(&mut g, &mut p, h, f, 3, GateMode::Learned).unwrap();
        (g.value(out).clone(), g.value(gate).clone())
    };
    assert_eq!(rmmt(&store, &fp, &ht, &one, 1).0, single);

    // K copies of one feature.
    let copies = Tensor::new(vec![3, 6], one.data().repeat(3)).unwrap();
    assert_eq!(rmmt(&store, &fp, &ht, &copies, 3).0, single);

    // K = 3 against a composition of scalar oracles.
    let feats = random(&mut rng, &[3, 6]);
    let (out, _) = rmmt(&store, &fp, &ht, &feats, 3);
    let (wz, wg, ug) = (store.get(fp.w_z), store.get(fp.w_gate), store.get(fp.u_gate));
    let proj: Vec<Vec<f64>> = (0..3).map(|k| matvec(feats.row(k), wz)).collect();
    let pooled: Vec<f64> = (0..4).map(|j| proj.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let from_img = matvec(&pooled, wg);
    for t in 0..3 {
        let from_text = matvec(ht.row(t), ug);
        for j in 0..4 {
            let lam = sigmoid(from_img[j] + from_text[j]);
            assert!((out.at(t, j) - (ht.at(t, j) + lam * pooled[j])).abs() < 1e-12);
        }
    }

    let mut g = Graph::new();
    let mut p = Bound::new(&store);
    let (h, f) = (g.constant(ht.clone()), g.constant(feats.clone()));
    assert!(fp.rmmt_fuse(&mut g, &mut p, h, f, 0, 3, GateMode::Learned).is_err());
}

proptest! {
    #[test]
    fn rmmt_fuse_is_permutation_invariant(seed in 0u64..1000, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, fp) = params(random(&mut rng, &[5, 4]), random(&mut rng, &[4, 4]), random(&mut rng, &[4, 4]));
        let ht = random(&mut rng, &[2, 4]);
        let feats = random(&mut rng, &[k, 5]);
        let mut order: Vec<usize> = (0..k).collect();
        order.reverse();
        order.rotate_left(seed as usize % k);
        let permuted: Vec<f64> = order.iter().flat_map(|&i| feats.row(i).to_vec()).collect();
        let permuted = Tensor::new(vec![k, 5], permuted).unwrap();
        prop_assert_eq!(rmmt(&store, &fp, &ht, &feats, k), rmmt(&store, &fp, &ht, &permuted, k));
    }

    #[test]
    fn fused_row_depends_only_on_its_text_row(seed in 0u64..1000, row in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, fp) = params(random(&mut rng, &[5, 4]), random(&mut rng, &[4, 4]), random(&mut rng, &[4, 4]));
        let ht = random(&mut rng, &[3, 4]);
        let feats = random(&mut rng, &[1, 5]);
        let mut changed = ht.clone();
        changed.data_mut()[row * 4] += 1.0;
        let (a, ga) = rmmt(&store, &fp, &ht, &feats, 1);
        let (b, gb) = rmmt(&store, &fp, &changed, &feats, 1);
        for t in (0..3).filter(|&t| t != row) {
            prop_assert_eq!(a.row(t), b.row(t));
            prop_assert_eq!(ga.row(t), gb.row(t));
        }
        prop_assert!(ga.data().iter().all(|&x| x > 0.0 && x < 1.0));
    }
}

#[test]
fn noise_features_are_standard_normal_and_replayable() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = sample_noise_feature(&mut rng, 1_000_000);
    assert_eq!(f.tag, FeatureTag::Noise);
    let n = f.vector.len() as f64;
    let mean = f.vector.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = f.vector.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!((var - 1.0).abs() < 0.02, "variance {var}");

    let a = sample_noise_feature(&mut ChaCha8Rng::seed_from_u64(9), 16);
    let b = sample_noise_feature(&mut ChaCha8Rng::seed_from_u64(9), 16);
    assert_eq!(a, b);
    assert_eq!(frozen_noise_feature(3, 7, 1, 8), frozen_noise_feature(3, 7, 1, 8));
    assert_ne!(frozen_noise_feature(3, 7, 1, 8), frozen_noise_feature(3, 7, 2, 8));
}

#[test]
fn visual_feature_validation() {
    assert!(VisualFeature::new(vec![], FeatureTag::File).is_err());
    assert!(VisualFeature::new(vec![1.0, f32::NAN], FeatureTag::File).is_err());
    let a = VisualFeature::new(vec![1.0, 2.0], FeatureTag::Synthetic).unwrap();
    let b = VisualFeature::new(vec![3.0, 4.0, 5.0], FeatureTag::Synthetic).unwrap();
    assert_eq!(feature_matrix::<f64>(&[&a, &a]).unwrap().shape(), &[2, 2]);
    assert!(feature_matrix::<f64>(&[&a, &b]).is_err());
}

#[test]
fn gate_records_split_batches_and_validate_range() {
    let gate = Tensor::<f64>::from_f64(&[4, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.9, 0.9]).unwrap();
    let ids = vec!["a".to_string(), "b".to_string()];
    let recs = split_gate_records(&gate, 2, &[2, 1], &ids, 3).unwrap();
    assert_eq!(recs[0].lambda, vec![0.1, 0.2, 0.3, 0.4]);
    assert_eq!(recs[1].lambda, vec![0.5, 0.6]);
    assert_eq!((recs[1].t, recs[1].d, recs[1].epoch), (1, 2, 3));
    assert!(GateRecord::new("x", 0, 1, 2, vec![0.5, 1.5]).is_err());
    assert!(GateRecord::new("x", 0, 2, 2, vec![0.5]).is_err());
}
