use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::model::FlatParams;
use crate::tensor::{AdamConfig, Tensor};

fn small(d: usize, h: usize, n: usize, grouping: Grouping) -> HypernetConfig {
    HypernetConfig {
        embed_dim: d,
        hidden_dim: h,
        chunk_size: n,
        grouping,
        ..HypernetConfig::default()
    }
}

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

fn hand_fixture() -> (FeatureExtractor, HeadGroup, EmbeddingMatrix) {
    let ex = FeatureExtractor {
        layers: vec![
            DenseParam::from_tensors(t(&[2, 2], &[0.5, -0.3, 0.2, 0.8]), t(&[2], &[0.1, -0.2])),
            DenseParam::from_tensors(t(&[2, 2], &[1.0, -0.5, 0.4, 0.3]), t(&[2], &[0.0, 0.05])),
            DenseParam::from_tensors(t(&[2, 2], &[0.7, 0.2, -0.6, 0.9]), t(&[2], &[-0.1, 0.3])),
        ],
        trainable: true,
    };
    let head = HeadGroup::from_tensors(
        2,
        t(&[2, 3, 2], &[0.3, -0.2, 1.1, 0.4, -0.5, 0.6, 0.25, 0.75, -0.9, 0.1, 0.2, -0.4]),
        t(&[2, 3], &[0.01, 0.02, 0.03, -0.01, -0.02, -0.03]),
    );
    let emb = EmbeddingMatrix::from_tensor(t(&[2, 2], &[1.0, -0.5, 0.3, 0.9]));
    (ex, head, emb)
}

#[test]
fn hand_computed_generation() {
    let (ex, head, emb) = hand_fixture();
    let theta = generate_params(&ex, &head, &emb, 5).unwrap();
    let expected = [0.005, 0.455, 0.145, 0.38565, -0.26722];
    assert_eq!(theta.len(), 5);
    for (a, b) in theta.as_slice().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn truncated_outputs_get_no_gradient() {
    let (ex, head, emb) = hand_fixture();
    let g = hypernet_backward(&ex, &head, &emb, 5, &[1.0; 5]).unwrap();
    let (gw, gb) = g.head.unwrap();
    assert_eq!(gb.data()[5], 0.0);
    assert!(gw.data()[10..12].iter().all(|v| *v == 0.0));
    assert_ne!(gb.data()[4], 0.0);
}

fn random_fixture(rng: &mut ChaCha8Rng, d: usize, h: usize, n: usize, tau: usize) -> (FeatureExtractor, HeadGroup, EmbeddingMatrix) {
    let ex = FeatureExtractor::init(d, h, h, rng);
    let head = HeadGroup::init(tau, h, n, rng);
    let emb = EmbeddingMatrix::init(tau, d, rng);
    (ex, head, emb)
}

fn objective(ex: &FeatureExtractor, head: &HeadGroup, emb: &EmbeddingMatrix, k: usize, u: &[f64]) -> f64 {
    let theta = generate_params(ex, head, emb, k).unwrap();
    theta.as_slice().iter().zip(u).map(|(a, b)| a * b).sum()
}

fn fd_check(seed: u64, d: usize, h: usize, n: usize, tau: usize, k: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ex, mut head, mut emb) = random_fixture(&mut rng, d, h, n, tau);
    let u: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = hypernet_backward(&ex, &head, &emb, k, &u).unwrap();
    let eps = 1e-6;
    let mut num = Vec::new();
    let mut ana = Vec::new();
    macro_rules! probe {
        ($tensor:expr, $grad:expr) => {
            for i in 0..$tensor.len() {
                let orig = $tensor.data()[i];
                $tensor.data_mut()[i] = orig + eps;
                let plus = objective(&ex, &head, &emb, k, &u);
                $tensor.data_mut()[i] = orig - eps;
                let minus = objective(&ex, &head, &emb, k, &u);
                $tensor.data_mut()[i] = orig;
                num.push((plus - minus) / (2.0 * eps));
                ana.push($grad.data()[i]);
            }
        };
    }
    for l in 0..3 {
        probe!(ex.layers[l].weight, grads.extractor[l].0);
        probe!(ex.layers[l].bias, grads.extractor[l].1);
    }
    let (gw, gb) = grads.head.clone().unwrap();
    probe!(head.weight, gw);
    probe!(head.bias, gb);
    probe!(emb.values, grads.embedding);
    let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
    assert!(diff / scale < 1e-6, "relative error {}", diff / scale);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn vjp_matches_finite_differences(seed in any::<u64>(), d in 1usize..5, h in 1usize..5, n in 1usize..9, tau in 1usize..4, frac in 0.0f64..1.0) {
        let lo = (tau - 1) * n + 1;
        let k = lo + ((tau * n - lo) as f64 * frac) as usize;
        fd_check(seed, d, h, n, tau, k);
    }

    #[test]
    fn output_length_and_chunk_count(k in 1usize..64, n in 1usize..17) {
        let mut hn = Hypernetwork::new(small(3, 4, n, Grouping::ChunkCount)).unwrap();
        let reg = hn.register_client(0, k).unwrap();
        prop_assert_eq!(hn.generate(0).unwrap().len(), k);
        prop_assert!((reg.tau - 1) * n < k && k <= reg.tau * n);
    }
}

#[test]
fn same_chunk_count_shares_one_head() {
    let mut hn = Hypernetwork::new(small(3, 4, 4, Grouping::ChunkCount)).unwrap();
    let a = hn.register_client(0, 5).unwrap();
    let b = hn.register_client(1, 8).unwrap();
    let c = hn.register_client(2, 9).unwrap();
    assert_eq!(a.key, b.key);
    assert!(a.created_group && !b.created_group);
    assert_ne!(a.key, c.key);
    assert_eq!(hn.num_groups(), 2);

    let mut exact = Hypernetwork::new(small(3, 4, 4, Grouping::ExactCount)).unwrap();
    exact.register_client(0, 5).unwrap();
    exact.register_client(1, 8).unwrap();
    exact.register_client(2, 5).unwrap();
    assert_eq!(exact.num_groups(), 2);

    let mut per = Hypernetwork::new(small(3, 4, 4, Grouping::PerClient)).unwrap();
    per.register_client(0, 5).unwrap();
    per.register_client(1, 5).unwrap();
    assert_eq!(per.num_groups(), 2);
}

#[test]
fn global_slot_reuses_smallest_client_head() {
    let mut hn = Hypernetwork::new(small(3, 4, 4, Grouping::ChunkCount)).unwrap();
    hn.register_client(0, 9).unwrap();
    hn.register_client(1, 5).unwrap();
    let g = hn.register_global(None).unwrap();
    assert_eq!(g.key, GroupKey::Chunks(2));
    assert!(!g.created_group);
    assert_eq!(hn.generate_global().unwrap().len(), 5);

    let mut per = Hypernetwork::new(small(3, 4, 4, Grouping::PerClient)).unwrap();
    per.register_client(3, 7).unwrap();
    per.register_client(1, 7).unwrap();
    assert_eq!(per.register_global(None).unwrap().key, GroupKey::Client(1));
    let dedicated = per.register_global(Some(13)).unwrap();
    assert!(dedicated.created_group);
    assert_eq!(dedicated.key, GroupKey::Global);
}

#[test]
fn update_errors() {
    let mut hn = Hypernetwork::new(small(3, 4, 4, Grouping::ChunkCount)).unwrap();
    hn.register_client(0, 6).unwrap();
    let delta = FlatParams(vec![0.1; 6]);
    assert!(matches!(hn.apply_personal_update(0, &delta), Err(Error::StaleUpdate(0))));
    assert!(matches!(hn.apply_personal_update(7, &delta), Err(Error::UnknownClient(7))));
    hn.begin_round(&[0]).unwrap();
    assert!(matches!(
        hn.apply_personal_update(0, &FlatParams(vec![0.0; 5])),
        Err(Error::LengthMismatch { expected: 6, actual: 5 })
    ));
    hn.apply_personal_update(0, &delta).unwrap();
    assert!(matches!(hn.apply_personal_update(0, &delta), Err(Error::StaleUpdate(0))));
    assert!(hn.begin_round(&[4]).is_err());
}

#[test]
fn zero_delta_on_fresh_state_changes_nothing() {
    let mut hn = Hypernetwork::new(small(3, 4, 4, Grouping::ChunkCount)).unwrap();
    hn.register_client(0, 6).unwrap();
    let before = hn.clone();
    hn.begin_round(&[0]).unwrap();
    hn.apply_personal_update(0, &FlatParams(vec![0.0; 6])).unwrap();
    assert_eq!(hn.phi_checksum(), before.phi_checksum());
    assert_eq!(hn.embedding_checksum(0), before.embedding_checksum(0));
}

#[test]
fn update_moves_generation_toward_trained() {
    let mut cfg = small(4, 6, 5, Grouping::ChunkCount);
    cfg.adam = AdamConfig {
        lr: 1e-3,
        ..AdamConfig::default()
    };
    let mut hn = Hypernetwork::new(cfg).unwrap();
    hn.register_client(0, 12).unwrap();
    let old = hn.generate(0).unwrap();
    let delta = FlatParams((0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.1).collect());
    hn.begin_round(&[0]).unwrap();
    hn.apply_personal_update(0, &delta).unwrap();
    let new = hn.generate(0).unwrap();
    let step = new.delta_from(&old).unwrap();
    let inner: f64 = step.as_slice().iter().zip(delta.as_slice()).map(|(a, b)| a * b).sum();
    assert!(inner > 0.0, "{inner}");
}

#[test]
fn global_upstream_is_weighted_average() {
    let a = FlatParams(vec![1.0, -2.0, 0.5]);
    let b = FlatParams(vec![3.0, 2.0, -0.5]);
    let u = global_upstream(&[(&a, 1.0), (&b, 3.0)]).unwrap();
    assert_eq!(u, vec![-2.5, -1.0, 0.25]);
    assert!(global_upstream(&[]).is_err());
    assert!(global_upstream(&[(&a, 0.0)]).is_err());
}

#[test]
fn head_row_surgery_touches_one_chunk() {
    let mut hn = Hypernetwork::new(small(3, 4, 4, Grouping::ChunkCount)).unwrap();
    hn.register_client(0, 11).unwrap();
    let before = hn.generate(0).unwrap();
    let key = hn.group_key(0).unwrap();
    hn.group_mut(key).unwrap().weight_row_mut(1, 2)[0] += 1.0;
    let after = hn.generate(0).unwrap();
    for i in 0..11 {
        assert_eq!(before.as_slice()[i] != after.as_slice()[i], i == 6, "index {i}");
    }
}

#[test]
fn embeddings_only_freeze() {
    let mut hn = Hypernetwork::new(small(3, 4, 4, Grouping::ChunkCount)).unwrap();
    hn.register_client(0, 6).unwrap();
    let handle = hn.freeze(FreezeMode::EmbeddingsOnly);
    assert_eq!(handle.frozen_groups, vec![GroupKey::Chunks(2)]);
    let phi = hn.phi_checksum();
    let old = hn.embedding_checksum(0);
    hn.register_client(1, 7).unwrap();
    assert!(hn.register_client(2, 13).is_err());
    let e1 = hn.embedding_checksum(1);
    hn.begin_round(&[0, 1]).unwrap();
    hn.apply_personal_update(0, &FlatParams(vec![0.3; 6])).unwrap();
    hn.apply_personal_update(1, &FlatParams(vec![0.3; 7])).unwrap();
    assert_eq!(hn.phi_checksum(), phi);
    assert_eq!(hn.embedding_checksum(0), old);
    assert_ne!(hn.embedding_checksum(1), e1);
}

#[test]
fn new_head_freeze() {
    let mut hn = Hypernetwork::new(small(3, 4, 4, Grouping::ChunkCount)).unwrap();
    hn.register_client(0, 6).unwrap();
    hn.freeze(FreezeMode::NewHead);
    let ex = hn.extractor_checksum();
    let old_head = hn.head_checksum(GroupKey::Chunks(2));
    let reg = hn.register_client(5, 13).unwrap();
    assert!(reg.created_group);
    let new_head = hn.head_checksum(reg.key);
    hn.begin_round(&[5]).unwrap();
    hn.apply_personal_update(5, &FlatParams(vec![0.2; 13])).unwrap();
    assert_eq!(hn.extractor_checksum(), ex);
    assert_eq!(hn.head_checksum(GroupKey::Chunks(2)), old_head);
    assert_ne!(hn.head_checksum(reg.key), new_head);
}

#[test]
fn headless_ablation() {
    let mut cfg = small(3, 5, 4, Grouping::ChunkCount);
    cfg.use_heads = false;
    let mut hn = Hypernetwork::new(cfg).unwrap();
    hn.register_client(0, 10).unwrap();
    assert_eq!(hn.generate(0).unwrap().len(), 10);
    assert_eq!(hn.extractor().output_dim(), 4);
    hn.begin_round(&[0]).unwrap();
    let ex = hn.extractor_checksum();
    hn.apply_personal_update(0, &FlatParams(vec![0.1; 10])).unwrap();
    assert_ne!(hn.extractor_checksum(), ex);
}

#[test]
fn shared_group_embeddings() {
    let mut cfg = small(3, 4, 4, Grouping::ChunkCount);
    cfg.shared_group_embeddings = true;
    let mut hn = Hypernetwork::new(cfg).unwrap();
    hn.register_client(0, 6).unwrap();
    hn.register_client(1, 7).unwrap();
    assert_eq!(hn.embedding(0), hn.embedding(1));
    assert_eq!(hn.generate(0).unwrap().as_slice()[..6], hn.generate(1).unwrap().as_slice()[..6]);
}

#[test]
fn checkpoint_round_trip() {
    let mut hn = Hypernetwork::new(small(3, 4, 4, Grouping::ChunkCount)).unwrap();
    hn.register_client(0, 6).unwrap();
    hn.register_global(None).unwrap();
    hn.begin_round(&[0]).unwrap();
    hn.apply_personal_update(0, &FlatParams(vec![0.1; 6])).unwrap();
    let bytes = hn.to_bytes().unwrap();
    let back = Hypernetwork::from_bytes(&bytes).unwrap();
    assert_eq!(back, hn);
    assert!(Hypernetwork::from_bytes(&bytes[..3]).is_err());
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(Hypernetwork::from_bytes(&bad).is_err());
}

#[test]
fn registration_is_order_independent() {
    let mut a = Hypernetwork::new(small(3, 4, 4, Grouping::ChunkCount)).unwrap();
    let mut b = Hypernetwork::new(small(3, 4, 4, Grouping::ChunkCount)).unwrap();
    a.register_client(0, 6).unwrap();
    a.register_client(1, 13).unwrap();
    b.register_client(1, 13).unwrap();
    b.register_client(0, 6).unwrap();
    assert_eq!(a.generate(0).unwrap(), b.generate(0).unwrap());
    assert_eq!(a.generate(1).unwrap(), b.generate(1).unwrap());
}
